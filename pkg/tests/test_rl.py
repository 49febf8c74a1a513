import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from common.errors import EmptyInputError, MissingSuccessorError
from common.reader import CSVReader
from model.networks import LayerSpec, Network, NetworkSpec, controller_network, critic_network, init_network
from model.optim import OptimizerState, soft_update
from ndgrad import Graph, Tensor, grad_check, mul, neg, reduce
from rl.ddpg import (
    CriticBatch,
    DDPGAgent,
    actor_update,
    batch_values,
    build_critic_batch,
    critic_targets,
    critic_update,
)
from rl.environment import TransitionRecord, run_episode
from rl.noise import OUNoiseState
from rl.reinforce import discounted_returns, log_likelihood, reinforce_update, row_log_likelihood
from rl.rewards import RewardStrategy
from rl.trainer import LOG_COLUMNS, build_controller, build_environment, score_separation, train_controller


def linear_actor(inputs: int) -> NetworkSpec:
    return NetworkSpec((LayerSpec("dense", 1), LayerSpec("sigmoid")), (inputs,), "unit-interval-scalar").validate()


def transition(rows, actions, reward, step=1, terminal=True):
    rows = np.asarray(rows)
    return TransitionRecord(
        step=step, rows=rows, sample_ids=rows, scores=np.full(len(rows), 0.5),
        probabilities=np.full(len(rows), 0.5), actions=np.asarray(actions, dtype=bool), reward=reward,
        reward_unclipped=reward, sample_losses=np.zeros(len(rows)), progress=1.0,
        embeddings=np.zeros((len(rows), 2)), terminal=terminal,
    )


@pytest.fixture
def episode(make_config, classification_splits):
    train, val, _ = classification_splits
    config = make_config(env={"strategy": "weighted"})
    env = build_environment(config, train, val, RewardStrategy("weighted"))
    controller = build_controller(config)
    trace = run_episode(env, controller, OUNoiseState(np.zeros(env.batch_size)), 3)
    return config, env, controller, trace


def test_discounted_returns():
    assert_allclose(discounted_returns([1.0, 1.0, 1.0], 0.5), [1.75, 1.5, 1.0])
    assert_allclose(discounted_returns([2.0, -1.0], 0.0), [2.0, -1.0])


def test_log_likelihood_is_finite_at_saturation():
    value = log_likelihood(Tensor(np.array([1.0, 0.0])), [False, True]).item()
    assert np.isfinite(value)
    assert value == pytest.approx(2 * np.log(1e-7), rel=1e-3)


def test_reinforce_gradient_matches_finite_differences(rng):
    spec = linear_actor(3)
    params = init_network(spec, 0)
    x = rng.normal(size=(8, 3))
    actions = rng.random(8) < 0.5
    returns = Tensor(rng.normal(size=8))

    def objective(weight):
        trial = params.copy(requires_grad=False)
        trial["layer0.weight"] = weight
        scores = Network(spec, trial)(x)
        return neg(reduce("sum", mul(returns, row_log_likelihood(scores, actions))))

    assert grad_check(objective, params["layer0.weight"].data) < 1e-4


def test_reinforce_update_raises_likelihood_of_rewarded_actions(rng):
    spec = linear_actor(2)
    controller = Network(spec, init_network(spec, 1))
    inputs = rng.normal(size=(10, 2))
    actions = np.ones(10, dtype=bool)
    before = log_likelihood(controller(inputs), actions).item()
    updated = reinforce_update(controller, [[transition(np.arange(10), actions, 1.0)]], inputs,
                               OptimizerState("sgd", lr=0.01), gamma=0.9)
    assert log_likelihood(updated(inputs), actions).item() > before
    with pytest.raises(EmptyInputError):
        reinforce_update(controller, [], inputs, OptimizerState("sgd"), 0.9)


def test_log_likelihood_uses_the_sampling_floor():
    scores = Tensor(np.array([1e-6, 0.5, 0.05, 0.05]), requires_grad=True)
    with Graph() as tape:
        rows = row_log_likelihood(scores, [True, True, False, True], floor=0.1)
        total = reduce("sum", rows)
    tape.backward(total)
    assert_allclose(rows.data, np.log([0.1, 0.5, 0.9, 0.1]), rtol=1e-5)
    assert_array_equal(scores.grad[[0, 2, 3]], 0.0)
    assert scores.grad[1] == pytest.approx(2.0, rel=1e-5)


def test_reinforce_update_ignores_samples_held_at_the_floor(rng):
    spec = linear_actor(2)
    params = init_network(spec, 0)
    params["layer0.weight"].data[:] = 0.0
    params["layer0.bias"].data[:] = -20.0
    controller = Network(spec, params)
    inputs = rng.normal(size=(10, 2))
    episodes = [[transition(np.arange(10), np.ones(10, dtype=bool), 1.0)]]
    held = reinforce_update(controller, episodes, inputs, OptimizerState("sgd", lr=0.1), 0.9, floor=0.1)
    assert held.params.equals(controller.params)
    free = reinforce_update(controller, episodes, inputs, OptimizerState("sgd", lr=0.1), 0.9)
    assert not free.params.equals(controller.params)


def test_critic_batch_layout(episode):
    config, env, _, trace = episode
    batch = build_critic_batch(trace, env.train.features, 3, np.random.default_rng(0))
    assert len(batch) == 3
    assert batch.segments.shape == (3, 9)
    assert_allclose(batch.segments.sum(axis=1), np.ones(3))
    assert batch.features.shape == (9, 16 + 2)
    assert batch.inputs.shape == (9, 1, 8, 8)
    assert_array_equal(batch.has_next, [True, True, False])
    assert len(batch.next) == 2
    with pytest.raises(EmptyInputError):
        build_critic_batch([], env.train.features, 3, np.random.default_rng(0))


def test_critic_targets(episode):
    config, env, controller, trace = episode
    batch = build_critic_batch(trace, env.train.features, 4, np.random.default_rng(0))
    critic = Network(critic_network(18), init_network(critic_network(18), 0))
    assert_array_equal(critic_targets(batch, critic, controller, 0.0), batch.rewards)

    targets = critic_targets(batch, critic, controller, 0.9)
    nxt = batch.next
    bootstrap = batch_values(critic, nxt.features, controller.predict(nxt.inputs), nxt.segments).data[:, 0]
    assert_allclose(targets[:2], batch.rewards[:2] + 0.9 * bootstrap)
    assert targets[2] == batch.rewards[2]

    batch.terminal[:] = False
    batch.has_next[:] = False
    with pytest.raises(MissingSuccessorError):
        critic_targets(batch, critic, controller, 0.9)


def test_batch_value_is_the_mean_over_samples(rng):
    spec = critic_network(2, hidden=4)
    critic = Network(spec, init_network(spec, 3))
    features, actions = rng.normal(size=(5, 2)), rng.random(5)
    segments = np.array([[0.5, 0.5, 0, 0, 0], [0, 0, 1 / 3, 1 / 3, 1 / 3]])
    per_sample = critic.predict(np.concatenate([features, actions[:, None]], axis=1))[:, 0]
    values = batch_values(critic, features, actions, segments).data[:, 0]
    assert_allclose(values, [per_sample[:2].mean(), per_sample[2:].mean()])


def test_actor_gradient_matches_finite_differences(rng):
    actor_spec, critic_spec = linear_actor(2), critic_network(2, hidden=4)
    actor = init_network(actor_spec, 0)
    critic = Network(critic_spec, init_network(critic_spec, 1).detached())
    inputs, features = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    segments = np.kron(np.eye(2), np.full((1, 3), 1 / 3))

    for name in actor:
        def objective(value, name=name):
            trial = actor.copy(requires_grad=False)
            trial[name] = value
            actions = Network(actor_spec, trial)(inputs)
            return neg(reduce("mean", batch_values(critic, features, actions, segments)))

        assert grad_check(objective, actor[name].data) < 1e-4


def test_critic_update_fits_a_fixed_batch(rng):
    spec = critic_network(2)
    critic = Network(spec, init_network(spec, 0))
    batch = CriticBatch(
        features=rng.normal(size=(8, 2)), actions=rng.random(8), inputs=np.zeros((8, 1)),
        segments=np.eye(8), rewards=rng.normal(size=8), terminal=np.ones(8, dtype=bool),
    )
    optimizer = OptimizerState("adam", 1e-2)
    critic, first = critic_update(critic, batch, batch.rewards, optimizer)
    for _ in range(500):
        critic, last = critic_update(critic, batch, batch.rewards, optimizer)
    assert last < 0.5 * first


def test_agent_update_moves_targets_softly(episode):
    config, env, controller, trace = episode
    agent = DDPGAgent(controller, 18, config.rl, env.train.features, np.random.default_rng(0))
    old_critic_target = agent.target_critic.params.copy()
    old_actor_target = agent.target_controller.params.copy()
    agent.remember(trace)
    assert len(agent.replay) == 3
    mse = agent.update()
    assert np.isfinite(mse)
    assert agent.target_critic.params.equals(soft_update(old_critic_target, agent.critic.params, config.rl.tau))
    assert agent.target_controller.params.equals(
        soft_update(old_actor_target, agent.controller.params, config.rl.tau)
    )
    assert not agent.controller.params.equals(controller.params)


def bandit(seed: int, updates: int = 2000) -> float:
    """Final actor output on a one-step problem with reward -(a - 0.7)^2."""
    rng = np.random.default_rng(seed)
    actor_spec, critic_spec = linear_actor(1), critic_network(1)
    actor = Network(actor_spec, init_network(actor_spec, seed))
    critic = Network(critic_spec, init_network(critic_spec, seed + 100))
    actor_optimizer, critic_optimizer = OptimizerState("adam", 5e-3), OptimizerState("adam", 1e-2)
    inputs = np.ones((32, 1))
    features = np.zeros((32, 1))
    history = []
    for _ in range(updates):
        mu = actor.predict(inputs)
        actions = np.clip(mu + rng.normal(0.0, 0.2, size=32), 0.0, 1.0)
        batch = CriticBatch(features, actions, inputs, np.eye(32), -(actions - 0.7) ** 2, np.ones(32, dtype=bool))
        critic, _ = critic_update(critic, batch, batch.rewards, critic_optimizer)
        actor = actor_update(actor, critic, batch, actor_optimizer)
        history.append(float(actor.predict(inputs[:1])[0]))
    return float(np.mean(history[-200:]))


def test_bandit_actor_converges():
    assert bandit(0) == pytest.approx(0.7, abs=0.05)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_bandit_actor_converges_for_every_seed(seed):
    assert bandit(seed) == pytest.approx(0.7, abs=0.05)


def run_training(make_config, splits, tmp_path, **rl):
    train, val, _ = splits
    config = make_config(env={"strategy": "weighted"}, rl=rl) if rl else make_config(env={"strategy": "weighted"})
    env = build_environment(config, train, val, RewardStrategy("weighted"))
    return config, train_controller(config, env, output_dir=str(tmp_path))


def test_train_controller_writes_log_and_trace(make_config, classification_splits, tmp_path):
    config, result = run_training(make_config, classification_splits, tmp_path)
    assert list(result.log.columns) == LOG_COLUMNS
    assert len(result.log) == config.rl.max_iterations * config.rl.episodes_per_update
    assert result.iterations == config.rl.max_iterations
    assert 0 <= result.best_iteration < result.iterations
    assert np.isfinite(result.log["mean_unclipped_reward"]).all()
    assert np.isfinite(result.log["critic_mse"]).all()
    assert result.critic is not None
    trace = CSVReader().read(tmp_path / "episode_trace.csv")
    assert len(trace) == config.rl.steps_per_episode * config.env.batch_size


def iteration_rewards(log):
    return log.groupby("outer_iter")["mean_unclipped_reward"].mean().to_numpy()


def test_train_controller_stops_early(make_config, classification_splits, tmp_path):
    _, result = run_training(make_config, classification_splits, tmp_path, max_iterations=6, patience=1, tol=1e9)
    assert result.iterations == 2
    assert result.best_iteration == int(np.argmax(iteration_rewards(result.log)))


def test_best_snapshot_is_the_highest_unclipped_reward(make_config, classification_splits, tmp_path):
    _, result = run_training(make_config, classification_splits, tmp_path, max_iterations=8, patience=100, tol=0.02)
    rewards = iteration_rewards(result.log)
    assert len(rewards) == 8
    assert result.best_iteration == int(np.argmax(rewards))
    assert result.best_reward == pytest.approx(rewards.max())


def test_train_controller_with_reinforce(make_config, classification_splits, tmp_path):
    _, result = run_training(make_config, classification_splits, tmp_path, algorithm="reinforce")
    assert result.critic is None
    assert result.log["critic_mse"].isna().all()
    assert not result.controller.params.equals(build_controller(make_config()).params)


def test_training_is_reproducible(make_config, classification_splits, tmp_path):
    _, first = run_training(make_config, classification_splits, tmp_path / "a")
    _, second = run_training(make_config, classification_splits, tmp_path / "b")
    assert first.controller.params.equals(second.controller.params)
    assert first.predictor.params.equals(second.predictor.params)
    pd.testing.assert_frame_equal(first.log, second.log)


def test_score_separation_uses_hidden_flags(classification_splits):
    train, _, _ = classification_splits
    clean, dirty = score_separation(constant_controller_like(train), train, np.arange(len(train)))
    assert clean == pytest.approx(dirty)
    assert all(np.isnan(score_separation(constant_controller_like(train), train, np.zeros(0, dtype=int))))


def constant_controller_like(train):
    spec = controller_network(train.features.shape[-1])
    params = init_network(spec, 0)
    params["layer8.weight"].data[:] = 0.0
    return Network(spec, params)
