import numpy as np
import pytest
from numpy.testing import assert_array_equal

from common.errors import BatchTooLargeError, ParameterRangeError, RewardError, ScoreRangeError
from common.loadData import to_arrays
from common.reader import CSVReader
from common.synthdata import split
from model.networks import Network, build_predictor_spec, controller_network, init_network
from model.optim import OptimizerState
from rl.environment import (
    export_episode,
    predictor_update,
    run_episode,
    sample_minibatch,
    select_actions,
    train_supervised,
    validation_losses,
)
from rl.noise import OUNoiseState
from rl.rewards import RewardStrategy
from rl.trainer import build_controller, build_environment


def constant_controller(value_logit: float, image_size: int = 8) -> Network:
    """Controller whose score is sigmoid(value_logit) for every input."""
    spec = controller_network(image_size)
    params = init_network(spec, 0)
    params["layer8.weight"].data[:] = 0.0
    params["layer8.bias"].data[:] = value_logit
    return Network(spec, params)


@pytest.fixture
def weighted_env(make_config, classification_splits):
    train, val, _ = classification_splits

    def make(**env):
        config = make_config(env=env) if env else make_config()
        return build_environment(config, train, val, RewardStrategy("weighted"))

    return make


def test_sample_minibatch(rng):
    rows = sample_minibatch(20, 8, rng)
    assert len(set(rows.tolist())) == 8 and rows.max() < 20
    with pytest.raises(BatchTooLargeError):
        sample_minibatch(5, 6, rng)


def test_select_actions_respects_floor():
    rng = np.random.default_rng(0)
    picks = select_actions(np.zeros(20000), 0.25, rng)
    assert picks.mean() == pytest.approx(0.25, abs=0.02)
    assert select_actions(np.ones(50), 0.0, rng).all()
    assert not select_actions(np.zeros(50), 0.0, rng).any()
    with pytest.raises(ScoreRangeError):
        select_actions(np.array([1.2]), 0.1, rng)
    with pytest.raises(ScoreRangeError):
        select_actions(np.array([np.nan]), 0.1, rng)
    with pytest.raises(ScoreRangeError):
        select_actions(np.array([0.5]), 0.7, rng)


def test_fixed_average_refuses_corrupted_validation(make_config, classification_splits):
    train, val, _ = classification_splits
    assert val.corrupted.any()
    with pytest.raises(RewardError):
        build_environment(make_config(), train, val, RewardStrategy("fixed-avg"))


def test_empty_selection_skips_the_update(weighted_env):
    env = weighted_env()
    x = env.train.features[:0]
    predictor, loss = predictor_update(env.predictor, x, env.train.targets[:0], env.optimizer, env.task)
    assert predictor is env.predictor
    assert np.isnan(loss)


def test_small_predictor_step_does_not_raise_the_batch_loss(classification_splits):
    train, _, _ = classification_splits
    spec = build_predictor_spec("classification", 8)
    x, y = train.features[:16], train.targets[:16]
    for seed in range(100):
        predictor = Network(spec, init_network(spec, seed))
        updated, before = predictor_update(predictor, x, y, OptimizerState("sgd", lr=1e-4), "classification")
        _, after = predictor_update(updated, x, y, OptimizerState("sgd", lr=0.0), "classification")
        assert after <= before, seed


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_learning_rate_leaves_the_predictor_unchanged(classification_splits, kind):
    train, _, _ = classification_splits
    spec = build_predictor_spec("classification", 8)
    predictor = Network(spec, init_network(spec, 0))
    updated, _ = predictor_update(predictor, train.features[:16], train.targets[:16],
                                  OptimizerState(kind, lr=0.0), "classification")
    for name in predictor.params:
        assert updated.params[name].data.tobytes() == predictor.params[name].data.tobytes()


def test_run_episode_links_transitions(weighted_env):
    env = weighted_env()
    controller = constant_controller(0.0)
    noise = OUNoiseState(np.zeros(env.batch_size), sigma=0.2, kappa=0.15)
    trace = run_episode(env, controller, noise, 3)
    assert [t.step for t in trace] == [1, 2, 3]
    assert [t.terminal for t in trace] == [False, False, True]
    assert trace[0].next is trace[1] and trace[1].next is trace[2] and trace[2].next is None
    assert trace[0].reward == 0.0
    for t in trace:
        assert t.rows.shape == (env.batch_size,)
        assert np.all((t.probabilities >= 0) & (t.probabilities <= 1))
        assert t.state_features().shape == (env.batch_size, 16 + 2)
        assert t.progress == t.step / 3
    assert env.steps_taken == 3
    with pytest.raises(ParameterRangeError):
        run_episode(env, controller, None, 0)


def test_batch_order_does_not_depend_on_the_controller(weighted_env):
    first, second = weighted_env(), weighted_env()
    a = run_episode(first, constant_controller(-5.0), None, 3)
    b = run_episode(second, constant_controller(5.0), None, 3)
    for x, y in zip(a, b):
        assert_array_equal(x.rows, y.rows)


def test_select_everything_reproduces_the_supervised_trainer(weighted_env):
    selective, supervised = weighted_env(floor=0.0), weighted_env(floor=0.0)
    always = constant_controller(1000.0)
    trace = run_episode(selective, always, None, 4)
    assert all(t.actions.all() for t in trace)
    train_supervised(supervised, 4)
    assert selective.predictor.params.equals(supervised.predictor.params)


def test_noisy_rollout_can_skip_samples_of_a_select_all_controller(weighted_env):
    env = weighted_env(floor=0.0)
    noise = OUNoiseState(np.zeros(env.batch_size), sigma=0.5, kappa=0.15)
    trace = run_episode(env, constant_controller(1000.0), noise, 4)
    probabilities = np.concatenate([t.probabilities for t in trace])
    actions = np.concatenate([t.actions for t in trace])
    assert (probabilities < 1.0).any()
    assert actions[probabilities == 1.0].all()
    assert np.all(np.concatenate([t.scores for t in trace]) == 1.0)


def test_validation_subsample(weighted_env):
    env = weighted_env(val_subsample=5)
    assert len(env.reward_set()) == 5
    assert len(weighted_env().reward_set()) == len(env.validation)


def test_export_episode(weighted_env, tmp_path):
    env = weighted_env()
    trace = run_episode(env, constant_controller(0.0), None, 2)
    path = tmp_path / "trace.csv"
    export_episode(trace, path)
    frame = CSVReader().read(path)
    assert list(frame.columns) == ["step", "sample_id", "score", "action", "reward_unclipped", "reward_clipped"]
    assert len(frame) == 2 * env.batch_size
    assert frame["score"].between(0, 1).all()


def test_segmentation_environment(make_config, segmentation_samples):
    train, val, _ = (to_arrays(part) for part in split(segmentation_samples, (0.5, 0.25, 0.25), seed=1))
    config = make_config(data={"task": "segmentation", "groups": 6, "corruption": "mask-dropout"},
                         env={"seg_loss": "dice"})
    env = build_environment(config, train, val, RewardStrategy("selective", 0.2))
    trace = run_episode(env, build_controller(config), None, 2)
    assert all(np.isfinite(t.reward_unclipped) for t in trace)
    assert all(-1.0 <= t.reward_unclipped <= 0.0 for t in trace)


def test_validation_losses(weighted_env):
    env = weighted_env()
    losses, scores = validation_losses(env.predictor, env.validation)
    predictions = np.argmax(env.predictor.predict(env.validation.features), axis=1)
    assert_array_equal(losses, (predictions != env.validation.targets).astype(float))
    assert_array_equal(scores, np.ones(len(env.validation)))
    _, scores = validation_losses(env.predictor, env.validation, constant_controller(0.0))
    assert np.allclose(scores, 0.5)
