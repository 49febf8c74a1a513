"""Deterministic actor-critic training of the controller.

The actor is the controller itself: its per-sample score is the action. The
critic scores one sample at a time from [state features | action] and the
value of a whole batch is the mean over its samples, so any subset of a
batch's rows gives an unbiased estimate.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from common.args import DDPGConfig
from common.errors import EmptyInputError, MissingSuccessorError
from model.networks import Network, critic_network, init_network
from model.optim import OptimizerState, optimizer_step, soft_update
from ndgrad import Graph, Tensor, concat, losses, matmul, neg, reduce, reshape
from rl.environment import TransitionRecord
from rl.replay import ReplayBuffer

logger = logging.getLogger(__name__)


@dataclass
class CriticBatch:
    """Rows of several transitions stacked together.

    ``segments`` is N x R: row n averages the R stacked samples that belong
    to transition n.
    """

    features: np.ndarray
    actions: np.ndarray
    inputs: np.ndarray
    segments: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray
    next: Optional["CriticBatch"] = None
    has_next: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.rewards)


def _stack(transitions: Sequence[TransitionRecord], inputs_source: np.ndarray, per_transition: int,
           rng: np.random.Generator) -> CriticBatch:
    features, actions, inputs, owners = [], [], [], []
    for n, record in enumerate(transitions):
        size = len(record.rows)
        picks = np.sort(rng.choice(size, size=min(per_transition, size), replace=False))
        features.append(record.state_features(picks))
        actions.append(record.probabilities[picks])
        inputs.append(inputs_source[record.rows[picks]])
        owners.append(np.full(len(picks), n))
    owners = np.concatenate(owners)
    segments = np.zeros((len(transitions), len(owners)))
    for n in range(len(transitions)):
        mine = owners == n
        segments[n, mine] = 1.0 / mine.sum()
    return CriticBatch(
        features=np.concatenate(features),
        actions=np.concatenate(actions),
        inputs=np.concatenate(inputs),
        segments=segments,
        rewards=np.array([t.reward for t in transitions], dtype=np.float64),
        terminal=np.array([t.terminal for t in transitions], dtype=bool),
    )


def build_critic_batch(transitions: Sequence[TransitionRecord], inputs_source: np.ndarray,
                       per_transition: int, rng: np.random.Generator) -> CriticBatch:
    """Subsample ``per_transition`` rows of every transition and of its successor."""
    if not transitions:
        raise EmptyInputError("critic batch needs at least one transition")
    batch = _stack(transitions, inputs_source, per_transition, rng)
    batch.has_next = np.array([t.next is not None and not t.terminal for t in transitions], dtype=bool)
    successors = [t.next for t, keep in zip(transitions, batch.has_next) if keep]
    if successors:
        batch.next = _stack(successors, inputs_source, per_transition, rng)
    return batch


def batch_values(critic: Network, features, actions, segments):
    """Batch Q = segment mean of per-sample critic outputs; returns an N x 1 tensor."""
    actions = actions if isinstance(actions, Tensor) else Tensor(np.asarray(actions, dtype=np.float64))
    x = concat([Tensor(features), reshape(actions, (actions.shape[0], 1))], axis=1)
    return matmul(Tensor(segments), critic(x))


def critic_targets(batch: CriticBatch, target_critic: Network, target_actor: Network, gamma: float) -> np.ndarray:
    """R + gamma * Q'(s', mu'(s')), with the bootstrap term dropped for terminal steps."""
    has_next = batch.has_next if batch.has_next is not None else np.zeros(len(batch), dtype=bool)
    orphans = ~batch.terminal & ~has_next
    if orphans.any():
        raise MissingSuccessorError(f"{int(orphans.sum())} non-terminal transitions have no successor")
    targets = batch.rewards.copy()
    if gamma == 0 or batch.next is None:
        return targets
    nxt = batch.next
    next_actions = target_actor.predict(nxt.inputs)
    frozen = Network(target_critic.spec, target_critic.params.detached())
    bootstrap = batch_values(frozen, nxt.features, next_actions, nxt.segments).data[:, 0]
    targets[has_next] += gamma * bootstrap
    return targets


def critic_update(critic: Network, batch: CriticBatch, targets: np.ndarray, optimizer: OptimizerState):
    """One step on the mean squared error between batch Q and the targets; returns (critic, mse)."""
    if len(batch) == 0:
        raise EmptyInputError("critic update on an empty batch")
    params = critic.params.tracked()
    with Graph() as tape:
        q = batch_values(Network(critic.spec, params), batch.features, batch.actions, batch.segments)
        mse = losses("mse", reshape(q, (len(batch),)), Tensor(targets))
    tape.backward(mse)
    return Network(critic.spec, optimizer_step(optimizer, params)), mse.item()


def actor_update(controller: Network, critic: Network, batch: CriticBatch, optimizer: OptimizerState) -> Network:
    """Ascend mean Q(s, mu(s)) through the controller; the critic is held fixed."""
    if len(batch) == 0:
        raise EmptyInputError("actor update on an empty batch")
    params = controller.params.tracked()
    frozen = Network(critic.spec, critic.params.detached())
    with Graph() as tape:
        actions = Network(controller.spec, params)(batch.inputs)
        objective = reduce("mean", batch_values(frozen, batch.features, actions, batch.segments))
        loss = neg(objective)
    tape.backward(loss)
    return Network(controller.spec, optimizer_step(optimizer, params))


class DDPGAgent:
    """Online/target actor and critic, their optimisers and the replay buffer."""

    def __init__(self, controller: Network, feature_dim: int, config: DDPGConfig, inputs_source: np.ndarray,
                 rng: Optional[np.random.Generator] = None):
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.inputs_source = inputs_source
        critic_spec = critic_network(feature_dim)
        self.controller = controller
        self.critic = Network(critic_spec, init_network(critic_spec, config.init_seed + 2))
        self.target_controller = Network(controller.spec, controller.params.copy(requires_grad=False))
        self.target_critic = Network(critic_spec, self.critic.params.copy(requires_grad=False))
        self.actor_optimizer = OptimizerState("adam", config.actor_lr)
        self.critic_optimizer = OptimizerState("adam", config.critic_lr)
        self.replay = ReplayBuffer(config.replay_capacity, self.rng)

    def remember(self, episode: List[TransitionRecord]):
        self.replay.extend(episode)

    def update(self) -> float:
        """``updates_per_iteration`` critic + actor steps; returns the mean critic mse."""
        errors = []
        for _ in range(self.config.updates_per_iteration):
            size = min(self.config.critic_batch, len(self.replay))
            if size == 0:
                break
            batch = build_critic_batch(
                self.replay.sample(size), self.inputs_source, self.config.critic_samples_per_transition, self.rng
            )
            targets = critic_targets(batch, self.target_critic, self.target_controller, self.config.gamma)
            self.critic, mse = critic_update(self.critic, batch, targets, self.critic_optimizer)
            self.controller = actor_update(self.controller, self.critic, batch, self.actor_optimizer)
            self.target_critic = Network(
                self.target_critic.spec, soft_update(self.target_critic.params, self.critic.params, self.config.tau)
            )
            self.target_controller = Network(
                self.target_controller.spec,
                soft_update(self.target_controller.params, self.controller.params, self.config.tau),
            )
            errors.append(mse)
        return float(np.mean(errors)) if errors else float("nan")
