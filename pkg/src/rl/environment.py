"""Sample-selection environment.

Each step draws a training minibatch, lets the controller score it, keeps a
Bernoulli-sampled subset, updates the predictor on that subset and rewards
the controller with the predictor's validation performance.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
from tqdm.auto import trange

from common.errors import BatchTooLargeError, ParameterRangeError, RewardError, ScoreRangeError
from common.loadData import DatasetArrays
from common.score import per_sample_metric
from model.networks import CONTROLLER_EMBEDDING_LAYER, Network
from model.optim import OptimizerState, optimizer_step
from ndgrad import Graph, Tensor, losses, per_sample_task_loss, sigmoid
from rl.noise import OUNoiseState, ou_step
from rl.rewards import RewardStrategy, clip_reward, compute_reward

logger = logging.getLogger(__name__)


@dataclass
class EnvState:
    predictor: Network
    step: int
    horizon: int
    rows: np.ndarray
    sample_losses: np.ndarray

    @property
    def progress(self) -> float:
        return self.step / self.horizon


@dataclass
class TransitionRecord:
    step: int
    rows: np.ndarray
    sample_ids: np.ndarray
    scores: np.ndarray
    probabilities: np.ndarray
    actions: np.ndarray
    reward: float
    reward_unclipped: float
    sample_losses: np.ndarray
    progress: float
    embeddings: np.ndarray
    predictor_loss: float = float("nan")
    terminal: bool = False
    next: Optional["TransitionRecord"] = field(default=None, repr=False)

    @property
    def skipped(self) -> bool:
        return not self.actions.any()

    def state_features(self, rows=None) -> np.ndarray:
        """Per-sample critic state: [controller embedding | predictor loss | progress]."""
        rows = slice(None) if rows is None else rows
        emb = self.embeddings[rows]
        return np.concatenate(
            [emb, self.sample_losses[rows][:, None], np.full((len(emb), 1), self.progress)], axis=1
        )


def sample_minibatch(train, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Row indices of a uniform batch drawn without replacement."""
    n = train if isinstance(train, (int, np.integer)) else len(train)
    if batch_size > n:
        raise BatchTooLargeError(f"batch of {batch_size} from a training set of {n}")
    return rng.choice(n, size=batch_size, replace=False)


def select_actions(scores, floor: float, rng: np.random.Generator) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if np.any(~np.isfinite(scores)) or np.any(scores < 0) or np.any(scores > 1):
        raise ScoreRangeError("controller scores must lie in [0, 1]")
    if not 0.0 <= floor <= 0.5:
        raise ScoreRangeError(f"sampling floor must lie in [0, 0.5], got {floor}")
    return rng.random(len(scores)) < np.maximum(scores, floor)


def task_loss(predictor: Network, x, y, task: str, seg_loss: str = "bce"):
    logits = predictor(x)
    if task == "classification":
        return losses("softmax-cross-entropy", logits, Tensor(y))
    if seg_loss == "dice":
        return losses("soft-dice", sigmoid(logits), Tensor(y))
    return losses("pixelwise-bce-with-logits", logits, Tensor(y))


def predictor_update(predictor: Network, x: np.ndarray, y: np.ndarray, optimizer: OptimizerState,
                     task: str, seg_loss: str = "bce"):
    """One optimiser step on the selected samples; returns (predictor, loss before the step)."""
    if len(x) == 0:
        logger.info(" Empty selection, predictor update skipped")
        return predictor, float("nan")
    params = predictor.params.tracked()
    with Graph() as tape:
        loss = task_loss(Network(predictor.spec, params), x, y, task, seg_loss)
    tape.backward(loss)
    return Network(predictor.spec, optimizer_step(optimizer, params)), loss.item()


def validation_losses(predictor: Network, validation: DatasetArrays, controller: Optional[Network] = None):
    """Per-sample task loss (1 - accuracy indicator or 1 - Dice) and controller scores."""
    metric = per_sample_metric(validation.task, predictor.predict(validation.features), validation.targets)
    scores = np.ones(len(validation)) if controller is None else controller.predict(validation.features)
    return 1.0 - metric, scores


class SelectionEnvironment:
    """Holds the persistent predictor, its optimiser and the reward baseline.

    Randomness comes from four independent streams spawned from ``seed``:
    batch order, action sampling, validation subsampling and exploration
    noise. Batch order therefore does not depend on what the controller does.
    """

    def __init__(self, train: DatasetArrays, validation: DatasetArrays, predictor: Network,
                 strategy: RewardStrategy, optimizer: OptimizerState, batch_size: int = 64,
                 floor: float = 0.1, alpha_r: float = 0.9, seed: int = 0, val_subsample: int = 0,
                 seg_loss: str = "bce", embedding_layer: int = CONTROLLER_EMBEDDING_LAYER):
        if strategy.requires_clean_validation and validation.corrupted.any():
            raise RewardError("fixed-avg reward needs a corruption-filtered validation set")
        if len(validation) == 0:
            raise RewardError("validation set is empty")
        self.train = train
        self.validation = validation
        self.predictor = predictor
        self.strategy = strategy
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.floor = floor
        self.alpha_r = alpha_r
        self.val_subsample = val_subsample
        self.seg_loss = seg_loss
        self.embedding_layer = embedding_layer
        self.batch_rng, self.action_rng, self.val_rng, self.noise_rng = (
            np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)
        )
        self.moving_average: Optional[float] = None
        self.steps_taken = 0

    @property
    def task(self) -> str:
        return self.train.task

    def observe(self, step: int, horizon: int) -> EnvState:
        rows = sample_minibatch(self.train, self.batch_size, self.batch_rng)
        outputs = self.predictor.predict(self.train.features[rows])
        sample_losses = per_sample_task_loss(self.task, outputs, self.train.targets[rows])
        return EnvState(self.predictor, step, horizon, rows, sample_losses)

    def reward_set(self) -> DatasetArrays:
        if self.val_subsample and self.val_subsample < len(self.validation):
            picks = np.sort(self.val_rng.choice(len(self.validation), size=self.val_subsample, replace=False))
            return self.validation.subset(picks)
        return self.validation

    def step(self, controller: Network, noise: Optional[OUNoiseState], step: int, horizon: int,
             strategy: Optional[RewardStrategy] = None) -> TransitionRecord:
        strategy = strategy or self.strategy
        state = self.observe(step, horizon)
        x, y = self.train.features[state.rows], self.train.targets[state.rows]

        scores, embeddings = controller.embed(x, self.embedding_layer)
        probabilities = scores
        if noise is not None:
            if noise.x.shape != scores.shape:
                noise.reset(len(scores))
            probabilities = np.clip(scores + ou_step(noise, self.noise_rng), 0.0, 1.0)
        actions = select_actions(probabilities, self.floor, self.action_rng)

        self.predictor, predictor_loss = predictor_update(
            self.predictor, x[actions], y[actions], self.optimizer, self.task, self.seg_loss
        )
        self.steps_taken += 1

        val = self.reward_set()
        val_losses, val_scores = validation_losses(self.predictor, val, controller)
        unclipped = compute_reward(strategy, val_losses, val_scores, val.ids)
        reward, self.moving_average = clip_reward(unclipped, self.moving_average, self.alpha_r)

        return TransitionRecord(
            step=step,
            rows=state.rows,
            sample_ids=self.train.ids[state.rows],
            scores=scores,
            probabilities=probabilities,
            actions=actions,
            reward=reward,
            reward_unclipped=unclipped,
            sample_losses=state.sample_losses,
            progress=state.progress,
            embeddings=embeddings,
            predictor_loss=predictor_loss,
        )


def run_episode(env: SelectionEnvironment, controller: Network, noise: Optional[OUNoiseState], T: int,
                strategy: Optional[RewardStrategy] = None) -> List[TransitionRecord]:
    """T linked steps; the last one is terminal. The predictor carries over between episodes.

    With ``noise`` the actions are drawn from the clipped noisy scores, so a
    controller that always outputs 1 can still skip samples whose noise is
    negative. Pass ``None`` for a noise-free rollout.
    """
    if T < 1:
        raise ParameterRangeError(f"episode length must be >= 1, got {T}")
    trace = []
    for t in range(1, T + 1):
        record = env.step(controller, noise, t, T, strategy)
        if trace:
            trace[-1].next = record
        trace.append(record)
    trace[-1].terminal = True
    skipped = sum(r.skipped for r in trace)
    if skipped:
        logger.info(" %d of %d steps selected no samples", skipped, T)
    return trace


def train_supervised(env: SelectionEnvironment, steps: int, silent: bool = True) -> Network:
    """Non-selective baseline: every sampled batch is used in full.

    Draws batches from the same stream as the selective trainer, so a
    controller that always selects everything reproduces this trajectory.
    """
    for _ in trange(steps, desc="Baseline step", disable=silent, mininterval=0):
        rows = sample_minibatch(env.train, env.batch_size, env.batch_rng)
        env.predictor, _ = predictor_update(
            env.predictor, env.train.features[rows], env.train.targets[rows], env.optimizer, env.task, env.seg_loss
        )
        env.steps_taken += 1
    return env.predictor


def episode_frame(trace: List[TransitionRecord]) -> pd.DataFrame:
    rows = []
    for record in trace:
        for sample_id, score, action in zip(record.sample_ids, record.scores, record.actions):
            rows.append((record.step, int(sample_id), float(score), int(action),
                         record.reward_unclipped, record.reward))
    return pd.DataFrame(rows, columns=["step", "sample_id", "score", "action", "reward_unclipped", "reward_clipped"])


def export_episode(trace: List[TransitionRecord], path):
    episode_frame(trace).to_csv(path, index=False)
