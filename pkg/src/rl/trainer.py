"""Outer loop: collect episodes, update the controller, stop when the reward stalls."""
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from tensorboardX import SummaryWriter
from tqdm.auto import trange

from common.args import ExperimentConfig
from common.loadData import DatasetArrays
from model.networks import (
    CONTROLLER_EMBEDDING_LAYER,
    Network,
    build_predictor_spec,
    controller_network,
    init_network,
)
from model.optim import OptimizerState
from rl.ddpg import DDPGAgent
from rl.environment import SelectionEnvironment, export_episode, run_episode
from rl.noise import OUNoiseState
from rl.reinforce import reinforce_update
from rl.rewards import RewardStrategy

logger = logging.getLogger(__name__)

LOG_COLUMNS = [
    "outer_iter",
    "episode",
    "mean_unclipped_reward",
    "mean_clipped_reward",
    "critic_mse",
    "mean_controller_score_clean",
    "mean_controller_score_corrupted",
]


@dataclass
class TrainingResult:
    controller: Network
    predictor: Network
    log: pd.DataFrame
    critic: Optional[Network] = None
    best_iteration: int = -1
    best_reward: float = float("nan")
    iterations: int = 0
    final: dict = field(default_factory=dict)


def reward_strategy(config: ExperimentConfig) -> Optional[RewardStrategy]:
    if config.env.strategy == "baseline":
        return None
    return RewardStrategy(config.env.strategy, config.env.s_rej, config.env.selective_keep)


def build_environment(config: ExperimentConfig, train: DatasetArrays, validation: DatasetArrays,
                      strategy: Optional[RewardStrategy] = None) -> SelectionEnvironment:
    """Fresh predictor (seeded by ``rl.init_seed``) inside an environment seeded by ``rl.seed``."""
    spec = build_predictor_spec(config.data.task, config.data.image_size)
    predictor = Network(spec, init_network(spec, config.rl.init_seed))
    optimizer = OptimizerState(config.env.predictor_optimizer, config.env.predictor_lr)
    return SelectionEnvironment(
        train, validation, predictor,
        strategy or RewardStrategy("weighted"),
        optimizer,
        batch_size=config.env.batch_size,
        floor=config.env.floor,
        alpha_r=config.env.alpha_r,
        seed=config.rl.seed,
        val_subsample=config.env.val_subsample,
        seg_loss=config.env.seg_loss,
    )


def build_controller(config: ExperimentConfig) -> Network:
    spec = controller_network(config.data.image_size)
    return Network(spec, init_network(spec, config.rl.init_seed + 1))


def _diagnostic_rows(train: DatasetArrays, count: int) -> np.ndarray:
    if count == 0 or len(train) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.linspace(0, len(train) - 1, num=min(count, len(train))).astype(np.int64))


def score_separation(controller: Network, train: DatasetArrays, rows: np.ndarray):
    """Mean controller score over clean and over corrupted samples (hidden flags, diagnostics only)."""
    if len(rows) == 0:
        return float("nan"), float("nan")
    scores = controller.predict(train.features[rows])
    corrupted = train.corrupted[rows]
    clean = float(scores[~corrupted].mean()) if (~corrupted).any() else float("nan")
    dirty = float(scores[corrupted].mean()) if corrupted.any() else float("nan")
    return clean, dirty


def train_controller(config: ExperimentConfig, env: SelectionEnvironment, strategy: Optional[RewardStrategy] = None,
                     output_dir: Optional[str] = None) -> TrainingResult:
    rl = config.rl
    silent = config.eval.silent
    strategy = strategy or env.strategy
    controller = build_controller(config)
    feature_dim = controller.spec.layers[CONTROLLER_EMBEDDING_LAYER - 1].width + 2

    agent, actor_optimizer, noise = None, None, None
    if rl.algorithm == "ddpg":
        agent_rng = np.random.default_rng(np.random.SeedSequence(rl.seed).spawn(5)[4])
        agent = DDPGAgent(controller, feature_dim, rl, env.train.features, rng=agent_rng)
        noise = OUNoiseState(np.zeros(env.batch_size), rl.ou_sigma, rl.ou_kappa)
    else:
        actor_optimizer = OptimizerState("adam", rl.actor_lr)

    tb_writer = None
    if output_dir and config.eval.tensorboard:
        tb_writer = SummaryWriter(logdir=os.path.join(output_dir, "tensorboard"))

    diagnostics = _diagnostic_rows(env.train, config.eval.diagnostic_samples)
    log_rows = []
    best = TrainingResult(controller, env.predictor, pd.DataFrame(columns=LOG_COLUMNS))
    best_smoothed = None
    smoothed = None
    early_stopping_counter = 0
    last_episode = None
    iterations = 0

    train_iterator = trange(rl.max_iterations, desc="Outer iteration", disable=silent, mininterval=0)
    for outer in train_iterator:
        episodes = []
        for _ in range(rl.episodes_per_update):
            if noise is not None:
                noise.reset(env.batch_size)
            episodes.append(run_episode(env, controller, noise, rl.steps_per_episode, strategy))
        last_episode = episodes[-1]

        if agent is not None:
            for episode in episodes:
                agent.remember(episode)
            critic_mse = agent.update()
            controller = agent.controller
        else:
            controller = reinforce_update(controller, episodes, env.train.features, actor_optimizer, rl.gamma,
                                          env.floor)
            critic_mse = float("nan")
        iterations += 1

        clean, dirty = score_separation(controller, env.train, diagnostics)
        for k, episode in enumerate(episodes):
            log_rows.append([
                outer,
                outer * rl.episodes_per_update + k,
                float(np.mean([t.reward_unclipped for t in episode])),
                float(np.mean([t.reward for t in episode])),
                critic_mse,
                clean,
                dirty,
            ])

        current = float(np.mean([t.reward_unclipped for e in episodes for t in e]))
        smoothed = current if smoothed is None else config.env.alpha_r * smoothed + (1 - config.env.alpha_r) * current
        train_iterator.set_description(f"Outer iteration (reward {current:.4f})")
        if tb_writer is not None:
            tb_writer.add_scalar("reward_unclipped", current, outer)
            tb_writer.add_scalar("reward_smoothed", smoothed, outer)
            tb_writer.add_scalar("critic_mse", critic_mse, outer)
            tb_writer.add_scalar("score_clean", clean, outer)
            tb_writer.add_scalar("score_corrupted", dirty, outer)

        if best.best_iteration < 0 or current > best.best_reward:
            best = TrainingResult(controller.copy(False), env.predictor.copy(False), best.log,
                                  best_iteration=outer, best_reward=current)

        if best_smoothed is None or smoothed - best_smoothed > rl.tol:
            best_smoothed = smoothed
            early_stopping_counter = 0
        elif early_stopping_counter < rl.patience:
            early_stopping_counter += 1
            logger.debug(" No improvement in smoothed reward")
            logger.debug(" Current step: %d", early_stopping_counter)
            logger.debug(" Early stopping patience: %d", rl.patience)
        if early_stopping_counter >= rl.patience:
            logger.info(" Patience of %d iterations reached", rl.patience)
            logger.info(" Training terminated.")
            train_iterator.close()
            break

    if tb_writer is not None:
        tb_writer.close()
    if output_dir and last_episode is not None:
        export_episode(last_episode, os.path.join(output_dir, "episode_trace.csv"))

    logger.info(" Controller training finished after %d iterations, best reward %s at iteration %d",
                iterations, best.best_reward, best.best_iteration)
    return TrainingResult(
        controller=best.controller,
        predictor=best.predictor,
        log=pd.DataFrame(log_rows, columns=LOG_COLUMNS),
        critic=agent.critic if agent is not None else None,
        best_iteration=best.best_iteration,
        best_reward=best.best_reward,
        iterations=iterations,
        final={"controller": controller, "predictor": env.predictor},
    )
