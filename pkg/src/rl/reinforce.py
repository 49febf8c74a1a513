import logging
from typing import List, Sequence

import numpy as np

from common.errors import EmptyInputError
from model.networks import Network
from model.optim import OptimizerState, optimizer_step
from ndgrad import Graph, Tensor, add, log, mul, neg, reduce, sub
from rl.environment import TransitionRecord

logger = logging.getLogger(__name__)

# keeps log(p) and log(1 - p) finite when the sigmoid saturates
PROBABILITY_MARGIN = 1e-7


def row_log_likelihood(scores: Tensor, actions, floor: float = 0.0) -> Tensor:
    """a * log p + (1 - a) * log(1 - p) per sample.

    ``p = max(score, floor)`` is the probability the action was drawn with,
    squeezed into (0, 1). Samples held at the floor carry no gradient.
    """
    a = Tensor(np.asarray(actions, dtype=np.float64))
    above = (scores.data > floor).astype(np.float64)
    effective = add(mul(scores, above), floor * (1.0 - above))
    p = add(mul(effective, 1.0 - 2.0 * PROBABILITY_MARGIN), PROBABILITY_MARGIN)
    return add(mul(a, log(p)), mul(sub(1.0, a), log(sub(1.0, p))))


def log_likelihood(scores: Tensor, actions, floor: float = 0.0) -> Tensor:
    """Bernoulli log-probability of a whole action vector."""
    return reduce("sum", row_log_likelihood(scores, actions, floor))


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    returns = np.zeros(len(rewards))
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        returns[t] = running
    return returns


def reinforce_update(controller: Network, episodes: List[List[TransitionRecord]], inputs_source: np.ndarray,
                     optimizer: OptimizerState, gamma: float, floor: float = 0.0) -> Network:
    """One step on -sum_t G_t log pi(a_t | s_t), averaged over episodes.

    ``floor`` must match the sampling floor the actions were drawn with.
    """
    if not episodes or not any(episodes):
        raise EmptyInputError("REINFORCE update needs at least one transition")
    rows, actions, weights = [], [], []
    for episode in episodes:
        returns = discounted_returns([t.reward for t in episode], gamma)
        for record, g in zip(episode, returns):
            rows.append(record.rows)
            actions.append(record.actions)
            weights.append(np.full(len(record.rows), g))
    rows = np.concatenate(rows)

    params = controller.params.tracked()
    with Graph() as tape:
        scores = Network(controller.spec, params)(inputs_source[rows])
        weighted = mul(Tensor(np.concatenate(weights)), row_log_likelihood(scores, np.concatenate(actions), floor))
        loss = neg(mul(reduce("sum", weighted), 1.0 / len(episodes)))
    tape.backward(loss)
    return Network(controller.spec, optimizer_step(optimizer, params))
