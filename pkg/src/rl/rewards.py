"""Controller rewards computed from validation losses."""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from common.errors import ParameterRangeError, RewardError

logger = logging.getLogger(__name__)

REWARD_TAGS = ("fixed-avg", "weighted", "selective")


@dataclass(frozen=True)
class RewardStrategy:
    tag: str
    s_rej: float = 0.0
    keep: str = "highest"

    def __post_init__(self):
        if self.tag not in REWARD_TAGS:
            raise RewardError(f"unknown reward strategy {self.tag!r}")
        if not 0.0 <= self.s_rej < 1.0:
            raise RewardError(f"s_rej must lie in [0, 1), got {self.s_rej}")
        if self.keep not in ("highest", "lowest"):
            raise RewardError(f"keep must be highest or lowest, got {self.keep!r}")

    @property
    def requires_clean_validation(self) -> bool:
        return self.tag == "fixed-avg"


def compute_reward(strategy: RewardStrategy, losses, scores, ids=None) -> float:
    """Unclipped reward: the negated (weighted or selected) mean validation loss."""
    losses = np.asarray(losses, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    m = len(losses)
    if m == 0:
        raise RewardError("no validation losses to compute a reward from")
    if strategy.tag == "fixed-avg":
        return -float(np.mean(losses))

    if strategy.tag == "weighted":
        if scores.sum() <= 0:
            logger.warning("all validation scores are zero; weighted reward falls back to the plain average")
            return -float(np.mean(losses))
        return -float(np.sum(losses * scores) / m)

    kept = int(np.floor((1.0 - strategy.s_rej) * m + 1e-9))
    if kept == 0:
        raise RewardError(f"s_rej={strategy.s_rej} keeps no validation samples out of {m}")
    ids = np.arange(m) if ids is None else np.asarray(ids)
    key = -scores if strategy.keep == "highest" else scores
    order = np.lexsort((ids, key))
    return -float(np.mean(losses[order[:kept]]))


def clip_reward(reward: float, moving_average: Optional[float], alpha: float) -> Tuple[float, float]:
    """Subtract an exponential moving average; returns (clipped reward, new average).

    With no previous average the average starts at ``reward`` and the clipped
    reward is 0.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ParameterRangeError(f"alpha must lie in [0, 1], got {alpha}")
    if moving_average is None:
        return 0.0, float(reward)
    updated = alpha * moving_average + (1.0 - alpha) * reward
    return float(reward - updated), float(updated)
