from dataclasses import dataclass, field

import numpy as np

from common.errors import ParameterRangeError


@dataclass
class OUNoiseState:
    """Ornstein-Uhlenbeck process, one independent coordinate per sample."""

    x: np.ndarray = field(default_factory=lambda: np.zeros(1))
    sigma: float = 0.2
    kappa: float = 0.15
    mu: float = 0.0
    dt: float = 1.0

    def __post_init__(self):
        self.x = np.array(self.x, dtype=np.float64, ndmin=1)
        if self.sigma < 0:
            raise ParameterRangeError(f"sigma must be >= 0, got {self.sigma}")
        if not 0.0 <= self.kappa <= 1.0:
            raise ParameterRangeError(f"kappa must lie in [0, 1], got {self.kappa}")

    def reset(self, size=None):
        self.x = np.full(len(self.x) if size is None else size, self.mu, dtype=np.float64)


def ou_step(state: OUNoiseState, rng: np.random.Generator) -> np.ndarray:
    dx = state.kappa * (state.mu - state.x) * state.dt + state.sigma * np.sqrt(state.dt) * rng.standard_normal(state.x.shape)
    state.x = state.x + dx
    return state.x.copy()
