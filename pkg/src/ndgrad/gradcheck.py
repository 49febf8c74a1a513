import logging
from typing import Callable

import numpy as np

from ndgrad.tensor import Graph, Tensor, as_tensor

logger = logging.getLogger(__name__)


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5, tolerance: float = 1e-4) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    NaN anywhere counts as +inf.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    with Graph() as tape:
        y = fn(x)
    tape.backward(y)
    analytic = x.grad

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        shifted = base.copy().reshape(-1)
        shifted[i] += step
        upper = fn(Tensor(shifted.reshape(base.shape))).item()
        shifted[i] -= 2 * step
        lower = fn(Tensor(shifted.reshape(base.shape))).item()
        flat[i] = (upper - lower) / (2 * step)

    with np.errstate(invalid="ignore"):
        errors = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    if errors.size == 0:
        return 0.0
    if not np.all(np.isfinite(errors)):
        return float("inf")
    worst = float(errors.max())
    if worst > tolerance:
        logger.warning("gradient check failed: max relative error %.3e > %.1e", worst, tolerance)
    return worst
