import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from common.errors import MissingGradientError, ParameterMismatchError, ParameterRangeError
from model.networks import ParameterSet
from ndgrad import Tensor

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: Optional[float] = None
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ParameterRangeError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ParameterRangeError(f"learning rate must be >= 0, got {self.lr}")


def optimizer_step(state: OptimizerState, params: ParameterSet, grads: Optional[Dict[str, np.ndarray]] = None) -> ParameterSet:
    """Apply one update and return fresh tracked parameters.

    ``grads`` defaults to the gradient buffers accumulated on ``params``.
    Adam moments live on ``state`` and are advanced in place.
    """
    if grads is None:
        grads = params.grads()
    missing = [name for name in params if name not in grads]
    if missing:
        raise MissingGradientError(f"no gradient for {', '.join(missing)}")

    grads = {name: np.asarray(grads[name], dtype=np.float64) for name in params}
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ParameterMismatchError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")

    if state.max_grad_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > state.max_grad_norm:
            grads = {name: g * (state.max_grad_norm / norm) for name, g in grads.items()}

    state.step += 1
    updated = ParameterSet()
    for name, p in params.items():
        g = grads[name]
        if state.kind == "sgd":
            value = p.data - state.lr * g
        else:
            m = state.beta1 * state.m.get(name, np.zeros_like(g)) + (1 - state.beta1) * g
            v = state.beta2 * state.v.get(name, np.zeros_like(g)) + (1 - state.beta2) * g * g
            state.m[name], state.v[name] = m, v
            m_hat = m / (1 - state.beta1 ** state.step)
            v_hat = v / (1 - state.beta2 ** state.step)
            value = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        updated[name] = Tensor(value, requires_grad=True, copy=False)
    return updated


def soft_update(target: ParameterSet, online: ParameterSet, tau: float) -> ParameterSet:
    """target <- tau * online + (1 - tau) * target, tensor by tensor."""
    if not 0.0 <= tau <= 1.0:
        raise ParameterRangeError(f"tau must lie in [0, 1], got {tau}")
    if target.keys() != online.keys():
        raise ParameterMismatchError("target and online parameter names differ")
    updated = ParameterSet()
    for name, t in target.items():
        o = online[name]
        if o.shape != t.shape:
            raise ParameterMismatchError(f"{name}: online {o.shape} vs target {t.shape}")
        updated[name] = Tensor(tau * o.data + (1.0 - tau) * t.data, copy=False)
    return updated
