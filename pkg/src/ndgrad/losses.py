"""Scalar training losses.

The cross-entropies are primitive ops with fused, numerically stable
gradients; soft-dice and mse are composed from elementwise ops.
"""
import numpy as np
from scipy.special import expit, log_softmax, softmax

from ndgrad.errors import NdgradError, ShapeMismatchError
from ndgrad.tensor import Tensor, _emit, add, as_tensor, div, mul, reduce, sub

LOSS_KINDS = (
    "binary-cross-entropy-with-logits",
    "softmax-cross-entropy",
    "pixelwise-bce-with-logits",
    "soft-dice",
    "mse",
)

DICE_EPS = 1e-6


def losses(kind: str, prediction, target) -> Tensor:
    prediction, target = as_tensor(prediction), as_tensor(target)
    if kind == "softmax-cross-entropy":
        return _softmax_cross_entropy(prediction, target)
    if prediction.shape != target.shape:
        raise ShapeMismatchError(f"{kind}: prediction {prediction.shape} vs target {target.shape}")
    if kind == "binary-cross-entropy-with-logits":
        return _bce_with_logits(prediction, target, kind)
    if kind == "pixelwise-bce-with-logits":
        if prediction.ndim != 4:
            raise ShapeMismatchError(f"pixelwise loss expects B x 1 x H x W, got {prediction.shape}")
        return _bce_with_logits(prediction, target, kind)
    if kind == "soft-dice":
        overlap = reduce("sum", mul(prediction, target))
        total = add(reduce("sum", prediction), reduce("sum", target))
        return sub(1.0, div(add(mul(2.0, overlap), DICE_EPS), add(total, DICE_EPS)))
    if kind == "mse":
        diff = sub(prediction, target)
        return reduce("mean", mul(diff, diff))
    raise NdgradError(f"unknown loss {kind!r}")


def _bce_with_logits(logits: Tensor, target: Tensor, kind: str) -> Tensor:
    z, t = logits.data, target.data
    n = z.size
    value = np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z))))

    def vjp(g):
        return (g * (expit(z) - t) / n, None)

    return _emit(kind, (logits, target), np.asarray(value), vjp)


def _softmax_cross_entropy(logits: Tensor, target: Tensor) -> Tensor:
    z = logits.data if logits.ndim == 2 else logits.data.reshape(1, -1)
    labels = target.data.reshape(-1).astype(np.int64)
    if z.shape[0] != labels.shape[0]:
        raise ShapeMismatchError(f"softmax-cross-entropy: {z.shape[0]} rows vs {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ShapeMismatchError(f"class label outside [0, {z.shape[1]})")
    rows = np.arange(z.shape[0])
    value = -np.mean(log_softmax(z, axis=1)[rows, labels])
    shape = logits.shape

    def vjp(g):
        grad = softmax(z, axis=1)
        grad[rows, labels] -= 1.0
        return ((g * grad / z.shape[0]).reshape(shape), None)

    return _emit("softmax-cross-entropy", (logits, target), np.asarray(value), vjp)


def per_sample_task_loss(task: str, output: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Untracked per-sample training loss, used as a state feature."""
    if task == "classification":
        labels = target.astype(np.int64)
        return -log_softmax(output, axis=1)[np.arange(len(labels)), labels]
    z = output.reshape(len(output), -1)
    t = target.reshape(len(target), -1)
    return np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z))), axis=1)
