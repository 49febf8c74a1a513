import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ndgrad.errors import NdgradError, ShapeMismatchError
from ndgrad.tensor import Tensor, _emit, as_tensor


def _windows(x: np.ndarray) -> np.ndarray:
    # B,C,H,W -> B,C,H-2,W-2,3,3
    return sliding_window_view(x, (3, 3), axis=(2, 3))


def conv2d(x, k, stride: int = 1, pad: int = 1) -> Tensor:
    """3x3 cross-correlation of a B x C x H x W batch with F x C x 3 x 3 kernels."""
    x, k = as_tensor(x), as_tensor(k)
    if stride != 1:
        raise NdgradError("only stride 1 is supported")
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects 4-d input and kernel, got {x.shape} and {k.shape}")
    if k.shape[2:] != (3, 3):
        raise ShapeMismatchError(f"kernel must be 3x3, got {k.shape[2:]}")
    if x.shape[1] != k.shape[1]:
        raise ShapeMismatchError(f"input has {x.shape[1]} channels, kernel expects {k.shape[1]}")
    if x.shape[2] + 2 * pad < 3 or x.shape[3] + 2 * pad < 3:
        raise ShapeMismatchError(f"input {x.shape} too small for a 3x3 kernel with pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _windows(xp)
    kernel = k.data
    out = np.tensordot(cols, kernel, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def vjp(g):
        dk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        g_cols = _windows(np.pad(g, ((0, 0), (0, 0), (2, 2), (2, 2))))
        flipped = kernel[:, :, ::-1, ::-1]
        dxp = np.tensordot(g_cols, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        if pad:
            dxp = dxp[:, :, pad:-pad, pad:-pad]
        return np.ascontiguousarray(dxp), dk

    return _emit("conv2d", (x, k), np.ascontiguousarray(out), vjp, pad=pad)


def maxpool2(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeMismatchError(f"maxpool2 needs B x C x H x W with even H, W; got {x.shape}")
    b, c, h, w = x.shape
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2)
    out = blocks.max(axis=(3, 5))

    def vjp(g):
        mask = blocks == out[:, :, :, None, :, None]
        ties = mask.sum(axis=(3, 5), keepdims=True)
        return ((mask / ties * g[:, :, :, None, :, None]).reshape(b, c, h, w),)

    return _emit("maxpool2", (x,), out, vjp)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatchError(f"upsample2 needs a 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _emit("upsample2", (x,), out, vjp)
