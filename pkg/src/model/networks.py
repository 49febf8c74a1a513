"""Network descriptions, initialisation and forward passes.

A network is a flat list of layer descriptors. Skip connections are expressed
with ``concat-skip`` layers that name an earlier layer index, which is enough
for the micro U-Net used for segmentation.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from common.errors import InvalidSpecError
from ndgrad import (
    ShapeMismatchError,
    Tensor,
    add,
    as_tensor,
    concat,
    conv2d,
    flatten,
    matmul,
    maxpool2,
    relu,
    reshape,
    sigmoid,
    upsample2,
)

logger = logging.getLogger(__name__)

LAYER_KINDS = ("dense", "conv3x3", "maxpool2", "upsample2", "relu", "sigmoid", "flatten", "concat-skip")
HEADS = ("class-logits", "pixel-logits", "unit-interval-scalar", "real-scalar")
PARAMETRIC = ("dense", "conv3x3")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int = 0
    source: int = -1


@dataclass(frozen=True)
class NetworkSpec:
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, ...]
    head: str

    def shapes(self) -> List[Tuple[int, ...]]:
        """Per-layer output shapes (without the batch axis); raises on any inconsistency."""
        if self.head not in HEADS:
            raise InvalidSpecError(f"unknown output head {self.head!r}")
        if not self.layers:
            raise InvalidSpecError("network has no layers")
        shapes = []
        current = tuple(self.input_shape)
        for index, layer in enumerate(self.layers):
            current = _layer_shape(index, layer, current, shapes)
            shapes.append(current)

        final = shapes[-1]
        if self.head == "class-logits" and len(final) != 1:
            raise InvalidSpecError(f"class-logits head needs a vector output, got {final}")
        if self.head == "pixel-logits" and final != (1,) + tuple(self.input_shape[1:]):
            raise InvalidSpecError(f"pixel-logits head needs 1 x H x W output, got {final}")
        if self.head in ("unit-interval-scalar", "real-scalar") and final != (1,):
            raise InvalidSpecError(f"{self.head} head needs a single output unit, got {final}")
        if self.head == "unit-interval-scalar" and self.layers[-1].kind != "sigmoid":
            raise InvalidSpecError("unit-interval-scalar head must end in a sigmoid")
        return shapes

    def validate(self) -> "NetworkSpec":
        self.shapes()
        return self


def _layer_shape(index, layer, current, previous):
    kind = layer.kind
    if kind not in LAYER_KINDS:
        raise InvalidSpecError(f"layer{index}: unknown kind {kind!r}")
    if kind in PARAMETRIC and layer.width < 1:
        raise InvalidSpecError(f"layer{index}: {kind} needs a positive width")
    if kind == "dense":
        if len(current) != 1:
            raise InvalidSpecError(f"layer{index}: dense needs a flat input, got {current}")
        return (layer.width,)
    if kind in ("relu", "sigmoid"):
        return current
    if kind == "flatten":
        return (int(np.prod(current)),)
    if len(current) != 3:
        raise InvalidSpecError(f"layer{index}: {kind} needs a C x H x W input, got {current}")
    c, h, w = current
    if kind == "conv3x3":
        return (layer.width, h, w)
    if kind == "maxpool2":
        if h % 2 or w % 2:
            raise InvalidSpecError(f"layer{index}: maxpool2 needs even spatial size, got {current}")
        return (c, h // 2, w // 2)
    if kind == "upsample2":
        return (c, 2 * h, 2 * w)
    # concat-skip
    if not 0 <= layer.source < index:
        raise InvalidSpecError(f"layer{index}: skip source {layer.source} must be an earlier layer")
    skipped = previous[layer.source]
    if len(skipped) != 3 or skipped[1:] != (h, w):
        raise InvalidSpecError(f"layer{index}: cannot concat {skipped} onto {current}")
    return (c + skipped[0], h, w)


class ParameterSet(dict):
    """Ordered map ``layer{index}.{weight|bias}`` -> Tensor."""

    def copy(self, requires_grad: Optional[bool] = None) -> "ParameterSet":
        return ParameterSet(
            (name, Tensor(t.data, requires_grad=t.requires_grad if requires_grad is None else requires_grad))
            for name, t in self.items()
        )

    def detached(self) -> "ParameterSet":
        return ParameterSet((name, t.detach()) for name, t in self.items())

    def tracked(self) -> "ParameterSet":
        return ParameterSet((name, Tensor(t.data, requires_grad=True, copy=False)) for name, t in self.items())

    def zero_grad(self):
        for t in self.values():
            t.zero_grad()

    def grads(self) -> Dict[str, np.ndarray]:
        return {name: t.grad for name, t in self.items() if t.grad is not None}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.items()}

    def count(self) -> int:
        return int(sum(t.data.size for t in self.values()))

    def equals(self, other: "ParameterSet") -> bool:
        return self.keys() == other.keys() and all(np.array_equal(self[k].data, other[k].data) for k in self)


def init_network(spec: NetworkSpec, seed: int) -> ParameterSet:
    """He-uniform for layers followed by relu, Xavier-uniform otherwise, zero biases."""
    shapes = spec.shapes()
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    for index, layer in enumerate(spec.layers):
        if layer.kind not in PARAMETRIC:
            continue
        incoming = tuple(spec.input_shape) if index == 0 else shapes[index - 1]
        if layer.kind == "dense":
            fan_in, fan_out = incoming[0], layer.width
            shape = (fan_in, layer.width)
        else:
            fan_in, fan_out = incoming[0] * 9, layer.width * 9
            shape = (layer.width, incoming[0], 3, 3)
        followed_by_relu = index + 1 < len(spec.layers) and spec.layers[index + 1].kind == "relu"
        bound = np.sqrt(6.0 / fan_in) if followed_by_relu else np.sqrt(6.0 / (fan_in + fan_out))
        params[f"layer{index}.weight"] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        params[f"layer{index}.bias"] = Tensor(np.zeros(layer.width), requires_grad=True)
    return params


def forward(spec: NetworkSpec, params: ParameterSet, x, capture: Optional[int] = None):
    """Run the network on a batch (a single unbatched sample is also accepted).

    Returns the head output; with ``capture`` set, returns ``(output, activation)``
    where activation is the output of layer ``capture``.
    """
    x = as_tensor(x)
    expected = tuple(spec.input_shape)
    if x.shape == expected:
        x = reshape(x, (1,) + expected)
    if x.shape[1:] != expected:
        raise ShapeMismatchError(f"network expects input {expected}, got {x.shape}")

    outputs = []
    h = x
    for index, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind == "dense":
            h = add(matmul(h, params[f"layer{index}.weight"]), params[f"layer{index}.bias"])
        elif kind == "conv3x3":
            bias = reshape(params[f"layer{index}.bias"], (layer.width, 1, 1))
            h = add(conv2d(h, params[f"layer{index}.weight"]), bias)
        elif kind == "relu":
            h = relu(h)
        elif kind == "sigmoid":
            h = sigmoid(h)
        elif kind == "maxpool2":
            h = maxpool2(h)
        elif kind == "upsample2":
            h = upsample2(h)
        elif kind == "flatten":
            h = flatten(h)
        else:
            h = concat([h, outputs[layer.source]], axis=1)
        outputs.append(h)

    out = reshape(h, (h.shape[0],)) if spec.head == "unit-interval-scalar" else h
    if capture is not None:
        return out, outputs[capture]
    return out


@dataclass
class Network:
    spec: NetworkSpec
    params: ParameterSet

    def __call__(self, x, capture: Optional[int] = None):
        return forward(self.spec, self.params, x, capture=capture)

    def predict(self, x: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Untracked forward in chunks; returns a numpy array."""
        frozen = self.params.detached()
        parts = [forward(self.spec, frozen, x[i:i + chunk]).data for i in range(0, len(x), chunk)]
        return np.concatenate(parts, axis=0) if parts else np.zeros((0,))

    def embed(self, x: np.ndarray, layer: int, chunk: int = 256):
        """Untracked forward returning (output, flattened activation of ``layer``)."""
        frozen = self.params.detached()
        outs, feats = [], []
        for i in range(0, len(x), chunk):
            out, act = forward(self.spec, frozen, x[i:i + chunk], capture=layer)
            outs.append(out.data)
            feats.append(act.data.reshape(len(act.data), -1))
        return np.concatenate(outs, axis=0), np.concatenate(feats, axis=0)

    def copy(self, requires_grad: Optional[bool] = None) -> "Network":
        return Network(self.spec, self.params.copy(requires_grad))


def _conv_block(channels):
    return [LayerSpec("conv3x3", channels), LayerSpec("relu")]


def classification_predictor(image_size: int = 16, classes: int = 2, channels: int = 8, hidden: int = 32) -> NetworkSpec:
    layers = (
        _conv_block(channels) + _conv_block(channels)
        + [LayerSpec("maxpool2"), LayerSpec("flatten"), LayerSpec("dense", hidden), LayerSpec("relu"),
           LayerSpec("dense", classes)]
    )
    return NetworkSpec(tuple(layers), (1, image_size, image_size), "class-logits").validate()


def segmentation_predictor(image_size: int = 16, channels: Tuple[int, int] = (8, 16)) -> NetworkSpec:
    """Micro U-Net: two pooling steps down, two upsampling steps up, skip concatenations."""
    narrow, wide = channels
    layers = (
        _conv_block(narrow)                                     # 0-1, full resolution
        + [LayerSpec("maxpool2")] + _conv_block(wide)           # 2-4, half
        + [LayerSpec("maxpool2")] + _conv_block(wide)           # 5-7, quarter
        + [LayerSpec("upsample2"), LayerSpec("concat-skip", source=4)] + _conv_block(wide)    # 8-11
        + [LayerSpec("upsample2"), LayerSpec("concat-skip", source=1)] + _conv_block(narrow)  # 12-15
        + [LayerSpec("conv3x3", 1)]                             # 16
    )
    return NetworkSpec(tuple(layers), (1, image_size, image_size), "pixel-logits").validate()


def controller_network(image_size: int = 16, channels: int = 8, hidden: int = 16) -> NetworkSpec:
    layers = (
        _conv_block(channels) + _conv_block(channels)
        + [LayerSpec("maxpool2"), LayerSpec("flatten"), LayerSpec("dense", hidden), LayerSpec("relu"),
           LayerSpec("dense", 1), LayerSpec("sigmoid")]
    )
    return NetworkSpec(tuple(layers), (1, image_size, image_size), "unit-interval-scalar").validate()


# output of the relu after the controller's hidden dense layer
CONTROLLER_EMBEDDING_LAYER = 7


def critic_network(feature_dim: int, hidden: int = 32) -> NetworkSpec:
    """Per-sample critic over [state features | action]."""
    layers = (
        LayerSpec("dense", hidden), LayerSpec("relu"),
        LayerSpec("dense", hidden), LayerSpec("relu"),
        LayerSpec("dense", 1),
    )
    return NetworkSpec(layers, (feature_dim + 1,), "real-scalar").validate()


def build_predictor_spec(task: str, image_size: int) -> NetworkSpec:
    if task == "classification":
        return classification_predictor(image_size)
    if task == "segmentation":
        return segmentation_predictor(image_size)
    raise InvalidSpecError(f"unknown task {task!r}")
