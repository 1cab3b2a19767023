"""Trainable layers with hand-written forward/backward passes.

Every layer works on a batch (N, C, H, W). ``forward`` returns the output and a
cache; ``backward`` takes the upstream gradient and that cache and returns the
input gradient plus a dict of parameter gradients keyed by local names.
"""

import logging
import math
from typing import Any, Optional

import numpy as np

from app.backend.core.arch import LayerKind, LayerSpec, Shape
from app.backend.core.errors import ShapeMismatch
from app.backend.core.tensor import (
    conv2d_backward,
    conv2d_forward,
    log_softmax,
    matmul,
    maxpool2d,
    maxpool2d_backward,
    softmax,
)

logger = logging.getLogger(__name__)

INIT_SCHEME = "glorot-uniform, zero bias"


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base class: parameter-free pass-through."""

    kind: LayerKind

    def __init__(self, spec: LayerSpec, in_shape: Shape, out_shape: Shape):
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = out_shape
        self.params: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool, rng: Optional[np.random.Generator]) -> tuple[np.ndarray, Any]:
        return x, None

    def backward(self, dout: np.ndarray, cache: Any) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        return dout, {}

    def weight_count(self) -> int:
        return sum(p.size for name, p in self.params.items() if not name.endswith("bias"))

    def bias_count(self) -> int:
        return sum(p.size for name, p in self.params.items() if name.endswith("bias"))


class Conv2D(Layer):
    kind = LayerKind.CONV

    def __init__(self, spec: LayerSpec, in_shape: Shape, out_shape: Shape, rng: np.random.Generator, dtype):
        super().__init__(spec, in_shape, out_shape)
        c, k, o = in_shape[0], spec.kernel, spec.filters
        self.params = {
            "weight": glorot_uniform(rng, (o, c, k, k), c * k * k, o * k * k, dtype),
            "bias": np.zeros(o, dtype=dtype),
        }

    def forward(self, x, train, rng):
        out, col = conv2d_forward(x, self.params["weight"], self.params["bias"], self.spec.stride, self.spec.pad)
        mask = None
        if self.spec.relu:
            mask = out > 0
            out = out * mask
        return out, (x.shape, col, mask)

    def backward(self, dout, cache):
        x_shape, col, mask = cache
        if mask is not None:
            dout = dout * mask
        dx, dw, db = conv2d_backward(dout, col, x_shape, self.params["weight"], self.spec.stride, self.spec.pad)
        return dx, {"weight": dw, "bias": db}


class FullyConnected(Layer):
    kind = LayerKind.FC

    def __init__(self, spec: LayerSpec, in_shape: Shape, out_shape: Shape, rng: np.random.Generator, dtype):
        super().__init__(spec, in_shape, out_shape)
        fan_in = in_shape[0] * in_shape[1] * in_shape[2]
        self.params = {
            "weight": glorot_uniform(rng, (fan_in, spec.filters), fan_in, spec.filters, dtype),
            "bias": np.zeros(spec.filters, dtype=dtype),
        }

    def forward(self, x, train, rng):
        flat = x.reshape(x.shape[0], -1)
        out = matmul(flat, self.params["weight"]) + self.params["bias"]
        mask = None
        if self.spec.relu:
            mask = out > 0
            out = out * mask
        return out.reshape(x.shape[0], -1, 1, 1), (x.shape, flat, mask)

    def backward(self, dout, cache):
        x_shape, flat, mask = cache
        d = dout.reshape(dout.shape[0], -1)
        if mask is not None:
            d = d * mask
        dw = matmul(flat.T, d)
        db = d.sum(axis=0)
        dx = matmul(d, self.params["weight"].T).reshape(x_shape)
        return dx, {"weight": dw, "bias": db}


class MaxPool2D(Layer):
    kind = LayerKind.MAXPOOL

    def forward(self, x, train, rng):
        out, argmax = maxpool2d(x, self.spec.kernel, self.spec.stride)
        return out, (x.shape, argmax)

    def backward(self, dout, cache):
        x_shape, argmax = cache
        return maxpool2d_backward(dout, argmax, x_shape), {}


class ReLU(Layer):
    kind = LayerKind.RELU

    def forward(self, x, train, rng):
        mask = x > 0   # subgradient at exactly 0 is 0
        return x * mask, mask

    def backward(self, dout, cache):
        return dout * cache, {}


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1-r) at train time, eval is identity."""

    kind = LayerKind.DROPOUT

    def forward(self, x, train, rng):
        ratio = self.spec.drop_ratio
        if not train or ratio == 0.0:
            return x, None
        if rng is None:
            raise ValueError("train-mode dropout needs a random generator")
        keep = rng.random(x.shape) >= ratio
        mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - ratio))
        return x * mask, mask

    def backward(self, dout, cache):
        if cache is None:
            return dout, {}
        return dout * cache, {}


class SoftmaxLoss(Layer):
    """Marks the end of the network; the loss itself is softmax_cross_entropy."""

    kind = LayerKind.LOSS


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray, weight: float = 1.0
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy over the batch.

    Returns (loss, probabilities, dlogits) with dlogits = weight * (softmax - onehot) / N.
    """
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels {labels.shape} do not match batch of {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeMismatch(f"labels outside [0, {k})")

    logp = log_softmax(logits)
    loss = -float(logp[np.arange(n), labels].mean())
    probs = softmax(logits)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1
    dlogits *= logits.dtype.type(weight / n)
    return loss, probs, dlogits


def build_layer(spec: LayerSpec, in_shape: Shape, out_shape: Shape, rng: np.random.Generator, dtype) -> Layer:
    if spec.kind is LayerKind.CONV:
        return Conv2D(spec, in_shape, out_shape, rng, dtype)
    if spec.kind is LayerKind.FC:
        return FullyConnected(spec, in_shape, out_shape, rng, dtype)
    if spec.kind is LayerKind.MAXPOOL:
        return MaxPool2D(spec, in_shape, out_shape)
    if spec.kind is LayerKind.RELU:
        return ReLU(spec, in_shape, out_shape)
    if spec.kind is LayerKind.DROPOUT:
        return Dropout(spec, in_shape, out_shape)
    if spec.kind is LayerKind.LOSS:
        return SoftmaxLoss(spec, in_shape, out_shape)
    if spec.kind is LayerKind.DCL:
        # imported here: dcl builds on this module's Layer base class
        from app.backend.core.dcl import DclBlock
        return DclBlock(spec, in_shape, out_shape, rng, dtype)
    raise ValueError(f"no layer implementation for {spec.kind}")
