"""Dense numpy kernels every layer is built from.

Activations are channels-first (C, H, W) or batched (N, C, H, W), row-major.
Convolution weights are (O, I, kh, kw). Convolution is cross-correlation and
there is no broadcasting: operands of element-wise maps must have equal shapes.
"""

import logging
import math
from typing import Sequence

import numpy as np

from app.backend.core.errors import NonFinite, NonIntegralOutput, ShapeMismatch, ShapeOverflow

logger = logging.getLogger(__name__)

PRECISIONS = {"single": np.float32, "double": np.float64}

_INT64_MAX = int(np.iinfo(np.int64).max)


def element_count(dims: Sequence[int]) -> int:
    """Product of extents, every extent >= 1, overflow-checked against int64."""
    count = 1
    for d in dims:
        d = int(d)
        if d < 1:
            raise ShapeMismatch(f"extents must be >= 1, got {tuple(dims)}")
        count *= d
        if count > _INT64_MAX:
            raise ShapeOverflow(f"element count of {tuple(dims)} overflows int64")
    return count


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFinite(where)
    return x


def _require_same_shape(*arrays: np.ndarray) -> None:
    first = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != first:
            raise ShapeMismatch(f"shapes differ: {first} vs {a.shape}")


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[np.newaxis], True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatch(f"expected CHW or NCHW activations, got rank {x.ndim}")


# --- matmul ---

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


# --- convolution ---

def conv_output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0:
        raise ShapeMismatch(f"kernel {kernel} larger than padded extent {size + 2 * pad}")
    if span % stride:
        raise NonIntegralOutput(
            f"extent {size} with kernel {kernel}, stride {stride}, pad {pad} does not tile"
        )
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """(N, C, H, W) -> (N*oh*ow, C*kh*kw), column order (C, kh, kw) to match OIHW weights."""
    n, c, h, w = x.shape
    oh = conv_output_extent(h, kh, stride, pad)
    ow = conv_output_extent(w, kw, stride, pad)

    img = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)], mode="constant") if pad else x
    col = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for y in range(kh):
        y_max = y + stride * oh
        for xx in range(kw):
            x_max = xx + stride * ow
            col[:, :, y, xx, :, :] = img[:, :, y:y_max:stride, xx:x_max:stride]

    # (N, C, kh, kw, oh, ow) -> (N, oh, ow, C, kh, kw) -> (N*oh*ow, C*kh*kw)
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, -1)


def col2im(
    col: np.ndarray,
    input_shape: tuple[int, int, int, int],
    kh: int,
    kw: int,
    stride: int = 1,
    pad: int = 0,
) -> np.ndarray:
    """Adjoint of im2col: overlapping patches accumulate."""
    n, c, h, w = input_shape
    oh = conv_output_extent(h, kh, stride, pad)
    ow = conv_output_extent(w, kw, stride, pad)

    col = col.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    for y in range(kh):
        y_max = y + stride * oh
        for xx in range(kw):
            x_max = xx + stride * ow
            img[:, :, y:y_max:stride, xx:x_max:stride] += col[:, :, y, xx, :, :]
    return img[:, :, pad:pad + h, pad:pad + w]


def conv2d_forward(
    x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Batched convolution; returns the NCHW output and the im2col matrix for backward."""
    if weights.ndim != 4:
        raise ShapeMismatch(f"weights must be OIHW, got {weights.shape}")
    o, i, kh, kw = weights.shape
    if x.ndim != 4 or x.shape[1] != i:
        raise ShapeMismatch(f"input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (o,):
        raise ShapeMismatch(f"bias {bias.shape} does not match {o} output channels")
    if stride < 1 or pad < 0:
        raise ShapeMismatch(f"stride must be >= 1 and pad >= 0, got {stride}, {pad}")

    n, _, h, w = x.shape
    oh = conv_output_extent(h, kh, stride, pad)
    ow = conv_output_extent(w, kw, stride, pad)

    col = im2col(x, kh, kw, stride, pad)
    out = matmul(col, weights.reshape(o, -1).T) + bias
    return out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2), col


def conv2d(
    x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0
) -> np.ndarray:
    batch, single = _as_batch(x)
    out, _ = conv2d_forward(batch, weights, bias, stride, pad)
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def conv2d_backward(
    dout: np.ndarray,
    col: np.ndarray,
    input_shape: tuple[int, int, int, int],
    weights: np.ndarray,
    stride: int = 1,
    pad: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dweights, dbias) for a batched conv2d_forward."""
    o, i, kh, kw = weights.shape
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, o)

    dbias = dflat.sum(axis=0)
    dweights = matmul(col.T, dflat).T.reshape(o, i, kh, kw)
    dcol = matmul(dflat, weights.reshape(o, -1))
    dx = col2im(dcol, input_shape, kh, kw, stride, pad)
    return dx, dweights, dbias


# --- pooling ---

def pool_output_extent(size: int, kernel: int, stride: int) -> int:
    """Overhanging final windows are truncated, so the extent is ceil((size-k)/s)+1.

    A last window that would start past the input is dropped.
    """
    if kernel < 1 or stride < 1:
        raise ShapeMismatch(f"pool kernel and stride must be >= 1, got {kernel}, {stride}")
    if size < kernel:
        raise ShapeMismatch(f"pool kernel {kernel} larger than extent {size}")
    out = math.ceil((size - kernel) / stride) + 1
    if (out - 1) * stride >= size:
        out -= 1
    return out


def maxpool2d(x: np.ndarray, kernel: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-window maximum plus the flat (H*W) index of the winner.

    Ties resolve to the lowest linear index: argmax scans each window row-major.
    """
    batch, single = _as_batch(x)
    n, c, h, w = batch.shape
    oh = pool_output_extent(h, kernel, stride)
    ow = pool_output_extent(w, kernel, stride)

    full_h = (oh - 1) * stride + kernel
    full_w = (ow - 1) * stride + kernel
    padded = np.full((n, c, max(full_h, h), max(full_w, w)), -np.inf, dtype=batch.dtype)
    padded[:, :, :h, :w] = batch

    windows = np.empty((n, c, kernel, kernel, oh, ow), dtype=batch.dtype)
    for y in range(kernel):
        for xx in range(kernel):
            windows[:, :, y, xx] = padded[:, :, y:y + stride * oh:stride, xx:xx + stride * ow:stride]
    windows = windows.reshape(n, c, kernel * kernel, oh, ow)

    best = windows.argmax(axis=2)
    out = np.take_along_axis(windows, best[:, :, np.newaxis], axis=2)[:, :, 0]

    rows = np.arange(oh)[:, np.newaxis] * stride + best // kernel
    cols = np.arange(ow)[np.newaxis, :] * stride + best % kernel
    argmax = (rows * w + cols).astype(np.int64)

    if single:
        return out[0], argmax[0]
    return out, argmax


def maxpool2d_backward(
    dout: np.ndarray, argmax: np.ndarray, input_shape: tuple[int, ...]
) -> np.ndarray:
    """Scatter each window's upstream gradient onto its recorded argmax."""
    batch_shape = input_shape if len(input_shape) == 4 else (1, *input_shape)
    n, c, h, w = batch_shape
    planes = n * c
    flat = np.zeros(planes * h * w, dtype=dout.dtype)
    offsets = np.arange(planes, dtype=np.int64)[:, np.newaxis] * (h * w)
    targets = (offsets + argmax.reshape(planes, -1)).ravel()
    # np.add.at accumulates sequentially, so overlapping windows sum in index order
    np.add.at(flat, targets, dout.reshape(-1))
    return flat.reshape(input_shape)


# --- element-wise ---

def ewise(op: str, *operands):
    """Element-wise relu/mul/add/scale/pow with no broadcasting.

    scale and pow take a trailing scalar: ewise("scale", x, 2.0), ewise("pow", x, 1/3).
    """
    if op == "relu":
        (x,) = operands
        return np.maximum(x, 0).astype(x.dtype, copy=False)
    if op in ("mul", "add"):
        if len(operands) < 2:
            raise ShapeMismatch(f"{op} needs at least two operands")
        _require_same_shape(*operands)
        out = operands[0].copy()
        for other in operands[1:]:
            out = out * other if op == "mul" else out + other
        return out
    if op == "scale":
        x, alpha = operands
        return x * x.dtype.type(alpha)
    if op == "pow":
        x, exponent = operands
        return np.power(x, x.dtype.type(exponent))
    raise ValueError(f"unknown element-wise op {op!r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
