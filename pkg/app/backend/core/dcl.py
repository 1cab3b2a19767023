"""Deep Collaborative Learning block.

T small convolutional branches y(t) = relu(conv_t(x)) share one output grid.
Per position each branch is projected to K2 channels, v(t) = relu(W(t)^T y(t) + b(t)),
and the projections are fused by element-wise product and T-th root:

    z = (prod_t v(t) + eps) ** (1 / T),   eps = 10^-T

With the stochastic strategy a single random pair of branches is active per
training iteration (fused with T' = 2, eps = 10^-2) and evaluation averages z
over all C(T, 2) pairs.
"""

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from app.backend.core.arch import LayerKind, LayerSpec, Shape
from app.backend.core.config import get_settings
from app.backend.core.errors import NegativeInput, PreconditionViolated, ShapeMismatch
from app.backend.core.layers import Layer, glorot_uniform
from app.backend.core.schemas import DclConfig, Strategy, decimal_epsilon
from app.backend.core.tensor import conv2d_backward, conv2d_forward, conv_output_extent

logger = logging.getLogger(__name__)

PAIR_EPSILON = decimal_epsilon(2)


# --- fusion ---

def _stack(v: Sequence[np.ndarray]) -> np.ndarray:
    if len(v) < 1:
        raise ShapeMismatch("fusion needs at least one branch")
    first = np.shape(v[0])
    for other in v[1:]:
        if np.shape(other) != first:
            raise ShapeMismatch(f"branch responses differ in shape: {first} vs {np.shape(other)}")
    stacked = np.stack([np.asarray(a) for a in v])
    if np.any(stacked < 0):
        raise NegativeInput("fusion inputs must be ReLU outputs (>= 0)")
    return stacked


def fuse(v: Sequence[np.ndarray], epsilon: float) -> np.ndarray:
    """z = (prod_t v[t] + epsilon) ** (1/T)."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    stacked = _stack(v)
    T = stacked.shape[0]
    product = np.prod(stacked, axis=0)
    return np.power(product + epsilon, 1.0 / T).astype(stacked.dtype, copy=False)


def fuse_backward(v: Sequence[np.ndarray], epsilon: float, dz: np.ndarray) -> list[np.ndarray]:
    """Gradient of fuse w.r.t. every v[t].

    dz/dv[t] = (1/T) (P + eps)^((1-T)/T) prod_{s != t} v[s]; the exclusive
    products come from prefix/suffix cumulative products, never from P / v[t].
    """
    stacked = _stack(v)
    if np.shape(dz) != stacked.shape[1:]:
        raise ShapeMismatch(f"upstream gradient {np.shape(dz)} does not match {stacked.shape[1:]}")
    T = stacked.shape[0]
    ones = np.ones_like(stacked[:1])
    prefix = np.concatenate([ones, np.cumprod(stacked[:-1], axis=0)], axis=0)
    suffix = np.concatenate([np.cumprod(stacked[::-1][:-1], axis=0)[::-1], ones], axis=0)
    exclusive = prefix * suffix
    product = prefix[-1] * stacked[-1]
    coef = np.power(product + epsilon, (1.0 - T) / T) / T
    return [dz * coef * exclusive[t] for t in range(T)]


def sample_active_pair(T: int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform unordered pair (i, j), i < j, of 0-based branch indices.

    For T = 2 the only pair (0, 1) is returned.
    """
    if T < 2:
        raise ValueError(f"need at least two branches, got {T}")
    pairs = list(itertools.combinations(range(T), 2))
    return pairs[int(rng.integers(len(pairs)))]


# --- block ---

@dataclass
class _DclCache:
    x_shape: tuple[int, ...]
    active: list[tuple[tuple[int, ...], float]]
    cols: dict[int, np.ndarray]
    y: dict[int, np.ndarray]
    a: dict[int, np.ndarray]
    v: dict[int, np.ndarray]
    z: np.ndarray


class DclBlock(Layer):
    """DCL layer; parameter names are branch<t>.weight/bias and fusion<t>.weight/bias."""

    kind = LayerKind.DCL

    def __init__(self, spec: LayerSpec, in_shape: Shape, out_shape: Shape, rng: np.random.Generator, dtype):
        super().__init__(spec, in_shape, out_shape)
        self.cfg: DclConfig = spec.dcl
        c, h, w = in_shape
        k = spec.kernel
        extents = {
            (conv_output_extent(h, k, spec.stride, spec.pad), conv_output_extent(w, k, spec.stride, spec.pad))
            for _ in self.cfg.M
        }
        if len(extents) != 1 or (self.cfg.K2, *extents.pop()) != tuple(out_shape):
            raise ShapeMismatch(f"branches of {self.cfg} do not share the output grid {out_shape}")

        for t, m in enumerate(self.cfg.M):
            self.params[f"branch{t}.weight"] = glorot_uniform(rng, (m, c, k, k), c * k * k, m * k * k, dtype)
            self.params[f"branch{t}.bias"] = np.zeros(m, dtype=dtype)
            self.params[f"fusion{t}.weight"] = glorot_uniform(rng, (m, self.cfg.K2), m, self.cfg.K2, dtype)
            # zero bias: the block starts in the bias-free W^T y form
            self.params[f"fusion{t}.bias"] = np.zeros(self.cfg.K2, dtype=dtype)

    @property
    def T(self) -> int:
        return self.cfg.T

    def branch_param_names(self, t: int) -> list[str]:
        return [f"branch{t}.weight", f"branch{t}.bias", f"fusion{t}.weight", f"fusion{t}.bias"]

    def active_sets(self, train: bool, rng: Optional[np.random.Generator]) -> list[tuple[tuple[int, ...], float]]:
        """Branch subsets fused this pass, each with its epsilon; the output is their mean."""
        if self.cfg.strategy is Strategy.DETERMINISTIC:
            return [(tuple(range(self.T)), self.cfg.epsilon)]
        if train:
            if rng is None:
                raise ValueError("stochastic DCL training needs a random generator")
            return [(sample_active_pair(self.T, rng), PAIR_EPSILON)]
        return [(pair, PAIR_EPSILON) for pair in itertools.combinations(range(self.T), 2)]

    def branch_response(self, t: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(im2col matrix, y, projection pre-activation a) for branch t on a batch."""
        pre, col = conv2d_forward(
            x, self.params[f"branch{t}.weight"], self.params[f"branch{t}.bias"], self.spec.stride, self.spec.pad
        )
        y = np.maximum(pre, 0)
        a = np.einsum("nmhw,mk->nkhw", y, self.params[f"fusion{t}.weight"])
        a = a + self.params[f"fusion{t}.bias"][np.newaxis, :, np.newaxis, np.newaxis]
        return col, y, a

    def forward(self, x, train, rng):
        active = self.active_sets(train, rng)
        needed = sorted({t for subset, _ in active for t in subset})

        cols, ys, pres, vs = {}, {}, {}, {}
        for t in needed:
            cols[t], ys[t], pres[t] = self.branch_response(t, x)
            vs[t] = np.maximum(pres[t], 0)

        def fused(item):
            subset, eps = item
            return fuse([vs[t] for t in subset], eps)

        settings = get_settings()
        workers = 1 if settings.DCL_DETERMINISTIC else settings.DCL_THREADS
        if len(active) > 1 and workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                terms = list(ex.map(fused, active))
        else:
            terms = [fused(item) for item in active]

        # fixed pair order keeps the mean reproducible
        z = terms[0]
        for term in terms[1:]:
            z = z + term
        if len(terms) > 1:
            z = z / z.dtype.type(len(terms))

        return z, _DclCache(x.shape, active, cols, ys, pres, vs, z)

    def backward(self, dz, cache: _DclCache):
        share = dz / dz.dtype.type(len(cache.active))
        dv = {t: np.zeros_like(v) for t, v in cache.v.items()}
        for subset, eps in cache.active:
            for t, g in zip(subset, fuse_backward([cache.v[t] for t in subset], eps, share)):
                dv[t] += g

        grads: dict[str, np.ndarray] = {}
        dx = np.zeros(cache.x_shape, dtype=dz.dtype)
        for t, y in cache.y.items():
            da = dv[t] * (cache.a[t] > 0)
            fusion_w = self.params[f"fusion{t}.weight"]
            grads[f"fusion{t}.weight"] = np.einsum("nmhw,nkhw->mk", y, da)
            grads[f"fusion{t}.bias"] = da.sum(axis=(0, 2, 3))
            dy = np.einsum("nkhw,mk->nmhw", da, fusion_w) * (y > 0)
            dxt, dw, db = conv2d_backward(
                dy, cache.cols[t], cache.x_shape, self.params[f"branch{t}.weight"], self.spec.stride, self.spec.pad
            )
            grads[f"branch{t}.weight"] = dw
            grads[f"branch{t}.bias"] = db
            dx += dxt
        # branches outside every active subset get no entry and stay untouched
        return dx, grads

    def patch_responses(self, x_p: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Branch responses y(t) and projection pre-activations a(t) for one flattened patch."""
        c = self.in_shape[0]
        k = self.spec.kernel
        x_p = np.asarray(x_p, dtype=np.float64).reshape(-1)
        if x_p.size != c * k * k:
            raise ShapeMismatch(f"patch of {x_p.size} values, expected {c * k * k}")
        ys, pres = [], []
        for t in range(self.T):
            theta = self.params[f"branch{t}.weight"].astype(np.float64).reshape(self.cfg.M[t], -1)
            y = np.maximum(theta @ x_p + self.params[f"branch{t}.bias"], 0)
            ys.append(y)
            pres.append(y @ self.params[f"fusion{t}.weight"].astype(np.float64) + self.params[f"fusion{t}.bias"])
        return ys, pres

    def _vocabulary(self, t: int, y: np.ndarray, k: int) -> list[tuple[float, float]]:
        """(W(t)[m, k], y(t)[m]) per concept; a non-zero fusion bias joins as an always-on concept."""
        weights = self.params[f"fusion{t}.weight"][:, k].astype(np.float64)
        vocab = list(zip(weights.tolist(), y.tolist()))
        bias = float(self.params[f"fusion{t}.bias"][k])
        if bias != 0.0:
            vocab.append((bias, 1.0))
        return vocab


def _check_linear_region(pres: list[np.ndarray], k: int) -> None:
    # ReLU is the identity on a >= 0, so a zero pre-activation still satisfies both identities
    if any(a[k] < 0 for a in pres):
        raise PreconditionViolated(f"a fusion pre-activation of filter {k} is negative")


def compositional_expand(block: DclBlock, x_p: np.ndarray, k: int) -> float:
    """Sum over all prod_t M(t) compositional filters of prod_t W(t)[m_t, k] * y(t)[m_t].

    In the ReLU linear region this equals z_k ** T with eps = 0.
    """
    ys, pres = block.patch_responses(x_p)
    _check_linear_region(pres, k)
    vocabularies = [block._vocabulary(t, ys[t], k) for t in range(block.T)]
    total = 0.0
    for combo in itertools.product(*vocabularies):
        total += math.prod(w for w, _ in combo) * math.prod(y for _, y in combo)
    return total


def fused_power(block: DclBlock, x_p: np.ndarray, k: int, epsilon: float = 0.0) -> float:
    """z_k ** T computed through the fusion path, for comparison with compositional_expand."""
    _, pres = block.patch_responses(x_p)
    v = [np.maximum(a[k:k + 1], 0) for a in pres]
    return float(fuse(v, epsilon)[0] ** block.T)


@dataclass
class BcnnReference:
    """Bilinear map z_k = sum_ij U[i, j, k] y1[i] y2[j] with an unconstrained U."""

    U: np.ndarray

    def __post_init__(self) -> None:
        if self.U.ndim != 3:
            raise ShapeMismatch(f"U must be (M1, M2, K2), got {self.U.shape}")
        if not np.all(np.isfinite(self.U)):
            raise ValueError("U has non-finite entries")

    def forward(self, y1: np.ndarray, y2: np.ndarray) -> np.ndarray:
        return np.einsum("i,ijk,j->k", y1, self.U, y2)

    @staticmethod
    def _augment(block: DclBlock, t: int) -> np.ndarray:
        w = block.params[f"fusion{t}.weight"].astype(np.float64)
        b = block.params[f"fusion{t}.bias"].astype(np.float64)
        return np.vstack([w, b[np.newaxis]]) if np.any(b != 0) else w

    @classmethod
    def from_dcl(cls, block: DclBlock) -> "BcnnReference":
        """Rank-1 U[i, j, k] = W(1)[i, k] * W(2)[j, k] of a two-branch block."""
        if block.T != 2:
            raise PreconditionViolated(f"BCNN correspondence is defined for T = 2, got {block.T}")
        w1, w2 = cls._augment(block, 0), cls._augment(block, 1)
        return cls(np.einsum("ik,jk->ijk", w1, w2))


def bcnn_equivalence(block: DclBlock, x_p: np.ndarray, k: int) -> tuple[float, float]:
    """(z_k^2 - eps, bilinear_k) for a two-branch block at one patch."""
    if block.T != 2:
        raise PreconditionViolated(f"BCNN correspondence is defined for T = 2, got {block.T}")
    ys, pres = block.patch_responses(x_p)
    _check_linear_region(pres, k)
    eps = block.cfg.epsilon
    v = [np.maximum(a[k:k + 1], 0) for a in pres]
    dcl_sq = float(fuse(v, eps)[0] ** 2 - eps)

    reference = BcnnReference.from_dcl(block)
    y1, y2 = ys
    if reference.U.shape[0] != y1.size:
        y1 = np.append(y1, 1.0)
    if reference.U.shape[1] != y2.size:
        y2 = np.append(y2, 1.0)
    bilinear = float(reference.forward(y1, y2)[k])
    return dcl_sq, bilinear
