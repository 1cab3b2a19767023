"""A network built from a NetworkSpec: parameters, forward/backward, gradient checking."""

import logging
from dataclasses import dataclass, field
from typing import Any, Literal, Optional

import numpy as np

from app.backend.core.arch import LayerKind, NetworkSpec, parse_arch
from app.backend.core.errors import ShapeChainError, StaleCache
from app.backend.core.layers import Layer, build_layer, softmax_cross_entropy
from app.backend.core.tensor import PRECISIONS, check_finite

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]


@dataclass
class ForwardCache:
    mode: Mode
    version: int
    layer_caches: list[Any]
    dlogits: np.ndarray
    consumed: bool = False


@dataclass
class ForwardResult:
    loss: float
    logits: np.ndarray
    cache: ForwardCache
    activations: dict[int, Any] = field(default_factory=dict)


@dataclass
class Gradients:
    params: dict[str, np.ndarray]   # inactive stochastic branches are absent
    input: np.ndarray


class Network:
    def __init__(self, spec: NetworkSpec, precision: str = "single", seed: int = 0):
        self.spec = spec
        self.precision = precision
        self.dtype = PRECISIONS[precision]
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.layers: list[Layer] = [
            build_layer(layer, spec.in_shape(i), spec.out_shape(i), rng, self.dtype)
            for i, layer in enumerate(spec.layers)
        ]
        self.velocity: dict[str, np.ndarray] = {
            name: np.zeros_like(p) for name, p in self.parameters().items()
        }
        self.version = 0

    @classmethod
    def from_arch(cls, text: str, input_shape=(1, 28, 28), num_classes: int = 100, **kw) -> "Network":
        return cls(parse_arch(text, input_shape, num_classes), **kw)

    # --- parameters ---

    def parameters(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed '<layer index>.<local name>', in layer order."""
        return {
            f"{i}.{name}": p
            for i, layer in enumerate(self.layers)
            for name, p in layer.params.items()
        }

    def weight_count(self) -> int:
        return sum(layer.weight_count() for layer in self.layers)

    def bias_count(self) -> int:
        return sum(layer.bias_count() for layer in self.layers)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        live = self.parameters()
        missing = set(live) - set(state)
        unexpected = set(state) - set(live)
        if missing or unexpected:
            raise ShapeChainError(
                f"checkpoint does not match architecture (missing {sorted(missing)}, "
                f"unexpected {sorted(unexpected)})", 0)
        for name, p in live.items():
            if state[name].shape != p.shape:
                raise ShapeChainError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}",
                                      int(name.split(".")[0]))
            p[...] = state[name]
        self.touch()

    def touch(self) -> None:
        """Invalidate outstanding forward caches after a parameter change."""
        self.version += 1

    def dcl_layers(self) -> list[tuple[int, Layer]]:
        return [(i, layer) for i, layer in enumerate(self.layers) if layer.kind is LayerKind.DCL]

    # --- passes ---

    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        expected = self.spec.input_shape
        if batch.ndim == 2 and expected[1:] == (1, 1) and batch.shape[1] == expected[0]:
            batch = batch.reshape(batch.shape[0], *expected)
        if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
            raise ShapeChainError(f"batch {batch.shape} does not match input shape {expected}", 0)
        return batch.astype(self.dtype, copy=False)

    def forward(
        self,
        batch: np.ndarray,
        labels: np.ndarray,
        mode: Mode = "train",
        rng: Optional[np.random.Generator] = None,
        loss_weight: float = 1.0,
        capture: bool = False,
    ) -> ForwardResult:
        """Mean cross-entropy of a batch; eval mode disables dropout and enumerates DCL pairs."""
        x = self._check_batch(batch)
        train = mode == "train"
        caches: list[Any] = []
        captured: dict[int, Any] = {}
        for i, layer in enumerate(self.layers):
            if layer.kind is LayerKind.LOSS:
                caches.append(None)
                continue
            x, cache = layer.forward(x, train, rng)
            caches.append(cache)
            if capture and layer.kind is LayerKind.DCL:
                captured[i] = cache

        logits = x.reshape(x.shape[0], -1)
        check_finite(logits, "forward")
        loss, _, dlogits = softmax_cross_entropy(logits, labels, loss_weight)
        check_finite(np.asarray(loss), "loss")
        cache = ForwardCache(mode, self.version, caches, dlogits)
        return ForwardResult(loss, logits, cache, captured)

    def backward(self, cache: ForwardCache) -> Gradients:
        if cache.mode != "train":
            raise StaleCache("backward needs a train-mode forward cache")
        if cache.version != self.version or cache.consumed:
            raise StaleCache("forward cache predates a parameter update")
        cache.consumed = True

        d = cache.dlogits.reshape(cache.dlogits.shape[0], -1, 1, 1)
        grads: dict[str, np.ndarray] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.kind is LayerKind.LOSS:
                continue
            d = d.reshape(d.shape[0], *layer.out_shape)
            d, local = layer.backward(d, cache.layer_caches[i])
            for name, g in local.items():
                grads[f"{i}.{name}"] = g
        return Gradients(grads, d)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        x = self._check_batch(batch)
        for layer in self.layers:
            if layer.kind is not LayerKind.LOSS:
                x, _ = layer.forward(x, False, None)
        return x.reshape(x.shape[0], -1)


# --- gradient checking ---

@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def grad_check(
    spec: NetworkSpec,
    seed: int = 0,
    batch_size: int = 4,
    h: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Central finite differences against backward, in double precision.

    Dropout masks and the stochastic DCL pair are frozen by reseeding the
    generator for every probe.
    """
    if batch_size > 8:
        raise ValueError("gradient checks use batches of at most 8")
    net = Network(spec, precision="double", seed=seed)
    if net.weight_count() + net.bias_count() > 10_000:
        raise ValueError("gradient checks are limited to networks of at most 10k parameters")

    data_rng = np.random.default_rng(seed + 1)
    batch = data_rng.normal(size=(batch_size, *spec.input_shape))
    labels = data_rng.integers(spec.num_classes, size=batch_size)
    # small random fusion biases so bias gradients are exercised too
    for name, p in net.parameters().items():
        if name.endswith("bias"):
            p[...] = data_rng.uniform(0.01, 0.1, size=p.shape)
    net.touch()

    def loss_at() -> float:
        return net.forward(batch, labels, "train", np.random.default_rng(seed + 2)).loss

    result = net.forward(batch, labels, "train", np.random.default_rng(seed + 2))
    analytic = net.backward(result.cache)

    entries = []
    for name, p in net.parameters().items():
        a = analytic.params.get(name, np.zeros_like(p))
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            plus = loss_at()
            flat[j] = orig - h
            minus = loss_at()
            flat[j] = orig
            numeric.reshape(-1)[j] = (plus - minus) / (2 * h)
        err = float(relative_error(a, numeric).max()) if p.size else 0.0
        entries.append(GradCheckEntry(name, err, err < tolerance))

    numeric_in = np.zeros_like(batch)
    flat_in = batch.reshape(-1)
    for j in range(flat_in.size):
        orig = flat_in[j]
        flat_in[j] = orig + h
        plus = loss_at()
        flat_in[j] = orig - h
        minus = loss_at()
        flat_in[j] = orig
        numeric_in.reshape(-1)[j] = (plus - minus) / (2 * h)
    err = float(relative_error(analytic.input.reshape(batch.shape), numeric_in).max())
    entries.append(GradCheckEntry("input", err, err < tolerance))

    report = GradCheckReport(entries, tolerance)
    logger.info("gradient check %s: %d tensors, worst %.2e",
                "passed" if report.passed else "FAILED", len(entries),
                max(e.max_rel_error for e in entries))
    return report
