"""SGD training with momentum, weight decay and a step learning-rate schedule."""

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from tqdm import tqdm

from app.backend.core.arch import parse_arch, resolve_arch
from app.backend.core.config import force_deterministic, get_settings
from app.backend.core.errors import ArchDataMismatch, Divergence, NonFinite
from app.backend.core.network import Network
from app.backend.core.schemas import DatasetConfig, MetricsRecord, RunConfig, TrainConfig
from app.backend.services.checkpoint import Checkpoint, network_checkpoint, write_checkpoint
from app.data_processing.synthesis.composer import Dataset, load_dataset, synthesize_splits
from app.data_processing.synthesis.presets import preset

logger = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "split", "loss", "error_rate", "lr", "wall_ms"]
EVAL_BATCH = 256          # в eval батч больше: градиенты не храним


def sgd_update(
    params: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """v <- mu v - lr (g + lambda w); w <- w + v, in place.

    Only parameters with a gradient move; the rest keep weights and velocity.
    """
    for name, g in grads.items():
        w = params[name]
        v = velocity[name]
        v *= v.dtype.type(momentum)
        v -= v.dtype.type(lr) * (g + v.dtype.type(weight_decay) * w)
        w += v


def divergence_limit(num_classes: int) -> float:
    return 10.0 * math.log(num_classes)


def _errors(logits: np.ndarray, labels: np.ndarray) -> int:
    return int((logits.argmax(axis=1) != labels).sum())


def evaluate(net: Network, data: Dataset, epoch: int = 0, lr: float = 0.0,
             split: str = "test", batch_size: int = EVAL_BATCH) -> MetricsRecord:
    """Mean loss and top-1 error over the whole split in eval mode."""
    started = time.perf_counter()
    n = len(data)
    if n == 0:
        raise ValueError("cannot evaluate an empty split")
    loss_sum, wrong = 0.0, 0
    for start in range(0, n, batch_size):
        x = data.images[start:start + batch_size]
        y = data.labels[start:start + batch_size]
        result = net.forward(x, y, mode="eval")
        loss_sum += result.loss * len(y)
        wrong += _errors(result.logits, y)
    return MetricsRecord(
        epoch=epoch,
        split=split,
        loss=loss_sum / n,
        error_rate=wrong / n,
        lr=lr,
        wall_ms=int((time.perf_counter() - started) * 1000),
    )


def write_metrics(path: str, history: list[MetricsRecord]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        for r in history:
            writer.writerow([r.epoch, r.split, repr(r.loss), repr(r.error_rate), repr(r.lr), r.wall_ms])


def read_metrics(path: str) -> list[MetricsRecord]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"metrics file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        return [MetricsRecord(**row) for row in csv.DictReader(f)]


@dataclass
class TrainResult:
    network: Network
    history: list[MetricsRecord] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def final(self, split: str = "test") -> MetricsRecord:
        return [r for r in self.history if r.split == split][-1]


class Trainer:
    def __init__(
        self,
        net: Network,
        cfg: TrainConfig,
        out_dir: Optional[str] = None,
        metadata: Optional[dict[str, Any]] = None,
    ):
        self.net = net
        self.cfg = cfg
        self.out_dir = out_dir
        self.metadata = dict(metadata or {})
        self.limit = divergence_limit(net.spec.num_classes)
        self._last_good: Optional[Checkpoint] = None

    def _check_data(self, data: Dataset) -> None:
        shape = tuple(data.images.shape[1:])
        if shape != self.net.spec.input_shape:
            raise ArchDataMismatch(f"data of shape {shape} does not fit network input {self.net.spec.input_shape}")
        if data.num_classes != self.net.spec.num_classes:
            raise ArchDataMismatch(
                f"data has {data.num_classes} classes, network predicts {self.net.spec.num_classes}"
            )

    def _checkpoint(self, extra: dict[str, Any]) -> Checkpoint:
        return network_checkpoint(self.net, {**self.metadata, **extra})

    def _diverged(self, reason: str, epoch: int) -> Divergence:
        path = None
        if self.out_dir and self._last_good is not None:
            path = os.path.join(self.out_dir, "last_good.dclc")
            write_checkpoint(path, self._last_good)
        logger.warning("training diverged in epoch %d: %s (last good checkpoint: %s)", epoch, reason, path)
        return Divergence(f"epoch {epoch}: {reason}", path)

    def train_epoch(self, data: Dataset, epoch: int) -> MetricsRecord:
        """One pass over ``data`` in an order drawn from (seed, epoch)."""
        started = time.perf_counter()
        lr = self.cfg.lr_at(epoch)
        n = len(data)
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(n)
        # dropout masks and stochastic DCL pairs
        noise_rng = np.random.default_rng([self.cfg.seed, epoch, 1])
        params = self.net.parameters()

        loss_sum, wrong = 0.0, 0
        batches = range(0, n, self.cfg.batch_size)
        bar = tqdm(batches, desc=f"epoch {epoch + 1}/{self.cfg.total_epochs}", leave=False,
                   disable=not get_settings().DCL_PROGRESS)
        for start in bar:
            idx = order[start:start + self.cfg.batch_size]
            x, y = data.images[idx], data.labels[idx]
            try:
                result = self.net.forward(x, y, mode="train", rng=noise_rng)
            except NonFinite as e:
                raise self._diverged(str(e), epoch) from e
            if not math.isfinite(result.loss) or result.loss > self.limit:
                raise self._diverged(f"loss {result.loss:.4g} exceeds {self.limit:.4g}", epoch)

            grads = self.net.backward(result.cache)
            sgd_update(params, self.net.velocity, grads.params, lr, self.cfg.momentum, self.cfg.weight_decay)
            self.net.touch()

            loss_sum += result.loss * len(idx)
            wrong += _errors(result.logits, y)
            bar.set_postfix(loss=f"{result.loss:.4f}")

        return MetricsRecord(
            epoch=epoch,
            split="train",
            loss=loss_sum / n,
            error_rate=wrong / n,
            lr=lr,
            wall_ms=int((time.perf_counter() - started) * 1000),
        )

    def fit(self, train: Dataset, test: Dataset) -> TrainResult:
        if self.cfg.deterministic and not get_settings().DCL_DETERMINISTIC:
            force_deterministic()
        self._check_data(train)
        self._check_data(test)
        train = train.subset(self.cfg.train_subset)
        test = test.subset(self.cfg.test_subset)
        if len(train) == 0:
            raise ValueError("training split is empty")
        logger.info("training %d params on %d images (%d test), %d epochs",
                    self.net.weight_count() + self.net.bias_count(), len(train), len(test), self.cfg.total_epochs)

        result = TrainResult(self.net)
        # снимок на случай расходимости до конца первой эпохи
        self._last_good = self._checkpoint({"epoch": 0})
        epoch = 0
        for stage, (epochs, lr) in enumerate(self.cfg.schedule):
            for _ in range(epochs):
                result.history.append(self.train_epoch(train, epoch))
                result.history.append(evaluate(self.net, test, epoch, lr))
                logger.info("epoch %d: train loss %.4f, test error %.4f",
                            epoch + 1, result.history[-2].loss, result.history[-1].error_rate)
                epoch += 1
                self._last_good = self._checkpoint({"epoch": epoch})
                if self.out_dir:
                    write_metrics(os.path.join(self.out_dir, "metrics.csv"), result.history)

            if self.out_dir:
                path = os.path.join(self.out_dir, f"stage{stage}.dclc")
                write_checkpoint(path, self._checkpoint({"epoch": epoch, "stage": stage}))
                result.checkpoints.append(path)
        return result


def train(net: Network, cfg: TrainConfig, train_set: Dataset, test_set: Dataset,
          out_dir: Optional[str] = None, metadata: Optional[dict[str, Any]] = None) -> TrainResult:
    return Trainer(net, cfg, out_dir, metadata).fit(train_set, test_set)


# --- oracle ---

@dataclass
class OracleResult:
    error_rate: float
    digit_errors: list[float]


def oracle_train_eval(arch: str, train_set: Dataset, test_set: Dataset, cfg: TrainConfig,
                      out_dir: Optional[str] = None) -> OracleResult:
    """One 10-class copy of ``arch`` per digit position; a composite counts only if every digit is right."""
    train_digits = train_set.require_digit_labels()
    test_digits = test_set.require_digit_labels()
    train_set = train_set.subset(cfg.train_subset)
    test_set = test_set.subset(cfg.test_subset)
    train_digits, test_digits = train_digits[:len(train_set)], test_digits[:len(test_set)]

    input_shape = tuple(train_set.images.shape[1:])
    all_correct = np.ones(len(test_set), dtype=bool)
    digit_errors = []
    for k in range(train_digits.shape[1]):
        spec = parse_arch(arch, input_shape, 10)
        net = Network(spec, precision=cfg.precision, seed=cfg.seed + k)
        sub_train = Dataset(train_set.images, train_digits[:, k], None, 10, f"{train_set.dataset_id}-digit{k}")
        sub_test = Dataset(test_set.images, test_digits[:, k], None, 10, f"{test_set.dataset_id}-digit{k}")
        sub_dir = os.path.join(out_dir, f"digit{k}") if out_dir else None
        Trainer(net, cfg, sub_dir, {"arch": arch, "oracle_digit": k}).fit(sub_train, sub_test)

        correct = np.concatenate([
            net.predict(sub_test.images[s:s + EVAL_BATCH]).argmax(axis=1) == sub_test.labels[s:s + EVAL_BATCH]
            for s in range(0, len(sub_test), EVAL_BATCH)
        ])
        digit_errors.append(float(1.0 - correct.mean()))
        all_correct &= correct
        logger.info("oracle digit %d: error %.4f", k, digit_errors[-1])
    return OracleResult(float(1.0 - all_correct.mean()), digit_errors)


def oracle_eval(nets: list[Network], data: Dataset) -> OracleResult:
    """Composite error of already trained per-digit classifiers."""
    digits = data.require_digit_labels()
    if len(nets) != digits.shape[1]:
        raise ArchDataMismatch(f"{len(nets)} digit classifiers for {digits.shape[1]}-digit data")
    all_correct = np.ones(len(data), dtype=bool)
    digit_errors = []
    for k, net in enumerate(nets):
        correct = np.concatenate([
            net.predict(data.images[s:s + EVAL_BATCH]).argmax(axis=1) == digits[s:s + EVAL_BATCH, k]
            for s in range(0, len(data), EVAL_BATCH)
        ])
        digit_errors.append(float(1.0 - correct.mean()))
        all_correct &= correct
    return OracleResult(float(1.0 - all_correct.mean()), digit_errors)


# --- runs ---

def aggregate(values: list[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def dataset_config(run: RunConfig) -> DatasetConfig:
    return preset(run.dataset) if isinstance(run.dataset, str) else run.dataset


def load_run_data(run: RunConfig) -> tuple[Dataset, Dataset]:
    """Train/test splits from ``data_dir`` or, when absent, synthesized from MNIST in memory."""
    cfg = dataset_config(run)
    if run.data_dir:
        return load_dataset(run.data_dir, "train", cfg.id), load_dataset(run.data_dir, "test", cfg.id)
    counts = (
        min(cfg.counts[0], run.train.train_subset or cfg.counts[0]),
        min(cfg.counts[1], run.train.test_subset or cfg.counts[1]),
    )
    splits = synthesize_splits(cfg, get_settings().MNIST_DIR, counts)
    return Dataset.from_split(cfg, splits["train"]), Dataset.from_split(cfg, splits["test"])


def build_run_network(run: RunConfig, data: Dataset, seed: int) -> tuple[Network, str]:
    text, native_shape = resolve_arch(run.arch, data.num_classes)
    input_shape = tuple(data.images.shape[1:])
    if native_shape is not None and native_shape != input_shape:
        raise ArchDataMismatch(f"{run.arch} expects input {native_shape}, data is {input_shape}")
    spec = parse_arch(text, input_shape, data.num_classes, run.dcl)
    return Network(spec, precision=run.train.precision, seed=seed), text


def run_training(run: RunConfig, repeats: int = 1) -> list[TrainResult]:
    """Train ``repeats`` independent seeds; repeat r writes to ``out_dir/run<r>`` when repeating."""
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    train_set, test_set = load_run_data(run)
    results = []
    for r in range(repeats):
        cfg = run.train.model_copy(update={"seed": run.train.seed + r})
        net, text = build_run_network(run, train_set, cfg.seed)
        out_dir = run.out_dir if repeats == 1 else os.path.join(run.out_dir, f"run{r}")
        metadata: dict[str, Any] = {
            "arch": text,
            "dataset": dataset_config(run).id,
            "train": cfg.model_dump(mode="json"),
        }
        if run.dcl is not None:
            metadata["dcl"] = run.dcl.model_dump(mode="json", exclude_none=True)
        results.append(train(net, cfg, train_set, test_set, out_dir, metadata))
    return results
