"""Multi-digit compositor.

Each composite samples one source digit per slot, crops it to its ink box,
flips / scales / rotates it (bilinear), places its centroid at the jittered
slot center and merges it into the canvas by per-pixel max. Gaussian noise is
added around the ink box, the composite is cropped to its minimal box of
non-zero pixels and rescaled to 28x28.

Every sample draws from its own generator seeded by (seed, split, index,
attempt), so a sample never depends on the order in which samples are built.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np
from PIL import Image
from tqdm import tqdm

from app.backend.core.config import get_settings
from app.backend.core.errors import DimMismatch, EmptyInk, MissingDigitLabels, SplitMismatch
from app.backend.core.schemas import DatasetConfig, DigitSlot
from app.data_processing.ingestion.idx_reader import (
    load_mnist_split,
    read_idx,
    to_bytes,
    to_pixels,
    write_idx,
    write_labels,
)

logger = logging.getLogger(__name__)

OUTPUT_SIZE = 28
INK_THRESHOLD = 0.1     # порог "чернил" после нормировки в [0, 1]
NOISE_MARGIN = 2        # pixels of canvas noise allowed around the ink box
MAX_ATTEMPTS = 16       # попыток на пустой кадр, потом EmptyInk
SPLIT_CODES = {"train": 0, "test": 1}


@dataclass(frozen=True)
class DigitSource:
    """Single-digit images (N x H x W, floats in [0, 1]) of one split."""

    images: np.ndarray
    labels: np.ndarray
    split: str

    def __post_init__(self) -> None:
        if self.split not in SPLIT_CODES:
            raise ValueError(f"split must be one of {sorted(SPLIT_CODES)}, got {self.split!r}")
        if self.images.ndim != 3:
            raise DimMismatch(f"digit images must be N x H x W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DimMismatch(f"{len(self.images)} digit images but {len(self.labels)} labels")
        if len(self.images) == 0:
            raise DimMismatch("digit source is empty")

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_mnist(cls, mnist_dir: str, split: str) -> "DigitSource":
        images, labels = load_mnist_split(mnist_dir, split)
        return cls(images, labels, split)


@dataclass
class LabeledImage:
    pixels: np.ndarray                          # 28 x 28 float32 in [0, 1]
    number_label: int
    digit_labels: tuple[int, ...]
    provenance: tuple[tuple[str, int], ...]     # (split, source index) per digit
    attempts: int = 1


def number_from_digits(digits) -> int:
    """Digits are most significant first: (4, 2) -> 42."""
    number = 0
    for d in digits:
        number = number * 10 + int(d)
    return number


# --- one composite ---

def _ink_box(img: np.ndarray) -> Optional[tuple[int, int, int, int]]:
    rows = np.flatnonzero(img.max(axis=1) > 0)
    cols = np.flatnonzero(img.max(axis=0) > 0)
    if rows.size == 0:
        return None
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def _transform(digit: np.ndarray, slot: DigitSlot, rng: np.random.Generator) -> np.ndarray:
    box = _ink_box(digit)
    if box is None:
        raise EmptyInk("source digit has no ink")
    r0, r1, c0, c1 = box
    flip = rng.random() < slot.flip_prob
    scale = rng.uniform(*slot.scale)
    angle = rng.uniform(*slot.rotation_deg)

    im = Image.fromarray(np.ascontiguousarray(digit[r0:r1, c0:c1], dtype=np.float32))
    if flip:
        im = im.transpose(Image.Transpose.FLIP_LEFT_RIGHT)
    if scale != 1.0:
        w, h = im.size
        im = im.resize((max(1, round(w * scale)), max(1, round(h * scale))), Image.Resampling.BILINEAR)
    if angle != 0.0:
        im = im.rotate(angle, resample=Image.Resampling.BILINEAR, expand=True)
    return np.clip(np.asarray(im, dtype=np.float32), 0.0, 1.0)


def _paste(canvas: np.ndarray, digit: np.ndarray, center: tuple[float, float]) -> None:
    """Merge digit into canvas by per-pixel max, its ink centroid landing on center (x, y in pixels)."""
    total = float(digit.sum())
    if total <= 0.0:
        return
    ys, xs = np.indices(digit.shape)
    cy = float((ys * digit).sum()) / total
    cx = float((xs * digit).sum()) / total
    top = int(round(center[1] - cy))
    left = int(round(center[0] - cx))

    size = canvas.shape[0]
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + digit.shape[0], size), min(left + digit.shape[1], size)
    if r0 >= r1 or c0 >= c1:
        return
    region = canvas[r0:r1, c0:c1]
    np.maximum(region, digit[r0 - top:r1 - top, c0 - left:c1 - left], out=region)


def _compose(cfg: DatasetConfig, source: DigitSource, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    picks = rng.integers(len(source), size=cfg.num_digits)
    canvas = np.zeros((cfg.canvas, cfg.canvas), dtype=np.float32)
    for slot, index in zip(cfg.slots, picks):
        digit = _transform(source.images[index], slot, rng)
        jitter = rng.uniform(-slot.jitter, slot.jitter, size=2)
        center = ((slot.center[0] + jitter[0]) * cfg.canvas, (slot.center[1] + jitter[1]) * cfg.canvas)
        _paste(canvas, digit, center)

    box = _ink_box(canvas)
    if box is None:
        raise EmptyInk("composite has no ink")
    r0, r1, c0, c1 = box
    if cfg.noise_std > 0:
        r0, c0 = max(r0 - NOISE_MARGIN, 0), max(c0 - NOISE_MARGIN, 0)
        r1, c1 = min(r1 + NOISE_MARGIN, cfg.canvas), min(c1 + NOISE_MARGIN, cfg.canvas)
        window = canvas[r0:r1, c0:c1]
        window += rng.normal(0.0, cfg.noise_std, size=window.shape).astype(np.float32)
        np.clip(window, 0.0, 1.0, out=window)
        # noise can only widen the box up to the margin
        inner = _ink_box(window)
        if inner is None:
            raise EmptyInk("composite has no ink after noise")
        r0, r1, c0, c1 = r0 + inner[0], r0 + inner[1], c0 + inner[2], c0 + inner[3]

    crop = Image.fromarray(np.ascontiguousarray(canvas[r0:r1, c0:c1]))
    resized = np.asarray(crop.resize((OUTPUT_SIZE, OUTPUT_SIZE), Image.Resampling.BILINEAR), dtype=np.float32)
    # quantized to bytes so in-memory samples equal what the IDX files hold
    pixels = to_pixels(to_bytes(np.clip(resized, 0.0, 1.0)))
    if pixels.max() <= INK_THRESHOLD:
        raise EmptyInk(f"composite peak {pixels.max():.3f} <= {INK_THRESHOLD}")
    return pixels, picks, source.labels[picks]


def compose_sample(cfg: DatasetConfig, source: DigitSource, index: int) -> LabeledImage:
    """Composite ``index`` of the source's split; degenerate draws retry on the next substream."""
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([cfg.seed, SPLIT_CODES[source.split], index, attempt])
        try:
            pixels, picks, digits = _compose(cfg, source, rng)
        except EmptyInk:
            continue
        digit_labels = tuple(int(d) for d in digits)
        return LabeledImage(
            pixels=pixels,
            number_label=number_from_digits(digit_labels),
            digit_labels=digit_labels,
            provenance=tuple((source.split, int(i)) for i in picks),
            attempts=attempt + 1,
        )
    raise EmptyInk(f"sample {index} stayed empty after {MAX_ATTEMPTS} attempts")


def synthesize(
    cfg: DatasetConfig,
    source: DigitSource,
    count: Optional[int] = None,
    split: Optional[str] = None,
    start: int = 0,
) -> Iterator[LabeledImage]:
    """Stream composites ``start .. start + count`` built from ``source``.

    ``split`` names the split being built; it must be the source's own split so
    training digits never reach test composites.
    """
    if split is not None and split != source.split:
        raise SplitMismatch(f"{split} composites requested from {source.split} digits")
    if count is None:
        count = cfg.counts[SPLIT_CODES[source.split]]
    return (compose_sample(cfg, source, index) for index in range(start, start + count))


# --- whole splits ---

@dataclass
class SplitData:
    images: np.ndarray                  # N x 28 x 28 uint8
    labels: np.ndarray                  # N number labels
    digit_labels: np.ndarray            # N x D
    provenance: list[tuple[tuple[str, int], ...]] = field(default_factory=list)
    regenerated: int = 0


def build_split(cfg: DatasetConfig, source: DigitSource, count: Optional[int] = None,
                workers: Optional[int] = None) -> SplitData:
    if count is None:
        count = cfg.counts[SPLIT_CODES[source.split]]
    workers = workers or get_settings().DCL_THREADS

    def one(index: int) -> LabeledImage:
        return compose_sample(cfg, source, index)

    progress = dict(total=count, desc=f"{cfg.id} {source.split}", disable=not get_settings().DCL_PROGRESS)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            samples = list(tqdm(ex.map(one, range(count)), **progress))
    else:
        samples = [one(i) for i in tqdm(range(count), **progress)]

    data = SplitData(
        images=np.stack([to_bytes(s.pixels) for s in samples]) if samples else np.zeros((0, 28, 28), np.uint8),
        labels=np.array([s.number_label for s in samples], dtype=np.int64),
        digit_labels=np.array([s.digit_labels for s in samples], dtype=np.int64).reshape(count, cfg.num_digits),
        provenance=[s.provenance for s in samples],
        regenerated=sum(s.attempts - 1 for s in samples),
    )
    logger.info("%s %s: %d composites, %d empty draws regenerated",
                cfg.id, source.split, count, data.regenerated)
    return data


def class_histogram(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)


# --- on-disk datasets ---

def dataset_paths(data_dir: str, dataset_id: str, split: str, num_digits: int) -> dict[str, str]:
    stem = os.path.join(data_dir, f"{dataset_id}-{split}")
    paths = {"images": f"{stem}-images.idx", "labels": f"{stem}-labels.idx"}
    for k in range(num_digits):
        paths[f"digit{k}"] = f"{stem}-digit{k}-labels.idx"
    return paths


def write_dataset(out_dir: str, cfg: DatasetConfig, split: str, data: SplitData) -> dict[str, str]:
    """Images, number labels and one label file per digit position, plus ``<id>.json``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = dataset_paths(out_dir, cfg.id, split, cfg.num_digits)
    write_idx(paths["images"], data.images)
    write_labels(paths["labels"], data.labels)
    for k in range(cfg.num_digits):
        write_labels(paths[f"digit{k}"], data.digit_labels[:, k])
    with open(os.path.join(out_dir, f"{cfg.id}.json"), "w", encoding="utf-8") as f:
        f.write(cfg.model_dump_json(indent=2))
    logger.info("wrote %s %s split (%d images) to %s", cfg.id, split, len(data.images), out_dir)
    return paths


@dataclass
class Dataset:
    """One split loaded for training: images N x 1 x 28 x 28 in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray
    digit_labels: Optional[np.ndarray]          # N x D, None when the sidecars are absent
    num_classes: int
    dataset_id: str = ""

    def __len__(self) -> int:
        return len(self.labels)

    def require_digit_labels(self) -> np.ndarray:
        if self.digit_labels is None:
            raise MissingDigitLabels(f"dataset {self.dataset_id or '<memory>'} has no per-digit labels")
        return self.digit_labels

    def subset(self, count: Optional[int]) -> "Dataset":
        if count is None or count >= len(self):
            return self
        digits = None if self.digit_labels is None else self.digit_labels[:count]
        return Dataset(self.images[:count], self.labels[:count], digits, self.num_classes, self.dataset_id)

    @classmethod
    def from_split(cls, cfg: DatasetConfig, data: SplitData) -> "Dataset":
        return cls(to_pixels(data.images)[:, np.newaxis], data.labels, data.digit_labels, cfg.num_classes, cfg.id)


def _dataset_config(data_dir: str, dataset_id: Optional[str]) -> DatasetConfig:
    if dataset_id is None:
        configs = sorted(name for name in os.listdir(data_dir) if name.endswith(".json"))
        if len(configs) != 1:
            raise FileNotFoundError(
                f"expected exactly one dataset config (*.json) in {data_dir}, found {configs}; pass the dataset id"
            )
        dataset_id = configs[0][:-len(".json")]
    path = os.path.join(data_dir, f"{dataset_id}.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset config not found: {path}. Run `dclnet gen-data` first.")
    with open(path, encoding="utf-8") as f:
        return DatasetConfig.model_validate(json.load(f))


def load_dataset(data_dir: str, split: str, dataset_id: Optional[str] = None) -> Dataset:
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"dataset directory not found: {data_dir}")
    cfg = _dataset_config(data_dir, dataset_id)
    paths = dataset_paths(data_dir, cfg.id, split, cfg.num_digits)
    images = read_idx(paths["images"])
    labels = read_idx(paths["labels"]).astype(np.int64)
    if images.ndim != 3 or labels.ndim != 1:
        raise DimMismatch(f"{paths['images']} / {paths['labels']} are not an image/label pair")
    if len(images) != len(labels):
        raise DimMismatch(f"{len(images)} images but {len(labels)} labels")

    digit_labels = None
    sidecars = [paths[f"digit{k}"] for k in range(cfg.num_digits)]
    if all(os.path.exists(p) for p in sidecars):
        digit_labels = np.stack([read_idx(p).astype(np.int64) for p in sidecars], axis=1)
        if len(digit_labels) != len(labels):
            raise DimMismatch(f"{len(digit_labels)} digit labels but {len(labels)} number labels")
    else:
        logger.warning("per-digit label files missing for %s %s", cfg.id, split)
    return Dataset(to_pixels(images)[:, np.newaxis], labels, digit_labels, cfg.num_classes, cfg.id)


def synthesize_splits(cfg: DatasetConfig, mnist_dir: str,
                      counts: Optional[tuple[int, int]] = None) -> dict[str, SplitData]:
    """Both splits, each composited only from the MNIST digits of the same split."""
    counts = counts or cfg.counts
    return {
        split: build_split(cfg, DigitSource.from_mnist(mnist_dir, split), counts[code])
        for split, code in SPLIT_CODES.items()
    }
