"""Shared fixtures: seeded generators and a tiny MNIST stand-in drawn as seven-segment glyphs."""

import os

import numpy as np
import pytest

from app.backend.core.arch import parse_arch
from app.backend.core.network import Network
from app.backend.core.schemas import DclOverrides
from app.data_processing.ingestion.idx_reader import MNIST_FILES, to_bytes, to_pixels, write_idx
from app.data_processing.synthesis.composer import Dataset, DigitSource

# segment -> (row0, row1, col0, col1) inside a 20 x 12 glyph box
_SEGMENT_BOXES = {
    "a": (0, 3, 0, 12),
    "b": (0, 11, 9, 12),
    "c": (9, 20, 9, 12),
    "d": (17, 20, 0, 12),
    "e": (9, 20, 0, 3),
    "f": (0, 11, 0, 3),
    "g": (8, 11, 0, 12),
}
_DIGIT_SEGMENTS = ["abcdef", "bc", "abdeg", "abcdg", "bcfg", "acdfg", "acdefg", "abc", "abcdefg", "abcdfg"]


@pytest.fixture(autouse=True)
def _quiet_progress(monkeypatch):
    monkeypatch.setenv("DCL_PROGRESS", "false")
    monkeypatch.delenv("DCL_DETERMINISTIC", raising=False)
    from app.backend.core.config import get_settings
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


def draw_digit(digit: int, shift: tuple[int, int] = (0, 0), intensity: float = 1.0) -> np.ndarray:
    img = np.zeros((28, 28), dtype=np.float32)
    top, left = 4 + shift[0], 8 + shift[1]
    for seg in _DIGIT_SEGMENTS[digit]:
        r0, r1, c0, c1 = _SEGMENT_BOXES[seg]
        img[top + r0:top + r1, left + c0:left + c1] = intensity
    return img


def make_digits(per_class: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(10), per_class)
    images = np.stack([
        draw_digit(int(d), tuple(int(s) for s in rng.integers(-2, 3, size=2)), float(rng.uniform(0.8, 1.0)))
        for d in labels
    ])
    # byte-quantized like real IDX input
    return to_pixels(to_bytes(images)), labels.astype(np.int64)


@pytest.fixture
def train_source() -> DigitSource:
    images, labels = make_digits(per_class=20, seed=1)
    return DigitSource(images, labels, "train")


@pytest.fixture
def test_source() -> DigitSource:
    images, labels = make_digits(per_class=5, seed=2)
    return DigitSource(images, labels, "test")


@pytest.fixture
def mnist_dir(tmp_path) -> str:
    """Directory holding MNIST-named IDX files of seven-segment digits."""
    root = tmp_path / "mnist"
    for split, per_class, seed in (("train", 20, 1), ("test", 5, 2)):
        images, labels = make_digits(per_class, seed)
        images_name, labels_name = MNIST_FILES[split]
        write_idx(os.path.join(root, images_name), to_bytes(images))
        write_idx(os.path.join(root, labels_name), labels.astype(np.uint8))
    return str(root)


def blob_dataset(n: int, classes: int, dim: int, seed: int, spread: float = 3.0) -> Dataset:
    """Gaussian clusters in ``dim`` dimensions, shaped (N, dim, 1, 1)."""
    rng = np.random.default_rng(seed)
    centers = np.random.default_rng(1000 + classes).normal(scale=spread, size=(classes, dim))
    labels = rng.integers(classes, size=n)
    x = centers[labels] + rng.normal(size=(n, dim))
    return Dataset(x.astype(np.float32)[:, :, None, None], labels.astype(np.int64), None, classes, "blobs")


def make_block(arch: str, in_shape, num_classes: int, M=None, seed: int = 0):
    """(network, DCL block) for a network whose first layer is the DCL block, in double precision."""
    overrides = DclOverrides(M=M) if M is not None else None
    net = Network(parse_arch(arch, in_shape, num_classes, overrides), precision="double", seed=seed)
    return net, net.layers[0]
