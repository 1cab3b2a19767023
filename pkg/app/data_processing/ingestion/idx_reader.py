"""IDX reader/writer (the MNIST container format).

    [offset] [type]          [value]
    0000     32 bit integer  0x00000803 images / 0x00000801 labels (MSB first)
    0004     32 bit integer  number of items
    0008     32 bit integer  rows      (images only)
    0012     32 bit integer  columns   (images only)
    ....     unsigned byte   data

Number labels of three-digit datasets exceed a byte; those files use the IDX
int32 type code instead (0x00000C01, big-endian payload).
"""

import gzip
import logging
import os
import struct
from typing import Optional

import numpy as np

from app.backend.core.errors import BadMagic, DimMismatch, TruncatedFile

logger = logging.getLogger(__name__)

UBYTE = 0x08
INT32 = 0x0C
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
WIDE_LABELS_MAGIC = 0x00000C01

DTYPES = {UBYTE: np.dtype(np.uint8), INT32: np.dtype(">i4")}

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _open(path: str):
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def decode_idx(raw: bytes) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFile(f"IDX data of {len(raw)} bytes has no header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IMAGES_MAGIC, LABELS_MAGIC, WIDE_LABELS_MAGIC):
        raise BadMagic(f"unsupported IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    dtype = DTYPES[(magic >> 8) & 0xFF]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) < header + size:
        raise TruncatedFile(f"IDX body has {len(raw) - header} bytes, header promises {size}")
    if len(raw) > header + size:
        raise TruncatedFile(f"{len(raw) - header - size} trailing bytes after IDX body")
    data = np.frombuffer(raw, dtype=dtype, count=size // dtype.itemsize, offset=header).reshape(dims)
    return data.astype(dtype.newbyteorder("="))


def encode_idx(data: np.ndarray) -> bytes:
    if data.ndim not in (1, 3):
        raise DimMismatch(f"IDX payload must be rank 1 (labels) or 3 (images), got {data.shape}")
    if data.dtype == np.uint8:
        code = UBYTE
    elif data.ndim == 1 and data.dtype == np.int32:
        code = INT32
    else:
        raise ValueError(f"IDX payload must be uint8 (or int32 labels), got {data.dtype} with rank {data.ndim}")
    header = struct.pack(">HBB", 0, code, data.ndim) + struct.pack(f">{data.ndim}I", *data.shape)
    return header + np.ascontiguousarray(data, dtype=DTYPES[code]).tobytes()


def read_idx(path: str) -> np.ndarray:
    """Payload with the header's dimensions: uint8, or int32 for wide label files."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"IDX file not found: {path}")
    with _open(path) as f:
        return decode_idx(f.read())


def write_idx(path: str, data: np.ndarray) -> None:
    """Always uncompressed: gzip headers carry a timestamp and would break byte-identical output."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_idx(data))


def write_labels(path: str, labels: np.ndarray) -> None:
    """Byte labels when every value fits, int32 labels otherwise."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > np.iinfo(np.int32).max):
        raise ValueError("labels must be non-negative int32 values")
    wide = labels.size > 0 and labels.max() > 255
    write_idx(path, labels.astype(np.int32 if wide else np.uint8))


def to_pixels(raw: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [0, 1]."""
    return raw.astype(np.float32) / np.float32(255.0)


def to_bytes(pixels: np.ndarray) -> np.ndarray:
    """float in [0, 1] -> uint8, rounded."""
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def load_split(images_path: str, labels_path: str) -> tuple[np.ndarray, np.ndarray]:
    """Images N x H x W as float32 in [0, 1] and int64 labels."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise BadMagic(f"{images_path} is not an image file")
    if labels.ndim != 1:
        raise BadMagic(f"{labels_path} is not a label file")
    if images.shape[0] != labels.shape[0]:
        raise DimMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    logger.info("loaded %d images %dx%d from %s", images.shape[0], images.shape[1], images.shape[2], images_path)
    return to_pixels(images), labels.astype(np.int64)


def _find(directory: str, stem: str) -> Optional[str]:
    for candidate in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    return None


def load_mnist_split(mnist_dir: str, split: str) -> tuple[np.ndarray, np.ndarray]:
    if split not in MNIST_FILES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    images_stem, labels_stem = MNIST_FILES[split]
    images_path = _find(mnist_dir, images_stem)
    labels_path = _find(mnist_dir, labels_stem)
    if images_path is None or labels_path is None:
        raise FileNotFoundError(
            f"MNIST {split} files not found in {mnist_dir}. "
            f"Expected {images_stem}[.gz] and {labels_stem}[.gz] (set MNIST_DIR correctly)."
        )
    return load_split(images_path, labels_path)
