"""IDX (MNIST-style) files, labeled image sets, batching and the synthetic regression stream."""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import AeqpropError, DomainError
from .models import LegendreTarget, sample_target, target_eval

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# IDX type byte -> big-endian numpy dtype
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {dt.kind + str(dt.itemsize): code for code, dt in _IDX_TYPES.items()}

DATA_ENV = "AEQPROP_DATA"
DEFAULT_ROOT = Path("~/.aeqprop/data/mnist")


class ParseError(AeqpropError, ValueError):
    """Malformed IDX content; ``offset`` is the byte position where decoding failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def parse_idx(data: bytes, normalize: bool = True) -> np.ndarray:
    """Decode an IDX container (optionally gzip-compressed).

    Unsigned-byte tensors with three or more dimensions are images and are
    scaled by 1/255 when ``normalize`` is set; other tensors keep their values
    in native byte order.
    """
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise ParseError(f"corrupt gzip stream: {exc}", 0) from None
    if len(data) < 4:
        raise ParseError("file too short for an IDX magic number", len(data))
    zero, code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or code not in _IDX_TYPES:
        raise ParseError(f"bad magic number 0x{struct.unpack('>I', data[:4])[0]:08x}", 0)
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise ParseError(f"truncated header: need {ndim} dimensions", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    dtype = _IDX_TYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(data) - header_end
    if payload < expected:
        raise ParseError(f"truncated payload: expected {expected} bytes, found {payload}", len(data))
    if payload > expected:
        raise ParseError(f"{payload - expected} trailing bytes after payload", header_end + expected)
    arr = np.frombuffer(data, dtype=dtype, count=expected // dtype.itemsize, offset=header_end)
    arr = arr.reshape(dims).astype(dtype.newbyteorder("="))
    if normalize and code == 0x08 and ndim >= 3:
        return arr / 255.0
    return arr


def write_idx(arr: np.ndarray) -> bytes:
    """Encode an integer or float array as IDX bytes."""
    arr = np.asarray(arr)
    key = arr.dtype.kind + str(arr.dtype.itemsize)
    if key not in _IDX_CODES:
        raise DomainError(f"dtype {arr.dtype} has no IDX encoding")
    code = _IDX_CODES[key]
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(_IDX_TYPES[code]).tobytes()


def load_idx(path, normalize: bool = True) -> np.ndarray:
    return parse_idx(Path(path).read_bytes(), normalize)


@dataclass
class LabeledImageSet:
    images: np.ndarray  # N x 1 x 28 x 28 in [0, 1]
    labels: np.ndarray  # N integers in [0, 9]
    n_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DomainError(f"{len(self.images)} images but {len(self.labels)} labels")
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def one_hot(self) -> np.ndarray:
        return np.eye(self.n_classes)[self.labels]

    def subset(self, n: int) -> "LabeledImageSet":
        return LabeledImageSet(self.images[:n], self.labels[:n], self.n_classes)

    def flat(self) -> "LabeledImageSet":
        return LabeledImageSet(self.images.reshape(len(self), -1), self.labels, self.n_classes)


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def data_root(root=None) -> Path:
    if root is None:
        root = os.environ.get(DATA_ENV) or DEFAULT_ROOT
    return Path(root).expanduser()


def find_idx(root, stem: str) -> Path | None:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        path = Path(root) / name
        if path.exists():
            return path
    return None


def _check_digest(path: Path, root: Path):
    """Compare against ``md5sums.txt`` or ``<file>.md5`` when one of them is present."""
    expected = None
    sums = root / "md5sums.txt"
    if sums.exists():
        for line in sums.read_text().splitlines():
            parts = line.split()
            if len(parts) == 2 and parts[1].lstrip("*") == path.name:
                expected = parts[0]
    single = path.with_name(path.name + ".md5")
    if expected is None and single.exists():
        expected = single.read_text().split()[0]
    if expected is not None:
        actual = hashlib.md5(path.read_bytes()).hexdigest()
        if actual != expected:
            raise ParseError(f"checksum mismatch for {path.name}: {actual} != {expected}", 0)


def load_mnist(split: str = "train", root=None, limit: int | None = None,
               verify_checksums: bool = True) -> LabeledImageSet:
    """Load an MNIST-layout split from ``root`` (default: $AEQPROP_DATA or ~/.aeqprop/data/mnist)."""
    if split not in _MNIST_FILES:
        raise DomainError(f"unknown split {split!r}")
    root = data_root(root)
    paths = [find_idx(root, stem) for stem in _MNIST_FILES[split]]
    missing = [stem for stem, p in zip(_MNIST_FILES[split], paths) if p is None]
    if missing:
        raise FileNotFoundError(f"missing {', '.join(missing)} under {root}")
    if verify_checksums:
        for p in paths:
            _check_digest(p, root)
    images = load_idx(paths[0])
    labels = load_idx(paths[1])
    if images.ndim != 3 or labels.ndim != 1:
        raise ParseError(f"unexpected tensor ranks {images.ndim} and {labels.ndim}", 0)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return LabeledImageSet(images[:, None, :, :], labels)


def mnist_available(root=None) -> bool:
    root = data_root(root)
    return all(find_idx(root, stem) is not None for pair in _MNIST_FILES.values() for stem in pair)


def batches(data, batch_size: int, seed: int, epoch: int):
    """Shuffled mini-batches for one epoch; the order depends only on (seed, epoch).

    ``data`` is a :class:`LabeledImageSet` (yielding images and one-hot targets)
    or an ``(x, y)`` pair of arrays. The last partial batch is kept.
    """
    if batch_size < 1:
        raise DomainError("batch_size must be >= 1")
    x, y = (data.images, data.one_hot) if isinstance(data, LabeledImageSet) else data
    n = len(x)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield x[idx], y[idx]


@dataclass(frozen=True)
class RegressionStream:
    """Samples (z, f(z)) with z uniform on [-1, 1]."""

    target: LegendreTarget
    seed: int = 0

    @classmethod
    def from_seed(cls, target_seed: int, seed: int = 0, degree: int = 10) -> "RegressionStream":
        return cls(sample_target(target_seed, degree), seed)

    def sample(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        z = np.random.default_rng(self.seed).uniform(-1.0, 1.0, size=n)
        return z, target_eval(self.target, z)
