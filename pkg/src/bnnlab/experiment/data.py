"""Dataset ingestion: IDX files, CIFAR-10 binary batches and synthetic clusters."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..core import RngStream
from ..errors import ContractViolation, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.247, 0.243, 0.261)
CIFAR10_RECORD = 3073
CIFAR10_PIXELS = 3072


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]


@dataclass(frozen=True)
class DatasetSpec:
    """Where data comes from and how it is normalized.

    ``source`` is ``idx``, ``cifar10`` or ``synthetic``. For IDX data
    ``paths`` holds (train images, train labels, test images, test labels);
    for CIFAR-10 the last path is the test batch and the rest are training
    batches.
    """

    source: str = "synthetic"
    paths: tuple[str, ...] = ()
    mean: tuple[float, ...] = ()
    std: tuple[float, ...] = ()
    n_train: int = 2000
    n_test: int = 1000
    dim: int = 64
    classes: int = 10
    separation: float = 3.0
    informative: int | None = None
    seed: int = 0

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ContractViolation("normalization std entries must be positive")
        if self.source not in ("idx", "cifar10", "synthetic"):
            raise ContractViolation(f"unknown data source {self.source!r}")


def _normalize(x: np.ndarray, mean: Sequence[float], std: Sequence[float], channels: int = 1) -> np.ndarray:
    if not mean and not std:
        return x
    mean = np.repeat(np.asarray(mean, dtype=np.float64), x.shape[1] // channels)
    std = np.repeat(np.asarray(std, dtype=np.float64), x.shape[1] // channels)
    return (x - mean) / std


def _read_idx(path, magic: int) -> tuple[tuple[int, ...], np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: magic {found:#010x}, expected {magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header != size:
        raise FormatError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header)


def load_idx(images_path, labels_path, mean: Sequence[float] = (), std: Sequence[float] = ()):
    """Read an IDX image/label pair. Pixels are scaled to [0, 1], then
    normalized with ``mean``/``std`` if given. Returns ``(x, y)``."""
    dims, pixels = _read_idx(images_path, IDX_IMAGES_MAGIC)
    (count,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if count != dims[0]:
        raise FormatError(f"{count} labels for {dims[0]} images")
    x = pixels.reshape(dims[0], -1).astype(np.float64) / 255.0
    return _normalize(x, mean, std), labels.astype(np.int64)


def load_cifar10_bin(paths, mean: Sequence[float] = CIFAR10_MEAN, std: Sequence[float] = CIFAR10_STD):
    """Read CIFAR-10 binary batches (1 label byte + 3072 channel-major pixels
    per record) and normalize per channel. Returns ``(x, y)`` with images
    flattened channel-major."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    xs, ys = [], []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR10_RECORD:
            raise FormatError(f"{p}: size {len(raw)} is not a multiple of {CIFAR10_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
        if rec[:, 0].max() > 9:
            raise FormatError(f"{p}: label byte above 9")
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].astype(np.float64) / 255.0)
    x = np.concatenate(xs)
    return _normalize(x, mean, std, channels=3), np.concatenate(ys)


def synth_dataset(n: int, dim: int, classes: int, seed: int = 0, separation: float = 3.0,
                  informative: int | None = None, n_test: int = 0) -> Dataset:
    """Gaussian class-conditional clusters with unit-variance noise.

    Class means are drawn in the first ``informative`` coordinates (all by
    default), rescaled so that each mean sits at distance ``separation`` from
    the origin, and the coordinates are then mixed by a random rotation.
    """
    if classes < 2:
        raise ContractViolation("need at least two classes")
    rng = RngStream(seed, 0)
    k = dim if informative is None else informative
    means = np.zeros((classes, dim))
    centers = rng.normal(0.0, 1.0, (classes, k))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    means[:, :k] = centers * separation
    q, _ = np.linalg.qr(rng.normal(0.0, 1.0, (dim, dim)))
    means = means @ q

    def draw(m, stream):
        r = RngStream(seed, stream)
        y = r.integers(0, classes, m)
        x = means[y] + r.normal(0.0, 1.0, (m, dim))
        return x, y.astype(np.int64)

    x_tr, y_tr = draw(n, 1)
    x_te, y_te = draw(n_test, 2) if n_test else (np.zeros((0, dim)), np.zeros(0, dtype=np.int64))
    return Dataset(x_tr, y_tr, x_te, y_te, classes)


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.source == "synthetic":
        return synth_dataset(spec.n_train, spec.dim, spec.classes, spec.seed, spec.separation,
                             spec.informative, n_test=spec.n_test)
    if spec.source == "idx":
        if len(spec.paths) != 4:
            raise ContractViolation("idx data needs train images, train labels, test images, test labels")
        x_tr, y_tr = load_idx(spec.paths[0], spec.paths[1], spec.mean, spec.std)
        x_te, y_te = load_idx(spec.paths[2], spec.paths[3], spec.mean, spec.std)
    else:
        if len(spec.paths) < 2:
            raise ContractViolation("cifar10 data needs at least one training batch and a test batch")
        mean, std = spec.mean or CIFAR10_MEAN, spec.std or CIFAR10_STD
        x_tr, y_tr = load_cifar10_bin(spec.paths[:-1], mean, std)
        x_te, y_te = load_cifar10_bin(spec.paths[-1:], mean, std)
    x_tr, y_tr = x_tr[: spec.n_train], y_tr[: spec.n_train]
    x_te, y_te = x_te[: spec.n_test], y_te[: spec.n_test]
    classes = int(max(y_tr.max(initial=0), y_te.max(initial=0))) + 1
    return Dataset(np.ascontiguousarray(x_tr), y_tr, np.ascontiguousarray(x_te), y_te, max(classes, 2))
