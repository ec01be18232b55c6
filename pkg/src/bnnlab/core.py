"""Numeric substrate: 2-D float64 matrices, counter-based RNG streams and
transformed-Bernoulli moments.

A "matrix" throughout the package is a C-contiguous ``numpy.ndarray`` of
dtype float64 with ``ndim == 2``. Row vectors (per-neuron parameters) are
stored as ``1 x K`` matrices.
"""
from __future__ import annotations

import numba
import numpy as np

from .errors import DomainError, NonFiniteError, ShapeError

_MASK64 = (1 << 64) - 1


def as_matrix(values, copy: bool = False) -> np.ndarray:
    """Coerce ``values`` to a 2-D float64 matrix; 1-D input becomes a row."""
    a = np.array(values, dtype=np.float64, copy=True if copy else None, ndmin=2)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return np.ascontiguousarray(a)


def check_finite(a: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return a


def rademacher_moments(p: float) -> tuple[float, float]:
    """Mean and variance of ``2*X - 1`` for ``X ~ Bernoulli(p)``."""
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"p must lie in [0, 1], got {p}")
    return 2.0 * p - 1.0, 4.0 * p * (1.0 - p)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed, k-ascending accumulation order.

    ``C[i, j]`` is accumulated exactly as ``((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...``
    so results are bit-identical to a naive triple loop and independent of
    the BLAS build or thread count.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    n, k = a.shape
    out = np.zeros((n, b.shape[1]), dtype=np.float64)
    if k == 0:
        return out
    if _exact_integer_product(a, b):
        # every partial sum is an exactly representable integer, so the
        # result does not depend on the accumulation order
        return np.matmul(a, b) + 0.0
    _accumulate(np.ascontiguousarray(a), np.ascontiguousarray(b), out)
    return check_finite(out, "matmul")


@numba.njit("void(float64[:, ::1], float64[:, ::1], float64[:, ::1])", cache=True)
def _accumulate(a, b, out):
    n, k = a.shape
    m = b.shape[1]
    for i in range(n):
        for p in range(k):
            aip = a[i, p]
            for j in range(m):
                out[i, j] += aip * b[p, j]


def _exact_integer_product(a: np.ndarray, b: np.ndarray) -> bool:
    if not (np.array_equal(a, np.trunc(a)) and np.array_equal(b, np.trunc(b))):
        return False
    amax = float(np.abs(a).max(initial=0.0))
    bmax = float(np.abs(b).max(initial=0.0))
    return a.shape[1] * amax * bmax < 2.0 ** 53


class RngStream:
    """Reproducible random stream keyed by ``(master_seed, stream_id)``.

    Backed by the Philox counter-based generator: the 128-bit key is the pair
    of 64-bit integers, so any stream can be reconstructed independently of
    the order in which other streams were consumed.
    """

    def __init__(self, master_seed: int, stream_id: int = 0):
        self.master_seed = int(master_seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = self.master_seed | (self.stream_id << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_id={self.stream_id})"

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def rademacher(self, size) -> np.ndarray:
        return np.where(self._gen.integers(0, 2, size=size) == 1, 1.0, -1.0)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def seeded_stream(master_seed: int, stream_id: int = 0) -> RngStream:
    return RngStream(master_seed, stream_id)
