"""Dense float64 kernels, stable reductions and seeded random streams.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 in C
(row-major) order. Vectors are 1-D arrays.
"""
from __future__ import annotations

import numpy as np

from .errors import DomainError, NumericError, ShapeError

__all__ = [
    "as_matrix",
    "lse",
    "softmax",
    "row_softmax",
    "row_lse",
    "matmul",
    "transpose",
    "diag_vector",
    "diag_embed",
    "trace",
    "row_l2_normalize",
    "RngStream",
    "rng_gaussian",
    "rng_uniform",
    "rng_permutation",
]


def as_matrix(a) -> np.ndarray:
    """Coerce ``a`` to a 2-D float64 C-contiguous array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def _as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {v.shape}")
    if v.size == 0:
        raise DomainError("empty vector")
    return v


def _check_finite(m: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{what} produced non-finite values")
    return m


def lse(v, beta: float = 1.0) -> float:
    """Smooth maximum ``beta**-1 * log(sum(exp(beta * v)))``.

    Bounded by ``max(v) <= lse(v, beta) <= max(v) + log(len(v)) / beta``.
    """
    v = _as_vector(v)
    if not beta > 0:
        raise DomainError(f"beta must be positive, got {beta}")
    m = float(v.max())
    return m + float(np.log(np.sum(np.exp(beta * (v - m))))) / beta


def row_lse(M, beta: float = 1.0) -> np.ndarray:
    """``lse`` applied to every row of ``M``; returns a vector."""
    M = as_matrix(M)
    if M.shape[1] == 0:
        raise DomainError("rows are empty")
    if not beta > 0:
        raise DomainError(f"beta must be positive, got {beta}")
    m = M.max(axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(beta * (M - m)), axis=1, keepdims=True)) / beta)[:, 0]


def softmax(v) -> np.ndarray:
    v = _as_vector(v)
    e = np.exp(v - v.max())
    return e / e.sum()


def row_softmax(M) -> np.ndarray:
    M = as_matrix(M)
    if M.shape[1] == 0:
        raise DomainError("rows are empty")
    e = np.exp(M - M.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def matmul(A, B) -> np.ndarray:
    A, B = as_matrix(A), as_matrix(B)
    if A.shape[1] != B.shape[0]:
        raise ShapeError(f"cannot multiply {A.shape} by {B.shape}")
    return A @ B


def transpose(A) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(A).T)


def _square(A) -> np.ndarray:
    A = as_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ShapeError(f"expected a square matrix, got {A.shape}")
    return A


def diag_vector(A) -> np.ndarray:
    return np.diagonal(_square(A)).copy()


def trace(A) -> float:
    return float(np.trace(_square(A)))


def diag_embed(v) -> np.ndarray:
    """Vector-to-diagonal-matrix operator."""
    return np.diag(_as_vector(v))


def row_l2_normalize(A) -> np.ndarray:
    A = as_matrix(A)
    norms = np.sqrt(np.sum(A * A, axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise DomainError("cannot normalize a zero row")
    return _check_finite(A / norms, "row_l2_normalize")


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Backed by PCG64 seeded through ``SeedSequence(seed, spawn_key=(stream_id,))``
    so distinct stream ids give independent sequences and the bit stream is
    identical on every platform.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def rng_gaussian(stream: RngStream, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0 or rows < 0 or cols < 0:
        raise DomainError("std and dimensions must be nonnegative")
    z = stream.generator.standard_normal((rows, cols))
    return mean + std * z


def rng_uniform(stream: RngStream, rows: int, cols: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    if lo > hi or rows < 0 or cols < 0:
        raise DomainError("need lo <= hi and nonnegative dimensions")
    return lo + (hi - lo) * stream.generator.random((rows, cols))


def rng_permutation(stream: RngStream, n: int) -> np.ndarray:
    if n < 0:
        raise DomainError("n must be nonnegative")
    return stream.generator.permutation(n)
