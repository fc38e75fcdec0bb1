"""Modern Hopfield network: energy, retrieval dynamics and the attention identity."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class PatternStore:
    """Stored patterns as the *columns* of ``X`` (d x N) with inverse temperature ``beta``.

    ``M`` (largest pattern norm) and the energy constant ``c`` are derived,
    so they can never go stale; use :meth:`with_beta` to change ``beta``.
    """

    X: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        X = linalg.as_matrix(self.X)
        if X.shape[1] < 1:
            raise DomainError("a pattern store needs at least one pattern")
        if not self.beta > 0:
            raise DomainError(f"beta must be positive, got {self.beta}")
        X = X.copy()
        X.setflags(write=False)
        object.__setattr__(self, "X", X)

    @property
    def d(self) -> int:
        return self.X.shape[0]

    @property
    def N(self) -> int:
        return self.X.shape[1]

    @property
    def M(self) -> float:
        return float(np.sqrt(np.sum(self.X * self.X, axis=0)).max())

    @property
    def c(self) -> float:
        return math.log(self.N) / self.beta + 0.5 * self.M**2

    def with_beta(self, beta: float) -> "PatternStore":
        return PatternStore(self.X, beta)


@dataclass(frozen=True)
class StateQuery:
    xi: np.ndarray
    eta: float = field(default=1.0)

    def __post_init__(self):
        if self.eta != 1.0:
            raise DomainError("the retrieval step size is fixed at 1")
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=np.float64).ravel())


def _state(q, store: PatternStore) -> np.ndarray:
    xi = q.xi if isinstance(q, StateQuery) else np.asarray(q, dtype=np.float64).ravel()
    if xi.shape[0] != store.d:
        raise ShapeError(f"state has dimension {xi.shape[0]}, store expects {store.d}")
    return xi


def energy(q, store: PatternStore) -> float:
    """``0.5 xi.xi - lse(X^T xi, beta) + c``."""
    xi = _state(q, store)
    return 0.5 * float(xi @ xi) - linalg.lse(store.X.T @ xi, store.beta) + store.c


def retrieval_weights(q, store: PatternStore) -> np.ndarray:
    """Softmax weights ``softmax(beta X^T xi)`` over stored patterns."""
    xi = _state(q, store)
    return linalg.softmax(store.beta * (store.X.T @ xi))


def update_state(q, store: PatternStore) -> np.ndarray:
    """One retrieval step ``X softmax(beta X^T xi)``; a convex combination of patterns."""
    return store.X @ retrieval_weights(q, store)


@dataclass
class RetrievalResult:
    state: np.ndarray
    energies: list[float]  # energies[0] is the starting energy
    iterations: int
    converged: bool


def retrieve(q0, store: PatternStore, max_iters: int = 100, tol: float = 1e-8) -> RetrievalResult:
    """Iterate :func:`update_state` until the infinity-norm step falls below ``tol``.

    Not converging within ``max_iters`` is reported through ``converged``,
    not raised.
    """
    if max_iters < 1:
        raise DomainError("max_iters must be at least 1")
    if not tol > 0:
        raise DomainError("tol must be positive")
    xi = _state(q0, store)
    energies = [energy(xi, store)]
    converged = False
    it = 0
    while it < max_iters:
        nxt = update_state(xi, store)
        it += 1
        step = float(np.max(np.abs(nxt - xi)))
        xi = nxt
        energies.append(energy(xi, store))
        if step < tol:
            converged = True
            break
    return RetrievalResult(xi, energies, it, converged)


def attention_equivalence_check(R, X, W_Q, W_K, W_V, beta: float | None = None) -> float:
    """Max abs difference between transformer attention and the scaled Hopfield update.

    Rows of ``R`` (S x d_r) are state patterns and rows of ``X`` (N x d_x) stored
    patterns. The left side is ``softmax(Q K^T / sqrt(d_k)) V`` with ``Q = R W_Q``,
    ``K = X W_K``, ``V = K W_V``; the right side is
    ``softmax(beta R W_Q W_K^T X^T) X W_K W_V`` evaluated in a different order.
    """
    R, X = linalg.as_matrix(R), linalg.as_matrix(X)
    W_Q, W_K, W_V = linalg.as_matrix(W_Q), linalg.as_matrix(W_K), linalg.as_matrix(W_V)
    if R.shape[1] != W_Q.shape[0] or X.shape[1] != W_K.shape[0]:
        raise ShapeError("pattern dimensions do not match the projections")
    if W_Q.shape[1] != W_K.shape[1] or W_K.shape[1] != W_V.shape[0]:
        raise ShapeError("projection shapes are inconsistent")
    d_k = W_K.shape[1]
    if beta is None:
        beta = 1.0 / math.sqrt(d_k)
    Q = R @ W_Q
    K = X @ W_K
    V = K @ W_V
    attention = linalg.row_softmax(Q @ K.T / math.sqrt(d_k)) @ V
    hopfield = linalg.row_softmax(beta * (R @ (W_Q @ W_K.T) @ X.T)) @ (X @ (W_K @ W_V))
    return float(np.max(np.abs(attention - hopfield)))
