"""Teacher-student cross-attention energies and the one-step teacher-key update.

Conventions used throughout:

* keys and queries are stored as rows: ``K_t`` is ``N_t x d_k`` and ``Q_s`` is
  ``N_s x d_k``;
* softmaxes over students are taken per teacher-key row, ``row_softmax(beta K_t Q_s^T)``;
* the additive energy constants are zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import linalg
from .errors import DomainError, ShapeError


@dataclass
class AlignConfig:
    alpha: float = 0.0
    beta: float = 1.0
    gamma_update: float = 0.1
    gamma_reg: float = 0.5
    target_layers: tuple = (1,)

    def __post_init__(self):
        self.target_layers = tuple(int(i) for i in self.target_layers)
        if self.alpha < 0:
            raise DomainError("alpha must be nonnegative")
        if not self.beta > 0:
            raise DomainError("beta must be positive")

    def validate_layers(self, n_layers: int) -> None:
        bad = [i for i in self.target_layers if not 0 <= i < n_layers]
        if bad:
            raise DomainError(f"target layers {bad} outside 0..{n_layers - 1}")


@dataclass
class AttentionSlice:
    """Student queries, teacher keys and the key projection of one layer."""

    Q_s: np.ndarray
    K_t: np.ndarray
    W_K: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.Q_s = linalg.as_matrix(self.Q_s)
        self.K_t = linalg.as_matrix(self.K_t)
        if self.Q_s.shape[1] != self.K_t.shape[1]:
            raise ShapeError(f"queries {self.Q_s.shape} and keys {self.K_t.shape} differ in width")
        if self.Q_s.shape[0] == 0 or self.K_t.shape[0] == 0:
            raise DomainError("empty query or key set")
        d = self.K_t.shape[1]
        if self.W_K is None:
            self.W_K = np.eye(d)
        self.W_K = linalg.as_matrix(self.W_K)
        if self.W_K.shape != (d, d):
            raise ShapeError(f"key projection must be {d}x{d}, got {self.W_K.shape}")


def _scores(s: AttentionSlice) -> np.ndarray:
    return s.K_t @ s.Q_s.T  # N_t x N_s


def cross_energy(s: AttentionSlice, alpha: float = 0.0, beta: float = 1.0) -> float:
    """``(alpha/2) tr(K_t K_t^T) - sum_i lse(Q_s k_i^T, beta)``."""
    K = s.K_t
    return 0.5 * alpha * float(np.sum(K * K)) - float(np.sum(linalg.row_lse(_scores(s), beta)))


def prior_energy(K_t) -> float:
    """``log sum_i exp(|k_i|^2 / 2)``, max-shift stabilised."""
    K = linalg.as_matrix(K_t)
    if K.size == 0:
        raise DomainError("empty key matrix")
    return linalg.lse(0.5 * np.sum(K * K, axis=1), 1.0)


def _prior_weights(K: np.ndarray) -> np.ndarray:
    return linalg.softmax(0.5 * np.sum(K * K, axis=1))


def posterior_gradient(s: AttentionSlice, alpha: float = 0.0, beta: float = 1.0) -> np.ndarray:
    """Gradient of the log posterior of the teacher keys given the student queries.

    Equals ``-(grad cross_energy + grad prior_energy)`` with respect to ``K_t``:
    ``row_softmax(beta K_t Q_s^T) Q_s - (alpha I + diag(softmax(|k_i|^2/2))) K_t``.
    """
    K = s.K_t
    attract = linalg.row_softmax(beta * _scores(s)) @ s.Q_s
    return attract - (alpha * K + _prior_weights(K)[:, None] * K)


def update_direction(s: AttentionSlice, cfg: AlignConfig) -> np.ndarray:
    """Bracketed term of the teacher update (before scaling by ``gamma_update``)."""
    K = s.K_t
    attract = linalg.row_softmax(cfg.beta * _scores(s)) @ s.Q_s @ s.W_K.T
    reg = (cfg.alpha * K + _prior_weights(K)[:, None] * K) @ s.W_K.T
    return attract - cfg.gamma_reg * reg


def teacher_update(s: AttentionSlice, cfg: AlignConfig) -> np.ndarray:
    """One update step of the teacher keys toward the student queries."""
    if cfg.gamma_update == 0:
        return s.K_t.copy()
    return s.K_t + cfg.gamma_update * update_direction(s, cfg)


def alignment_objective(s: AttentionSlice, alpha: float, beta: float, gamma_reg: float) -> float:
    """Energy whose negative gradient is the update direction when ``W_K = I``.

    ``-sum_i lse(Q_s k_i^T, beta) + gamma_reg * ((alpha/2) tr(K K^T) + prior_energy(K))``.
    """
    K = s.K_t
    attract = -float(np.sum(linalg.row_lse(_scores(s), beta)))
    return attract + gamma_reg * (0.5 * alpha * float(np.sum(K * K)) + prior_energy(K))


def layer_energy_trace(
    slices: Mapping[int, AttentionSlice] | Sequence[AttentionSlice],
    alpha: float = 0.0,
    beta: float = 1.0,
    layers: Sequence[int] | None = None,
) -> np.ndarray:
    """Cross energies of the requested layers, in layer order."""
    if not isinstance(slices, Mapping):
        slices = dict(enumerate(slices))
    if layers is None:
        layers = sorted(slices)
    out = []
    for layer in layers:
        if layer not in slices:
            raise LookupError(f"no attention slice for layer {layer}")
        out.append(cross_energy(slices[layer], alpha, beta))
    return np.array(out)
