"""Training objectives: contrastive representation losses, consistency with a
mean-entropy regulariser, and the baseline alignment strategies
(distribution alignment, confidence masking, CORAL).

Differentiable inputs are :class:`~flipclass.autodiff.Var` objects; teacher
probabilities and labels are plain arrays and act as constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import linalg
from .errors import DomainError, ShapeError

PROB_TOL = 1e-9


@dataclass
class LossConfig:
    lambda_balance: float = 0.35
    tau_u: float = 0.07
    tau_c: float = 1.0
    tau_t: float = 0.07
    tau_s: float = 0.1
    epsilon_me: float = 1.0
    da_momentum: float = 0.999
    fixmatch_threshold: float = 0.95
    coral_weight: float = 1.0

    def __post_init__(self):
        for name in ("tau_u", "tau_c", "tau_t", "tau_s"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if not 0 <= self.lambda_balance <= 1:
            raise DomainError("lambda_balance must lie in [0, 1]")
        if not 0 < self.fixmatch_threshold <= 1:
            raise DomainError("fixmatch_threshold must lie in (0, 1]")
        if not 0 <= self.da_momentum < 1:
            raise DomainError("da_momentum must lie in [0, 1)")


@dataclass
class BatchViews:
    """Everything the losses need from one mini-batch.

    ``student_logits`` are the raw prototype scores of the student branch; the
    student probabilities are ``softmax(student_logits / tau_s)``.
    ``teacher_probs`` are the (constant) pseudo-labels. ``labeled`` indexes the
    labeled rows and ``labels`` holds their class ids in the same order.
    """

    student_logits: ad.Var
    teacher_probs: np.ndarray
    features: ad.Var
    features_prime: ad.Var | np.ndarray
    labeled: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    unlabeled_weights: np.ndarray | None = None
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labeled = np.asarray(self.labeled, dtype=np.intp)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        self.teacher_probs = linalg.as_matrix(self.teacher_probs)
        n, k = self.student_logits.shape
        if self.teacher_probs.shape != (n, k):
            raise ShapeError("teacher probabilities must match the student logits")
        if self.labeled.shape != self.labels.shape:
            raise ShapeError("one label per labeled index is required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= k):
            raise DomainError("label outside the class range")
        _check_probs(self.teacher_probs)

    @property
    def n(self) -> int:
        return self.student_logits.shape[0]

    @property
    def n_classes(self) -> int:
        return self.student_logits.shape[1]

    @property
    def unlabeled(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.labeled] = False
        return np.flatnonzero(mask)

    def positive_sets(self) -> list[np.ndarray]:
        """For each labeled row, the positions (within the labeled subset) of the
        *other* labeled rows sharing its class."""
        y = self.labels
        return [np.flatnonzero((y == y[i]) & (np.arange(y.size) != i)) for i in range(y.size)]


def _check_probs(p: np.ndarray) -> None:
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > PROB_TOL):
        raise DomainError("rows must be probability vectors")


def _const_like(var: ad.Var, x) -> ad.Var:
    return x if isinstance(x, ad.Var) else var.tape.const(x)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(q, p) -> np.ndarray:
    """Row-wise ``-sum_k q_k log p_k`` for probability rows (numeric helper)."""
    q, p = linalg.as_matrix(q), linalg.as_matrix(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * np.log(p), 0.0)
    return -terms.sum(axis=1)


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def mean_entropy(student_logits: ad.Var, tau_s: float) -> ad.Var:
    """Entropy of the batch-mean student prediction, ``H(mean_i p_i)``."""
    pbar = ad.mean(ad.row_softmax(student_logits / tau_s), axis=0)
    return -ad.sum(pbar * ad.log(pbar))


def consistency_loss(views: BatchViews, cfg: LossConfig) -> ad.Var:
    """``(1 - lam) * [mean_unl CE(q', p) - eps H(p_bar)] + lam * mean_lab CE(y, p)``.

    A missing part (no unlabeled or no labeled rows) is dropped.
    """
    logits = views.student_logits
    lam = cfg.lambda_balance
    terms = []
    unl = views.unlabeled
    if unl.size:
        w = None if views.unlabeled_weights is None else np.asarray(views.unlabeled_weights)[unl]
        ce = ad.cross_entropy_with_soft_targets(ad.take_rows(logits, unl) / cfg.tau_s, views.teacher_probs[unl], w)
        unsup = ce - cfg.epsilon_me * mean_entropy(logits, cfg.tau_s)
        terms.append((1.0 - lam) * unsup)
    if views.labeled.size:
        y = one_hot(views.labels, views.n_classes)
        sup = ad.cross_entropy_with_soft_targets(ad.take_rows(logits, views.labeled) / cfg.tau_s, y)
        terms.append(lam * sup)
    if not terms:
        raise DomainError("empty batch")
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def infonce_loss(views: BatchViews, cfg: LossConfig) -> ad.Var:
    """Self-supervised contrastive loss: ``z'_i`` is the positive of ``z_i`` and the
    denominator runs over every second-view feature of the batch."""
    z = views.features
    if z.shape[0] < 2:
        raise DomainError("contrastive losses need a batch of at least 2")
    zp = _const_like(z, views.features_prime)
    logits = (z @ zp.T) / cfg.tau_u
    return ad.cross_entropy_with_soft_targets(logits, np.eye(z.shape[0]))


def supcon_loss(views: BatchViews, cfg: LossConfig) -> ad.Var:
    """Supervised contrastive loss over the labeled subset.

    Row ``i`` averages ``-log softmax`` over its positives (other labeled rows of
    the same class); rows without positives are skipped and counted in
    ``views.stats['supcon_skipped']``.
    """
    z = views.features
    if z.shape[0] < 2:
        raise DomainError("contrastive losses need a batch of at least 2")
    lab = views.labeled
    pos = views.positive_sets()
    targets = np.zeros((lab.size, lab.size))
    valid = np.zeros(lab.size, dtype=bool)
    for i, p in enumerate(pos):
        if p.size:
            targets[i, p] = 1.0 / p.size
            valid[i] = True
    skipped = int(lab.size - valid.sum())
    views.stats["supcon_skipped"] = views.stats.get("supcon_skipped", 0) + skipped
    if not valid.any():
        return z.tape.const(np.zeros((1, 1)))
    zl = ad.take_rows(z, lab)
    zp = ad.take_rows(_const_like(z, views.features_prime), lab)
    logits = (zl @ zp.T) / cfg.tau_c
    weights = valid * (lab.size / valid.sum())
    return ad.cross_entropy_with_soft_targets(logits, targets, weights)


def rep_loss(views: BatchViews, cfg: LossConfig) -> ad.Var:
    lam = cfg.lambda_balance
    return (1.0 - lam) * infonce_loss(views, cfg) + lam * supcon_loss(views, cfg)


def loss_terms(views: BatchViews, cfg: LossConfig) -> dict[str, ad.Var]:
    rep = rep_loss(views, cfg)
    cons = consistency_loss(views, cfg)
    return {"rep": rep, "cons": cons, "total": rep + cons}


def total_loss(views: BatchViews, cfg: LossConfig) -> ad.Var:
    """``L_rep + L_cons``."""
    return loss_terms(views, cfg)["total"]


# -- baseline alignment strategies -----------------------------------------


def distribution_alignment(q, prior, running_avg) -> np.ndarray:
    """``normalize(q * prior / running_avg)`` per row; the running average is
    floored at 1e-8 before dividing."""
    q = linalg.as_matrix(q)
    _check_probs(q)
    prior = np.asarray(prior, dtype=np.float64).ravel()
    ra = np.maximum(np.asarray(running_avg, dtype=np.float64).ravel(), 1e-8)
    if prior.size != q.shape[1] or ra.size != q.shape[1]:
        raise ShapeError("prior and running average must have one entry per class")
    scaled = q * (prior / ra)
    return scaled / scaled.sum(axis=1, keepdims=True)


class DistributionAligner:
    """Stateful distribution alignment: keeps the running mean of teacher
    predictions and rescales each batch toward ``prior``."""

    def __init__(self, n_classes: int, momentum: float, prior=None):
        self.momentum = float(momentum)
        self.prior = np.full(n_classes, 1.0 / n_classes) if prior is None else np.asarray(prior, dtype=np.float64)
        self.running_avg = np.full(n_classes, 1.0 / n_classes)

    def __call__(self, q) -> np.ndarray:
        q = linalg.as_matrix(q)
        m = self.momentum
        self.running_avg = m * self.running_avg + (1.0 - m) * q.mean(axis=0)
        return distribution_alignment(q, self.prior, self.running_avg)


def confidence_mask(q, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Rows whose top probability reaches ``threshold`` and their argmax labels
    (ties go to the lowest class index)."""
    if not 0 <= threshold <= 1:
        raise DomainError("threshold must lie in [0, 1]")
    q = linalg.as_matrix(q)
    return q.max(axis=1) >= threshold, np.argmax(q, axis=1)


def _covariance(x: ad.Var) -> ad.Var:
    n = x.shape[0]
    xc = x - ad.mean(x, axis=0)
    return (xc.T @ xc) / (n - 1)


def coral_loss(S, T):
    """``||C_S - C_T||_F^2`` with unbiased covariances.

    Returns a float for array inputs and a ``Var`` when either input is a ``Var``.
    """
    for x in (S, T):
        shape = x.shape
        if len(shape) != 2 or shape[0] < 2:
            raise DomainError("CORAL needs at least two rows per batch")
    if S.shape[1] != T.shape[1]:
        raise ShapeError("feature widths differ")
    if not isinstance(S, ad.Var) and not isinstance(T, ad.Var):
        tape = ad.Tape()
        return coral_loss(tape.const(S), tape.const(T)).item()
    tape = S.tape if isinstance(S, ad.Var) else T.tape
    S, T = _const_like_tape(tape, S), _const_like_tape(tape, T)
    d = _covariance(S) - _covariance(T)
    return ad.sum(d * d)


def _const_like_tape(tape: ad.Tape, x) -> ad.Var:
    return x if isinstance(x, ad.Var) else tape.const(x)
