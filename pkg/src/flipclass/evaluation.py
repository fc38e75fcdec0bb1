"""Clustering accuracy under optimal one-to-one matching, categorize-error
diagnostics and teacher/student learning-gap summaries."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, ShapeError, SizeError

REPORT_FIELDS = ("acc_all", "acc_old", "acc_new", "true_old", "false_old", "true_new", "false_new")
ERROR_KEYS = ("true_old", "false_old", "true_new", "false_new")


def linear_assignment(cost) -> np.ndarray:
    """Minimum-cost perfect matching of a square cost matrix.

    Shortest-augmenting-path Hungarian method with row/column potentials,
    O(n^3). Returns ``col`` such that row ``i`` is matched to column ``col[i]``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise ShapeError("cost matrix must be square")
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.intp)  # p[j]: row matched to column j (1-based, 0 = none)
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col = np.empty(n, dtype=np.intp)
    for j in range(1, n + 1):
        col[p[j] - 1] = j - 1
    return col


def contingency(preds, truths, size: int) -> np.ndarray:
    """``w[c, k]`` = number of samples predicted as cluster ``c`` with true class ``k``."""
    w = np.zeros((size, size), dtype=np.int64)
    np.add.at(w, (preds, truths), 1)
    return w


def _ids(preds, truths) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.intp).ravel()
    truths = np.asarray(truths, dtype=np.intp).ravel()
    if preds.shape != truths.shape:
        raise ShapeError(f"{preds.size} predictions for {truths.size} labels")
    if preds.size and (preds.min() < 0 or truths.min() < 0):
        raise DomainError("ids must be nonnegative")
    return preds, truths


@dataclass
class EvalReport:
    acc_all: float
    acc_old: float
    acc_new: float
    confusion: np.ndarray
    categorize_errors: dict
    assignment: dict = field(default_factory=dict)  # predicted cluster -> class id

    def as_dict(self) -> dict:
        out = {"acc_all": self.acc_all, "acc_old": self.acc_old, "acc_new": self.acc_new}
        out.update({k: int(self.categorize_errors[k]) for k in ERROR_KEYS})
        return out

    def to_text(self) -> str:
        lines = [f"{k} = {v!r}" for k, v in self.as_dict().items()]
        lines.append("assignment = " + " ".join(f"{c}:{k}" for c, k in sorted(self.assignment.items())))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def read_report(path) -> dict:
    """Parse the scalar fields of a report written by :meth:`EvalReport.write`."""
    out = {}
    for line in Path(path).read_text().splitlines():
        key, _, value = (s.strip() for s in line.partition("="))
        if key in REPORT_FIELDS:
            out[key] = float(value) if key.startswith("acc") else int(value)
    return out


def hungarian_accuracy(preds, truths, old_classes, n_classes: int | None = None) -> EvalReport:
    """Accuracy after matching clusters to classes with one joint assignment.

    ``acc_old``/``acc_new`` are accuracies over the samples whose true class is
    old/new under that single assignment (NaN if a subset is empty).
    """
    preds, truths = _ids(preds, truths)
    size = max(int(preds.max(initial=-1)) + 1, int(truths.max(initial=-1)) + 1, n_classes or 0)
    if n_classes is not None and preds.size and preds.max() >= n_classes:
        raise DomainError(f"cluster id {preds.max()} exceeds the configured {n_classes} clusters")
    w = contingency(preds, truths, size)
    col = linear_assignment(w.max(initial=0) - w)
    mapping = {int(c): int(col[c]) for c in range(size)}
    mapped = col[preds]
    correct = mapped == truths
    old = np.isin(truths, np.asarray(list(old_classes), dtype=np.intp))
    n = truths.size

    def frac(mask):
        return float(correct[mask].sum() / mask.sum()) if mask.any() else float("nan")

    return EvalReport(
        acc_all=float(correct.sum() / n) if n else float("nan"),
        acc_old=frac(old),
        acc_new=frac(~old),
        confusion=w,
        categorize_errors=categorize_errors(mapped, truths, old_classes, size),
        assignment=mapping,
    )


def brute_force_accuracy(preds, truths, k: int | None = None) -> float:
    """Best accuracy over all ``k!`` cluster-to-class bijections (``k <= 8``)."""
    preds, truths = _ids(preds, truths)
    if k is None:
        k = max(int(preds.max(initial=-1)), int(truths.max(initial=-1))) + 1
    if k > 8:
        raise SizeError(f"refusing to enumerate {k}! permutations")
    if preds.size == 0:
        return float("nan")
    if max(preds.max(), truths.max()) >= k:
        raise DomainError("ids exceed k")
    best = 0
    for perm in itertools.permutations(range(k)):
        hits = int(np.count_nonzero(np.asarray(perm)[preds] == truths))
        best = max(best, hits)
    return best / preds.size


def categorize_errors(mapped_preds, truths, old_classes, n_classes: int) -> dict:
    """Counts of cross- and within-partition mistakes.

    ``true_old``: old sample predicted as another old class; ``false_old``: old
    sample predicted as a new class; ``true_new``/``false_new`` symmetrically.
    """
    preds, truths = _ids(mapped_preds, truths)
    if preds.size and max(preds.max(), truths.max()) >= n_classes:
        raise DomainError("class id outside the registry")
    old_set = np.asarray(list(old_classes), dtype=np.intp)
    t_old = np.isin(truths, old_set)
    p_old = np.isin(preds, old_set)
    wrong = preds != truths
    return {
        "true_old": int(np.sum(t_old & p_old & wrong)),
        "false_old": int(np.sum(t_old & ~p_old)),
        "true_new": int(np.sum(~t_old & ~p_old & wrong)),
        "false_new": int(np.sum(~t_old & p_old)),
    }


@dataclass
class LearningGap:
    gaps: dict  # split -> per-epoch teacher - student accuracy
    summary: dict  # split -> mean gap over the last ``window`` epochs


def learning_gap(teacher: dict, student: dict, window: int = 10) -> LearningGap:
    """Per-epoch ``teacher - student`` accuracy for each split key (e.g. all/old/new)."""
    if set(teacher) != set(student):
        raise ShapeError("teacher and student series cover different splits")
    gaps, summary = {}, {}
    for key in teacher:
        t = np.asarray(teacher[key], dtype=np.float64)
        s = np.asarray(student[key], dtype=np.float64)
        if t.shape != s.shape:
            raise ShapeError(f"series for {key!r} differ in length")
        gaps[key] = t - s
        summary[key] = float(np.mean(gaps[key][-window:])) if t.size else float("nan")
    return LearningGap(gaps, summary)
