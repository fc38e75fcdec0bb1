"""Synthetic generalized-category-discovery data and vector augmentations.

Classes are isotropic Gaussian blobs. ``separation`` is the ratio between the
(minimum) distance of two class centroids and ``within_std``, the RMS radius
of a class (per-coordinate std ``within_std / sqrt(d_in)``).

Weak and strong augmentations stand in for the image pipelines: weak adds
small Gaussian noise, strong adds larger noise and zeroes a random subset of
coordinates.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import linalg
from .errors import DomainError, ShapeError

FORMAT_HEADER = "# flipclass-dataset 1"
LABELED, UNLABELED, TEST = "L", "U", "T"

# stream ids under the dataset seed
_CENTROID_STREAM, _SAMPLE_STREAM, _SPLIT_STREAM = 1, 2, 3


@dataclass
class SyntheticGcdSpec:
    d_in: int = 32
    k_old: int = 5
    k_new: int = 5
    samples_per_class: int = 200
    separation: float = 3.0
    label_fraction: float = 0.5
    seed: int = 0
    within_std: float = 1.0
    test_fraction: float = 0.2
    class_counts: list | None = None  # optional per-class override of samples_per_class

    def __post_init__(self):
        if self.k_old < 1 or self.k_new < 0:
            raise DomainError("need k_old >= 1 and k_new >= 0")
        if not 0 < self.label_fraction <= 1:
            raise DomainError("label_fraction must lie in (0, 1]")
        if not self.separation > 0 or not self.within_std > 0:
            raise DomainError("separation and within_std must be positive")
        if self.d_in < 1 or self.samples_per_class < 1:
            raise DomainError("d_in and samples_per_class must be positive")
        if not 0 <= self.test_fraction < 1:
            raise DomainError("test_fraction must lie in [0, 1)")
        if self.class_counts is not None:
            self.class_counts = [int(c) for c in self.class_counts]
            if len(self.class_counts) != self.n_classes or min(self.class_counts) < 1:
                raise DomainError("class_counts needs one positive count per class")

    @property
    def n_classes(self) -> int:
        return self.k_old + self.k_new

    def count(self, cls: int) -> int:
        return self.class_counts[cls] if self.class_counts else self.samples_per_class


@dataclass
class GcdDataset:
    """All samples with their class ids and split tags (``L``, ``U`` or ``T``).

    Classes ``0 .. k_old-1`` are old, the rest are new. Sample order is a
    random permutation so any contiguous chunk mixes classes.
    """

    spec: SyntheticGcdSpec
    X: np.ndarray
    y: np.ndarray
    split: np.ndarray
    centroids: np.ndarray | None = field(default=None, repr=False)

    @property
    def old_classes(self) -> np.ndarray:
        return np.arange(self.spec.k_old)

    @property
    def new_classes(self) -> np.ndarray:
        return np.arange(self.spec.k_old, self.spec.n_classes)

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    def is_old(self, cls) -> np.ndarray:
        return np.asarray(cls) < self.spec.k_old

    def indices(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.split == tag)

    @property
    def labeled_idx(self) -> np.ndarray:
        return self.indices(LABELED)

    @property
    def unlabeled_idx(self) -> np.ndarray:
        return self.indices(UNLABELED)

    @property
    def test_idx(self) -> np.ndarray:
        return self.indices(TEST)

    @property
    def train_idx(self) -> np.ndarray:
        return np.flatnonzero(self.split != TEST)

    @property
    def degenerate(self) -> bool:
        """True when the unlabeled set is empty."""
        return self.unlabeled_idx.size == 0

    def dump(self, path) -> None:
        """Write the structured-text format (17 significant digits, exact round trip)."""
        lines = [
            FORMAT_HEADER,
            "# spec " + json.dumps(asdict(self.spec), sort_keys=True),
            "# registry old=" + ",".join(map(str, self.old_classes)) + " new=" + ",".join(map(str, self.new_classes)),
            "# columns index split class values...",
        ]
        for i in range(self.X.shape[0]):
            vals = " ".join(format(float(v), ".17g") for v in self.X[i])
            lines.append(f"{i} {self.split[i]} {int(self.y[i])} {vals}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "GcdDataset":
        text = Path(path).read_text().splitlines()
        if not text or text[0].strip() != FORMAT_HEADER:
            raise DomainError(f"{path}: not a flipclass dataset file")
        spec = None
        rows = []
        for lineno, line in enumerate(text[1:], start=2):
            if line.startswith("# spec "):
                spec = SyntheticGcdSpec(**json.loads(line[len("# spec "):]))
            elif line.startswith("#") or not line.strip():
                continue
            else:
                parts = line.split()
                if len(parts) < 4:
                    raise DomainError(f"{path}:{lineno}: malformed sample line")
                rows.append(parts)
        if spec is None:
            raise DomainError(f"{path}: missing spec header")
        idx = np.array([int(r[0]) for r in rows])
        if not np.array_equal(idx, np.arange(len(rows))):
            raise DomainError(f"{path}: sample indices must be 0..n-1 in order")
        X = np.array([[float(v) for v in r[3:]] for r in rows], dtype=np.float64)
        if X.shape[1] != spec.d_in:
            raise ShapeError(f"{path}: rows have {X.shape[1]} values, spec says {spec.d_in}")
        y = np.array([int(r[2]) for r in rows])
        split = np.array([r[1] for r in rows])
        return cls(spec, X, y, split)


def _centroids(spec: SyntheticGcdSpec, stream: linalg.RngStream) -> np.ndarray:
    """Centroids on an orthogonal frame (or its +/- cross-polytope) of radius
    ``separation * within_std / sqrt(2)``: every pairwise distance is at least
    ``separation * within_std``."""
    k, d = spec.n_classes, spec.d_in
    if k > 2 * d:
        raise DomainError(
            f"cannot place {k} centroids at separation {spec.separation} in {d} dimensions "
            f"(at most {2 * d} fit on a cross-polytope)"
        )
    radius = spec.separation * spec.within_std / math.sqrt(2.0)
    frame, _ = np.linalg.qr(linalg.rng_gaussian(stream, d, d))
    axes = [frame[:, i] for i in range(d)] + [-frame[:, i] for i in range(d)]
    order = linalg.rng_permutation(stream, d)
    picks = [axes[i] for i in order[: min(k, d)]] + [axes[d + i] for i in order[: max(k - d, 0)]]
    return radius * np.array(picks)


def generate(spec: SyntheticGcdSpec) -> GcdDataset:
    centroids = _centroids(spec, linalg.RngStream(spec.seed, _CENTROID_STREAM))
    sample_stream = linalg.RngStream(spec.seed, _SAMPLE_STREAM)
    split_stream = linalg.RngStream(spec.seed, _SPLIT_STREAM)
    sd = spec.within_std / math.sqrt(spec.d_in)
    xs, ys, tags = [], [], []
    for c in range(spec.n_classes):
        n_train = spec.count(c)
        n_test = int(round(spec.test_fraction * n_train))
        pts = centroids[c] + linalg.rng_gaussian(sample_stream, n_train + n_test, spec.d_in, 0.0, sd)
        t = np.full(n_train + n_test, UNLABELED)
        t[n_train:] = TEST
        if c < spec.k_old:
            n_lab = int(round(spec.label_fraction * n_train))
            t[linalg.rng_permutation(split_stream, n_train)[:n_lab]] = LABELED
        xs.append(pts)
        ys.append(np.full(n_train + n_test, c))
        tags.append(t)
    X, y, split = np.vstack(xs), np.concatenate(ys), np.concatenate(tags)
    perm = linalg.rng_permutation(split_stream, X.shape[0])
    return GcdDataset(spec, np.ascontiguousarray(X[perm]), y[perm], split[perm], centroids)


# -- augmentation ----------------------------------------------------------


@dataclass
class AugmentConfig:
    sigma_w: float = 0.1
    sigma_s: float = 0.4
    mask_fraction: float = 0.25

    def __post_init__(self):
        if self.sigma_w < 0 or not self.sigma_w < self.sigma_s:
            raise DomainError("need 0 <= sigma_w < sigma_s")
        if not 0 <= self.mask_fraction <= 0.5:
            raise DomainError("mask_fraction must lie in [0, 0.5]")


@dataclass
class AugmentedPair:
    weak: np.ndarray
    strong: np.ndarray
    index: np.ndarray


def _rows(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return linalg.as_matrix(x), False


def weak_aug(x, stream: linalg.RngStream, sigma_w: float = 0.1) -> np.ndarray:
    """``x`` plus N(0, sigma_w^2) noise; accepts one vector or a matrix of rows."""
    if sigma_w < 0:
        raise DomainError("sigma_w must be nonnegative")
    rows, flat = _rows(x)
    out = rows if sigma_w == 0 else rows + linalg.rng_gaussian(stream, *rows.shape, 0.0, sigma_w)
    return out[0] if flat else out.copy()


def strong_aug(x, stream: linalg.RngStream, sigma_s: float = 0.4, mask_fraction: float = 0.25) -> np.ndarray:
    """``x`` plus N(0, sigma_s^2) noise, then ``ceil(mask_fraction * d)`` random
    coordinates per row set to zero."""
    if sigma_s < 0:
        raise DomainError("sigma_s must be nonnegative")
    if not 0 <= mask_fraction <= 0.5:
        raise DomainError("mask_fraction must lie in [0, 0.5]")
    rows, flat = _rows(x)
    n, d = rows.shape
    out = rows + linalg.rng_gaussian(stream, n, d, 0.0, sigma_s)
    k = math.ceil(mask_fraction * d)
    if k:
        keys = linalg.rng_uniform(stream, n, d)
        drop = np.argpartition(keys, k - 1, axis=1)[:, :k]
        out[np.arange(n)[:, None], drop] = 0.0
    return out[0] if flat else out


def augment_pair(x, index, stream: linalg.RngStream, cfg: AugmentConfig) -> AugmentedPair:
    weak = weak_aug(x, stream, cfg.sigma_w)
    strong = strong_aug(x, stream, cfg.sigma_s, cfg.mask_fraction)
    return AugmentedPair(weak, strong, np.asarray(index))
