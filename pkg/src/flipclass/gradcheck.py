"""Finite-difference verification suite shared by the tests and ``flipclass gradcheck``.

Each check compares an analytic gradient with central differences and yields
a named :class:`~flipclass.autodiff.CheckReport`. Non-scalar ops are reduced
with a fixed random weighting ``sum(R * op(x))`` so every Jacobian entry
contributes.
"""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from . import linalg
from .align import AttentionSlice, cross_energy, posterior_gradient, prior_energy
from .encoder import EncoderConfig, EncoderParams, classify, forward
from .objectives import BatchViews, LossConfig, total_loss

OP_REL_TOL = 1e-4
ALIGN_REL_TOL = 1e-5
ABS_FLOOR = 1e-8


def _gauss(stream, r, c, std=1.0):
    return linalg.rng_gaussian(stream, r, c, 0.0, std)


def _dims(stream) -> tuple[int, int, int]:
    return tuple(int(v) for v in stream.generator.integers(2, 9, size=3))


def _weighted(tape: ad.Tape, out: ad.Var, R: np.ndarray) -> ad.Var:
    return ad.sum(out * tape.const(R))


def op_cases(seed: int = 0) -> list[tuple[str, Callable, list[np.ndarray]]]:
    """``(name, fn(tape, *vars) -> 1x1 Var, params)`` for every recorded op."""
    s = linalg.RngStream(seed, 40)
    n, m, k = _dims(s)
    A, B, C = _gauss(s, n, m), _gauss(s, m, k), _gauss(s, n, m)
    row, col = _gauss(s, 1, m), _gauss(s, n, 1)
    Rnm, Rnk, Rmn = _gauss(s, n, m), _gauss(s, n, k), _gauss(s, m, n)
    pos = linalg.rng_uniform(s, n, m, 0.5, 2.0)
    # keep relu inputs away from the kink
    away = A + np.sign(A) * 0.05
    idx = s.generator.integers(0, n, size=n + 2)
    Ridx = _gauss(s, idx.size, m)
    targets = linalg.row_softmax(_gauss(s, n, m))
    weights = linalg.rng_uniform(s, 1, n, 0.2, 1.5)[0]
    Rsum0, Rsum1 = _gauss(s, 1, m), _gauss(s, n, 1)

    cases = [
        ("add", lambda t, a, b: _weighted(t, ad.add(a, b), Rnm), [A, C]),
        ("add_row_broadcast", lambda t, a, r: _weighted(t, ad.add(a, r), Rnm), [A, row]),
        ("subtract", lambda t, a, b: _weighted(t, ad.subtract(a, b), Rnm), [A, C]),
        ("subtract_col_broadcast", lambda t, a, c: _weighted(t, ad.subtract(a, c), Rnm), [A, col]),
        ("multiply", lambda t, a, b: _weighted(t, ad.multiply(a, b), Rnm), [A, C]),
        ("multiply_row_broadcast", lambda t, a, r: _weighted(t, ad.multiply(a, r), Rnm), [A, row]),
        ("scale", lambda t, a: _weighted(t, ad.scale(a, -1.7), Rnm), [A]),
        ("matmul", lambda t, a, b: _weighted(t, ad.matmul(a, b), Rnk), [A, B]),
        ("transpose", lambda t, a: _weighted(t, ad.transpose(a), Rmn), [A]),
        ("take_rows", lambda t, a: _weighted(t, ad.take_rows(a, idx), Ridx), [A]),
        ("relu", lambda t, a: _weighted(t, ad.relu(a), Rnm), [away]),
        ("gelu", lambda t, a: _weighted(t, ad.gelu(a), Rnm), [A]),
        ("log", lambda t, a: _weighted(t, ad.log(a), Rnm), [pos]),
        ("exp", lambda t, a: _weighted(t, ad.exp(a), Rnm), [A]),
        ("row_softmax", lambda t, a: _weighted(t, ad.row_softmax(a), Rnm), [A]),
        ("row_l2_normalize", lambda t, a: _weighted(t, ad.row_l2_normalize(a), Rnm), [A]),
        ("layer_norm", lambda t, a: _weighted(t, ad.layer_norm(a), Rnm), [A]),
        ("sum", lambda t, a: ad.sum(a), [A]),
        ("sum_axis0", lambda t, a: _weighted(t, ad.sum(a, axis=0), Rsum0), [A]),
        ("sum_axis1", lambda t, a: _weighted(t, ad.sum(a, axis=1), Rsum1), [A]),
        ("mean", lambda t, a: ad.mean(a), [A]),
        ("mean_axis0", lambda t, a: _weighted(t, ad.mean(a, axis=0), Rsum0), [A]),
        ("mean_axis1", lambda t, a: _weighted(t, ad.mean(a, axis=1), Rsum1), [A]),
        ("cross_entropy", lambda t, a: ad.cross_entropy_with_soft_targets(a, targets), [A]),
        ("cross_entropy_weighted", lambda t, a: ad.cross_entropy_with_soft_targets(a, targets, weights), [A]),
    ]
    return cases


def check_ops(seed: int = 0, rel_tol: float = OP_REL_TOL) -> Iterator[tuple[str, ad.CheckReport]]:
    for name, fn, params in op_cases(seed):
        yield name, ad.check_tape_function(fn, params, rel_tol=rel_tol, abs_floor=ABS_FLOOR)


def align_instance(stream: linalg.RngStream) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Random ``(Q_s, K_t, alpha, beta)`` with ``N_s, N_t <= 8`` and ``d_k <= 16``."""
    g = stream.generator
    n_s, n_t, d = int(g.integers(1, 9)), int(g.integers(1, 9)), int(g.integers(1, 17))
    Q = _gauss(stream, n_s, d, 0.5)
    K = _gauss(stream, n_t, d, 0.5)
    alpha = float(g.choice([0.0, 0.5, 1.0]))
    beta = float(g.choice([0.5, 1.0, 2.0]))
    return Q, K, alpha, beta


def check_posterior_gradient(Q, K, alpha, beta, rel_tol: float = ALIGN_REL_TOL) -> ad.CheckReport:
    """Posterior gradient against central differences of ``-(cross + prior)``."""

    def f(ps):
        s = AttentionSlice(Q, ps[0])
        return -(cross_energy(s, alpha, beta) + prior_energy(ps[0]))

    def grad(ps):
        return [posterior_gradient(AttentionSlice(Q, ps[0]), alpha, beta)]

    return ad.finite_diff_check(f, [K], grad, eps=1e-5, rel_tol=rel_tol, abs_floor=ABS_FLOOR)


def check_align(n_instances: int = 20, seed: int = 0) -> Iterator[tuple[str, ad.CheckReport]]:
    stream = linalg.RngStream(seed, 41)
    for i in range(n_instances):
        yield f"posterior_gradient[{i}]", check_posterior_gradient(*align_instance(stream))


def encoder_loss_check(seed: int = 0, layer_norm: bool = False, rel_tol: float = OP_REL_TOL) -> ad.CheckReport:
    """Full encoder + training loss on a 4-sample batch, every parameter checked."""
    cfg = EncoderConfig(d_in=5, n_classes=4, d_model=6, d_ff=8, n_blocks=2, layer_norm=layer_norm)
    s = linalg.RngStream(seed, 42)
    base = EncoderParams.init(cfg, s)
    x = _gauss(s, 4, cfg.d_in)
    teacher = forward(x + _gauss(s, 4, cfg.d_in, 0.1), base)
    q = classify(teacher.features, base["prototypes"], 0.07)
    names = base.names()
    loss_cfg = LossConfig()

    def loss(ps):
        tape = ad.Tape()
        art = forward(x, EncoderParams(cfg, dict(zip(names, ps))), tape)
        views = BatchViews(art.logit_var, q, art.feature_var, teacher.features, [0, 2], [1, 1])
        return tape, art, total_loss(views, loss_cfg)

    def f(ps):
        return loss(ps)[2].item()

    def grad(ps):
        tape, art, out = loss(ps)
        g = ad.backward(tape, out)
        return [g[art.param_vars[n].id] for n in names]

    return ad.finite_diff_check(f, [base[n] for n in names], grad, rel_tol=rel_tol, abs_floor=ABS_FLOOR)


def run_all(seed: int = 0) -> list[tuple[str, ad.CheckReport]]:
    rows = list(check_ops(seed))
    rows += list(check_align(20, seed))
    rows.append(("encoder_loss", encoder_loss_check(seed)))
    rows.append(("encoder_loss_layer_norm", encoder_loss_check(seed, layer_norm=True)))
    return rows
