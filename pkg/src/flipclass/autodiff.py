"""Tape-based reverse-mode automatic differentiation over float64 matrices.

Every value on a tape is a 2-D array; scalars are ``1 x 1``. Forward values
are computed with the same numpy expressions as :mod:`flipclass.linalg`, so a
recorded op reproduces the kernel result bit for bit.

Example::

    tape = Tape()
    W = tape.param(w0)
    loss = 0.5 * ad.sum(W * W)
    grads = backward(tape, loss)
    grads[W.id]  # == w0
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import linalg
from .errors import DomainError, NumericError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass
class _Node:
    value: np.ndarray
    parents: tuple
    vjp: Callable | None
    requires_grad: bool
    op: str


class Tape:
    """Append-only record of operations; node ids are topologically ordered."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, value, parents=(), vjp=None, requires_grad=False, op="leaf") -> "Var":
        self.nodes.append(_Node(value, tuple(parents), vjp, requires_grad, op))
        return Var(self, len(self.nodes) - 1)

    def param(self, value) -> "Var":
        """Leaf whose gradient is wanted."""
        return self._push(linalg.as_matrix(value).copy(), requires_grad=True, op="param")

    def const(self, value) -> "Var":
        """Leaf treated as a constant (never receives gradient)."""
        return self._push(linalg.as_matrix(value), op="const")

    def value(self, var: "Var") -> np.ndarray:
        return self.nodes[var.id].value


class Var:
    __slots__ = ("tape", "id")

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.id].requires_grad

    @property
    def T(self) -> "Var":
        return transpose(self)

    def item(self) -> float:
        return float(self.value[0, 0])

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


def _lift(tape: Tape | None, x) -> Var:
    if isinstance(x, Var):
        return x
    if tape is None:
        raise TypeError("at least one operand must be a Var")
    return tape.const(np.full((1, 1), x) if np.isscalar(x) else x)


def _pair(a, b) -> tuple[Var, Var]:
    tape = a.tape if isinstance(a, Var) else getattr(b, "tape", None)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.tape is not b.tape:
        raise ValueError("operands live on different tapes")
    return a, b


def _record(value, parents: Sequence[Var], vjp, op: str) -> Var:
    tape = parents[0].tape
    needs = any(p.requires_grad for p in parents)
    return tape._push(value, [p.id for p in parents], vjp if needs else None, needs, op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(sa, sb) -> tuple:
    out = []
    for x, y in zip(sa, sb):
        if x != y and 1 not in (x, y):
            raise ShapeError(f"cannot broadcast {sa} with {sb}")
        out.append(max(x, y))
    return tuple(out)


# -- elementwise / structural ops ------------------------------------------


def add(a, b) -> Var:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, [a, b], lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def subtract(a, b) -> Var:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record(a.value - b.value, [a, b], lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "subtract")


def multiply(a, b) -> Var:
    """Elementwise (Hadamard) product with row/column broadcasting."""
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    av, bv = a.value, b.value
    return _record(
        av * bv, [a, b], lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "multiply"
    )


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return _record(a.value * c, [a], lambda g: (g * c,), "scale")


def matmul(a, b) -> Var:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    out = linalg.matmul(av, bv)
    return _record(out, [a, b], lambda g: (g @ bv.T, av.T @ g), "matmul")


def transpose(a: Var) -> Var:
    return _record(linalg.transpose(a.value), [a], lambda g: (np.ascontiguousarray(g.T),), "transpose")


def take_rows(a: Var, index) -> Var:
    index = np.asarray(index, dtype=np.intp)
    n, m = a.shape

    def vjp(g):
        out = np.zeros((n, m))
        np.add.at(out, index, g)
        return (out,)

    return _record(a.value[index], [a], vjp, "take_rows")


def relu(a: Var) -> Var:
    mask = a.value > 0
    return _record(np.where(mask, a.value, 0.0), [a], lambda g: (g * mask,), "relu")


def gelu(a: Var) -> Var:
    """GELU, tanh approximation; the backward differentiates the approximation."""
    x = a.value
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    out = 0.5 * x * (1.0 + t)
    dt = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt
    return _record(out, [a], lambda g: (g * deriv,), "gelu")


def log(a: Var) -> Var:
    x = a.value
    if np.any(x <= 0):
        raise DomainError("log of a nonpositive value")
    return _record(np.log(x), [a], lambda g: (g / x,), "log")


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return _record(out, [a], lambda g: (g * out,), "exp")


def row_softmax(a: Var) -> Var:
    s = linalg.row_softmax(a.value)
    return _record(s, [a], lambda g: (s * (g - np.sum(g * s, axis=1, keepdims=True)),), "row_softmax")


def row_l2_normalize(a: Var) -> Var:
    x = a.value
    y = linalg.row_l2_normalize(x)
    n = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    return _record(y, [a], lambda g: ((g - y * np.sum(g * y, axis=1, keepdims=True)) / n,), "row_l2_normalize")


def layer_norm(a: Var, eps: float = 1e-5) -> Var:
    """Per-row standardisation without affine parameters."""
    x = a.value
    mu = x.mean(axis=1, keepdims=True)
    sigma = np.sqrt(((x - mu) ** 2).mean(axis=1, keepdims=True) + eps)
    y = (x - mu) / sigma

    def vjp(g):
        return ((g - g.mean(axis=1, keepdims=True) - y * np.mean(g * y, axis=1, keepdims=True)) / sigma,)

    return _record(y, [a], vjp, "layer_norm")


def sum(a: Var, axis=None) -> Var:  # noqa: A001
    x = a.value
    shape = x.shape
    if axis is None:
        out = np.array([[x.sum()]])
    else:
        out = x.sum(axis=axis, keepdims=True)
    return _record(out, [a], lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Var, axis=None) -> Var:
    x = a.value
    shape = x.shape
    count = x.size if axis is None else shape[axis]
    if axis is None:
        out = np.array([[x.mean()]])
    else:
        out = x.mean(axis=axis, keepdims=True)
    return _record(out, [a], lambda g: (np.broadcast_to(g / count, shape).copy(),), "mean")


def cross_entropy_with_soft_targets(logits: Var, targets, weights=None) -> Var:
    """``sum_i w_i * (-sum_k t_ik log softmax(logits)_ik) / n`` as a ``1 x 1`` value.

    ``targets`` and ``weights`` are constants: no gradient flows to them.
    """
    targets = linalg.as_matrix(targets.value if isinstance(targets, Var) else targets)
    x = logits.value
    if targets.shape != x.shape:
        raise ShapeError(f"targets {targets.shape} do not match logits {x.shape}")
    n = x.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ShapeError("weights must have one entry per row")
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    logp = shifted - logz
    per_row = -np.sum(targets * logp, axis=1)
    out = np.array([[np.sum(w * per_row) / n]])
    p = np.exp(logp)

    def vjp(g):
        coef = (g[0, 0] * w / n)[:, None]
        return (coef * (p * targets.sum(axis=1, keepdims=True) - targets),)

    return _record(out, [logits], vjp, "cross_entropy")


# -- backward --------------------------------------------------------------


def backward(tape: Tape, loss: Var, seed=None) -> dict[int, np.ndarray]:
    """Reverse sweep from ``loss``; returns a gradient for every node id.

    Without ``seed`` the loss must be ``1 x 1`` and is seeded with 1. Nodes the
    loss does not depend on receive zeros.
    """
    if loss.tape is not tape:
        raise ValueError("loss does not belong to this tape")
    if seed is None:
        if loss.shape != (1, 1):
            raise DomainError(f"loss must be 1 x 1, got {loss.shape}")
        seed = np.ones((1, 1))
    else:
        seed = linalg.as_matrix(seed)
        if seed.shape != loss.shape:
            raise ShapeError(f"seed {seed.shape} does not match output {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: seed.copy()}
    nodes = tape.nodes
    for i in range(loss.id, -1, -1):
        g = grads.get(i)
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not nodes[pid].requires_grad:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return {i: grads[i] if i in grads else np.zeros_like(n.value) for i, n in enumerate(nodes)}


# -- finite differences ----------------------------------------------------


@dataclass
class CheckReport:
    max_rel_err: float  # over coordinates whose absolute difference exceeds the floor
    worst: tuple | None  # (param index, row, col) of the largest relative error
    passed: bool
    rel_tol: float
    max_abs_err: float = 0.0

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_err:.3e} (tol {self.rel_tol:g}) "
                f"max_abs_err={self.max_abs_err:.3e} worst={self.worst}")


def finite_diff_check(
    f: Callable[[list], float],
    params: Sequence[np.ndarray],
    grad: Callable[[list], Sequence[np.ndarray]],
    eps: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-8,
) -> CheckReport:
    """Compare ``grad(params)`` with central differences of ``f``.

    A coordinate passes when ``|a - n| <= abs_floor`` or
    ``|a - n| / max(|a|, |n|) <= rel_tol``; ``max_rel_err`` is taken over the
    coordinates that do not meet the absolute floor.
    """
    if not eps > 0:
        raise DomainError("eps must be positive")
    params = [linalg.as_matrix(p).copy() for p in params]
    analytic = [linalg.as_matrix(g) for g in grad(params)]
    worst, max_err, max_abs = None, 0.0, 0.0
    for k, p in enumerate(params):
        if analytic[k].shape != p.shape:
            raise ShapeError(f"gradient {k} has shape {analytic[k].shape}, param {p.shape}")
        for idx in np.ndindex(*p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            fp = float(f(params))
            p[idx] = orig - eps
            fm = float(f(params))
            p[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite function value at param {k} index {idx}")
            num = (fp - fm) / (2.0 * eps)
            a = float(analytic[k][idx])
            diff = abs(a - num)
            max_abs = max(max_abs, diff)
            err = 0.0 if diff <= abs_floor else diff / max(abs(a), abs(num))
            if worst is None or err > max_err:
                max_err, worst = err, (k, *idx)
    return CheckReport(max_err, worst, max_err <= rel_tol, rel_tol, max_abs)


def check_tape_function(
    fn: Callable[..., Var],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-8,
) -> CheckReport:
    """FD-check a scalar function built on a tape: ``fn(tape, *vars) -> Var``."""

    def f(ps):
        tape = Tape()
        return fn(tape, *[tape.param(p) for p in ps]).item()

    def grad(ps):
        tape = Tape()
        vs = [tape.param(p) for p in ps]
        out = fn(tape, *vs)
        g = backward(tape, out)
        return [g[v.id] for v in vs]

    return finite_diff_check(f, params, grad, eps=eps, rel_tol=rel_tol, abs_floor=abs_floor)
