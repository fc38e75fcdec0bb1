import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flipclass import autodiff as ad
from flipclass import gradcheck, linalg
from flipclass.errors import DomainError, ShapeError


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("name", [c[0] for c in gradcheck.op_cases(0)])
def test_op_matches_finite_differences(name, seed):
    fn, params = {c[0]: c[1:] for c in gradcheck.op_cases(seed)}[name]
    report = ad.check_tape_function(fn, params, rel_tol=1e-4)
    assert report.passed, str(report)


class TestFiniteDiffCheck:
    def test_detects_wrong_gradient(self):
        x0 = np.array([[1.0, -2.0]])
        report = ad.finite_diff_check(lambda ps: float(np.sum(ps[0] ** 3)), [x0], lambda ps: [2 * ps[0] ** 2])
        assert not report.passed
        assert report.max_rel_err == pytest.approx(1 / 3, rel=1e-6)

    def test_sub_floor_differences_accepted(self):
        x0 = np.array([[0.0]])
        report = ad.finite_diff_check(lambda ps: 0.0, [x0], lambda ps: [np.array([[1e-9]])])
        assert report.passed and report.max_abs_err == pytest.approx(1e-9)

    def test_bad_eps(self):
        with pytest.raises(DomainError):
            ad.finite_diff_check(lambda ps: 0.0, [np.zeros((1, 1))], lambda ps: [np.zeros((1, 1))], eps=0)


class TestBackward:
    def test_half_squared_norm(self):
        w0 = linalg.rng_gaussian(linalg.RngStream(3), 3, 4)
        tape = ad.Tape()
        W = tape.param(w0)
        loss = 0.5 * ad.sum(W * W)
        np.testing.assert_array_equal(ad.backward(tape, loss)[W.id], w0)

    def test_constant_loss_zero_grads(self):
        tape = ad.Tape()
        W = tape.param(np.ones((2, 2)))
        c = tape.const(np.array([[3.0]]))
        g = ad.backward(tape, c * 2.0)
        np.testing.assert_array_equal(g[W.id], np.zeros((2, 2)))

    def test_shared_use_accumulates(self):
        tape = ad.Tape()
        x = tape.param(np.array([[2.0]]))
        g = ad.backward(tape, x * x + x)  # d/dx (x^2 + x) = 2x + 1
        assert g[x.id][0, 0] == 5.0

    def test_seed_linearity(self):
        s = linalg.RngStream(8)
        a0, b0 = linalg.rng_gaussian(s, 3, 4), linalg.rng_gaussian(s, 4, 2)
        s1, s2 = linalg.rng_gaussian(s, 3, 2), linalg.rng_gaussian(s, 3, 2)

        def grads(seed):
            tape = ad.Tape()
            a = tape.param(a0)
            out = ad.gelu(a @ tape.const(b0))
            return ad.backward(tape, out, seed)[a.id]

        np.testing.assert_allclose(grads(2.0 * s1 + 3.0 * s2), 2.0 * grads(s1) + 3.0 * grads(s2), atol=1e-12)

    def test_deterministic(self):
        def run():
            tape = ad.Tape()
            x = tape.param(linalg.rng_gaussian(linalg.RngStream(4), 5, 5))
            loss = ad.sum(ad.row_softmax(x @ x.T))
            return ad.backward(tape, loss)[x.id]

        assert run().tobytes() == run().tobytes()

    def test_non_scalar_loss_needs_seed(self):
        tape = ad.Tape()
        x = tape.param(np.ones((2, 2)))
        with pytest.raises(DomainError):
            ad.backward(tape, x * 2.0)
        with pytest.raises(ShapeError):
            ad.backward(tape, x * 2.0, np.ones((3, 3)))

    def test_constants_receive_no_gradient_path(self):
        tape = ad.Tape()
        c = tape.const(np.ones((2, 2)))
        out = ad.sum(c * 3.0)
        assert not out.requires_grad


class TestForwardValues:
    def test_matches_linalg_kernels_bitwise(self):
        s = linalg.RngStream(2)
        a0, b0 = linalg.rng_gaussian(s, 4, 3), linalg.rng_gaussian(s, 3, 5)
        tape = ad.Tape()
        a, b = tape.const(a0), tape.const(b0)
        assert (a @ b).value.tobytes() == linalg.matmul(a0, b0).tobytes()
        assert ad.row_softmax(a).value.tobytes() == linalg.row_softmax(a0).tobytes()
        assert ad.row_l2_normalize(a).value.tobytes() == linalg.row_l2_normalize(a0).tobytes()

    def test_gelu_reference_points(self):
        tape = ad.Tape()
        out = ad.gelu(tape.const(np.array([[0.0, 100.0, -100.0]]))).value
        np.testing.assert_allclose(out, [[0.0, 100.0, 0.0]], atol=1e-12)

    def test_layer_norm_standardises(self):
        tape = ad.Tape()
        y = ad.layer_norm(tape.const(linalg.rng_gaussian(linalg.RngStream(1), 4, 6, 3.0, 2.0))).value
        np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=1), 1, rtol=1e-4)

    def test_cross_entropy_uniform_logits(self):
        tape = ad.Tape()
        logits = tape.param(np.zeros((3, 4)))
        t = np.eye(4)[[0, 1, 3]]
        assert ad.cross_entropy_with_soft_targets(logits, t).item() == pytest.approx(np.log(4), abs=1e-15)

    def test_log_domain(self):
        tape = ad.Tape()
        with pytest.raises(DomainError):
            ad.log(tape.param(np.array([[0.0]])))

    def test_broadcast_mismatch(self):
        tape = ad.Tape()
        with pytest.raises(ShapeError):
            ad.add(tape.param(np.ones((2, 3))), tape.param(np.ones((3, 2))))

    def test_mixed_tapes_rejected(self):
        a = ad.Tape().param(np.ones((1, 1)))
        b = ad.Tape().param(np.ones((1, 1)))
        with pytest.raises(ValueError):
            a + b


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_matmul_chain_property(n, m, seed):
    s = linalg.RngStream(seed)
    a0, b0 = linalg.rng_gaussian(s, n, m), linalg.rng_gaussian(s, m, n)
    report = ad.check_tape_function(lambda t, a, b: ad.sum(ad.exp(ad.scale(a @ b, 0.3))), [a0, b0])
    assert report.passed, str(report)
