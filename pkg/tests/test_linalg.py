import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flipclass import linalg
from flipclass.errors import DomainError, ShapeError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def naive_lse_mp(v, beta):
    """Unshifted sum evaluated at 50 significant digits."""
    import mpmath

    mpmath.mp.dps = 50
    s = mpmath.fsum(mpmath.exp(mpmath.mpf(beta) * mpmath.mpf(x)) for x in v)
    return float(mpmath.log(s) / beta)


class TestLse:
    def test_two_zeros(self):
        assert linalg.lse([0.0, 0.0], 1.0) == pytest.approx(math.log(2), abs=1e-15)

    def test_single_element(self):
        assert linalg.lse([5.0], 3.0) == 5.0

    def test_matches_extended_precision(self):
        v = linalg.rng_uniform(linalg.RngStream(7), 1, 20, -10, 10)[0]
        assert linalg.lse(v, 0.5) == pytest.approx(naive_lse_mp(v, 0.5), rel=1e-12)

    def test_no_overflow(self):
        assert linalg.lse([1000.0, 1000.0], 1.0) == pytest.approx(1000 + math.log(2))

    @pytest.mark.parametrize("v,beta", [([], 1.0), ([1.0], 0.0), ([1.0], -1.0)])
    def test_domain(self, v, beta):
        with pytest.raises(DomainError):
            linalg.lse(v, beta)

    @given(arrays(np.float64, st.integers(1, 30), elements=finite), st.floats(0.05, 20))
    def test_bounds(self, v, beta):
        gap = linalg.lse(v, beta) - v.max()
        assert -1e-12 <= gap <= math.log(v.size) / beta + 1e-12

    def test_row_lse_matches_lse(self):
        M = linalg.rng_gaussian(linalg.RngStream(1), 4, 7)
        np.testing.assert_allclose(linalg.row_lse(M, 2.0), [linalg.lse(r, 2.0) for r in M], rtol=1e-14)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_array_equal(linalg.softmax([0.0, 0.0]), [0.5, 0.5])

    def test_large_gap(self):
        p = linalg.softmax([1000.0, 0.0])
        assert p[0] == 1.0 and 0 <= p[1] < 1e-300

    def test_empty(self):
        with pytest.raises(DomainError):
            linalg.softmax([])

    @given(arrays(np.float64, st.integers(1, 20), elements=finite), st.floats(-100, 100))
    def test_shift_invariance(self, v, c):
        np.testing.assert_allclose(linalg.softmax(v + c), linalg.softmax(v), atol=1e-12)

    @given(arrays(np.float64, st.integers(1, 20), elements=finite))
    def test_probability_vector(self, v):
        p = linalg.softmax(v)
        assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12

    def test_row_softmax(self):
        np.testing.assert_array_equal(linalg.row_softmax(np.zeros((2, 2))), np.full((2, 2), 0.5))
        r = np.array([[0.3, -1.0, 2.0]])
        np.testing.assert_array_equal(linalg.row_softmax(r)[0], linalg.softmax(r[0]))
        M = linalg.rng_gaussian(linalg.RngStream(3), 4, 6, 0, 3)
        np.testing.assert_allclose(linalg.row_softmax(M).sum(axis=1), 1.0, atol=1e-12)


class TestAlgebra:
    def test_identity(self):
        A = linalg.rng_gaussian(linalg.RngStream(0), 3, 5)
        np.testing.assert_array_equal(linalg.matmul(np.eye(3), A), A)

    def test_trace_diag_embed(self):
        assert linalg.trace(linalg.diag_embed([1.0, 2.0, 3.0])) == 6.0
        D = linalg.diag_embed([1.0, 2.0])
        np.testing.assert_array_equal(D, [[1, 0], [0, 2]])
        np.testing.assert_array_equal(linalg.diag_vector(D), [1, 2])

    def test_transpose_of_product(self):
        s = linalg.RngStream(5)
        A, B = linalg.rng_gaussian(s, 3, 4), linalg.rng_gaussian(s, 4, 2)
        lhs = linalg.transpose(linalg.matmul(A, B))
        rhs = linalg.matmul(linalg.transpose(B), linalg.transpose(A))
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            linalg.matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ShapeError):
            linalg.trace(np.ones((2, 3)))

    def test_normalize(self):
        Z = linalg.row_l2_normalize([[3.0, 4.0], [0.0, -2.0]])
        np.testing.assert_allclose(Z, [[0.6, 0.8], [0.0, -1.0]])
        with pytest.raises(DomainError):
            linalg.row_l2_normalize([[0.0, 0.0]])

    def test_exact_rational_product(self):
        # small-integer matrices multiply exactly in float64
        A = np.array([[1.0, 2.0], [3.0, 4.0]])
        exact = [[sum(Fraction(int(A[i, k])) * Fraction(int(A[k, j])) for k in range(2)) for j in range(2)] for i in range(2)]
        np.testing.assert_array_equal(linalg.matmul(A, A), np.array(exact, dtype=float))


class TestRng:
    def test_constant_when_std_zero(self):
        M = linalg.rng_gaussian(linalg.RngStream(1), 3, 3, mean=2.5, std=0.0)
        np.testing.assert_array_equal(M, np.full((3, 3), 2.5))

    def test_replay(self):
        a = linalg.rng_gaussian(linalg.RngStream(11, 4), 5, 5)
        b = linalg.rng_gaussian(linalg.RngStream(11, 4), 5, 5)
        np.testing.assert_array_equal(a, b)
        c = linalg.rng_gaussian(linalg.RngStream(11, 5), 5, 5)
        assert not np.array_equal(a, c)

    def test_gaussian_moments(self):
        z = linalg.rng_gaussian(linalg.RngStream(0), 1, 100_000)
        se = 1 / math.sqrt(z.size)
        assert abs(z.mean()) < 0.01
        assert abs(z.mean()) < 3 * se
        assert abs(z.std() - 1) < 3 * math.sqrt(0.5) * se

    def test_uniform_moments(self):
        u = linalg.rng_uniform(linalg.RngStream(2), 1, 100_000, -1, 3)
        assert u.min() >= -1 and u.max() < 3
        assert abs(u.mean() - 1) < 3 * (4 / math.sqrt(12)) / math.sqrt(u.size)

    def test_permutation(self):
        p = linalg.rng_permutation(linalg.RngStream(3), 50)
        assert sorted(p) == list(range(50))

    def test_invalid(self):
        s = linalg.RngStream(0)
        with pytest.raises(DomainError):
            linalg.rng_gaussian(s, 2, 2, 0, -1)
        with pytest.raises(DomainError):
            linalg.rng_uniform(s, 2, 2, 1, 0)

    @settings(max_examples=20)
    @given(st.integers(0, 2**63 - 1), st.integers(0, 2**63 - 1))
    def test_determinism(self, seed, sid):
        a = linalg.rng_uniform(linalg.RngStream(seed, sid), 2, 3)
        b = linalg.rng_uniform(linalg.RngStream(seed, sid), 2, 3)
        assert a.tobytes() == b.tobytes()
