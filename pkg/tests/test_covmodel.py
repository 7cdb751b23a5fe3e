import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import ar_autocov_ma, matern_quad, toeplitz_cov
from rfgls.covmodel import (
    CovarianceSpec,
    ParameterError,
    ar_autocovariance,
    ar_cholesky_factor,
    build_cov_matrix,
    check_diag_dominance,
    matern_cov,
)


def exp_spec(**kw):
    return CovarianceSpec(kind="exponential", **kw)


def ar_spec(*coeffs, var=1.0):
    return CovarianceSpec(kind="ar", ar_coeffs=coeffs, innovation_var=var)


class TestMatern:
    def test_zero_distance_is_sigma2(self):
        for nu in (0.3, 0.5, 1.5, 2.5, 4.0):
            assert matern_cov(0.0, CovarianceSpec(kind="matern", sigma2=3.0, phi=2.0, nu=nu)) == 3.0

    def test_exponential_value(self):
        v = matern_cov(1.0, CovarianceSpec(kind="matern", sigma2=1.0, phi=1.0, nu=0.5))
        assert v == pytest.approx(math.exp(-math.sqrt(2)), rel=1e-14)
        assert v == pytest.approx(matern_quad(1.0, 1.0, 1.0, 0.5), rel=1e-10)
        assert v == pytest.approx(0.2431167, abs=1e-7)

    def test_nu_three_halves_value(self):
        v = matern_cov(1.0, CovarianceSpec(kind="matern", sigma2=2.0, phi=1.0, nu=1.5))
        r2 = math.sqrt(2)
        assert v == pytest.approx(2 * (1 + r2) * math.exp(-r2), rel=1e-13)
        assert v == pytest.approx(matern_quad(1.0, 2.0, 1.0, 1.5), rel=1e-10)
        # the closed form evaluates to 1.1738714...
        assert v == pytest.approx(1.1738714, abs=1e-7)

    @pytest.mark.parametrize("nu", [0.3, 0.8, 1.0, 2.0, 2.5, 3.7])
    def test_general_nu_against_quadrature(self, nu):
        spec = CovarianceSpec(kind="matern", sigma2=1.7, phi=0.9, nu=nu)
        for d in (1e-3, 0.05, 0.4, 1.0, 3.0, 10.0, 20.0):
            assert matern_cov(d, spec) == pytest.approx(matern_quad(d, 1.7, 0.9, nu), rel=1e-9, abs=1e-300)

    @pytest.mark.parametrize("nu", [0.8, 2.0, 2.5])
    def test_large_argument_branch_matches_quadrature(self, nu):
        # sqrt(2) * phi * d = 35, past the switch to the asymptotic expansion
        spec = CovarianceSpec(kind="matern", sigma2=1.0, phi=1.0, nu=nu)
        d = 35 / math.sqrt(2)
        assert matern_cov(d, spec) == pytest.approx(matern_quad(d, 1.0, 1.0, nu), rel=1e-9)

    def test_exponential_kind_forces_half(self):
        assert exp_spec(nu=2.0).nu == 0.5

    @given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0, 5))
    def test_half_equals_exponential(self, s2, phi, d):
        m = matern_cov(d, CovarianceSpec(kind="matern", sigma2=s2, phi=phi, nu=0.5))
        assert m == pytest.approx(s2 * math.exp(-math.sqrt(2) * phi * d), rel=1e-12, abs=1e-300)

    @pytest.mark.parametrize("nu", [0.5, 1.5, 2.2])
    def test_nonincreasing(self, nu):
        v = matern_cov(np.linspace(0, 5, 100), CovarianceSpec(kind="matern", sigma2=1, phi=1.3, nu=nu))
        assert np.all(np.diff(v) <= 1e-15)

    def test_tiny_distance_treated_as_zero(self):
        spec = CovarianceSpec(kind="matern", sigma2=2.0, phi=1.0, nu=1.2)
        assert matern_cov(1e-13, spec) == 2.0

    def test_array_shape_preserved(self):
        d = np.array([[0.0, 1.0], [2.0, 3.0]])
        assert matern_cov(d, exp_spec()).shape == (2, 2)

    @pytest.mark.parametrize("d", [-1.0, np.nan, np.inf])
    def test_bad_distance(self, d):
        with pytest.raises(ValueError):
            matern_cov(d, exp_spec())

    def test_bad_parameters(self):
        with pytest.raises(ParameterError):
            CovarianceSpec(kind="matern", nu=0.0)
        with pytest.raises(ParameterError):
            CovarianceSpec(kind="matern", nu=-1.0)
        with pytest.raises(ParameterError):
            exp_spec(phi=0.0)
        with pytest.raises(ParameterError):
            exp_spec(sigma2=-1.0)
        with pytest.raises(ParameterError):
            CovarianceSpec(kind="circular")
        with pytest.raises(ParameterError):
            matern_cov(1.0, ar_spec(0.5))


class TestCovMatrix:
    def test_single_location(self):
        C = build_cov_matrix([[0.3, 0.4]], exp_spec(sigma2=1.0, tau2=0.1))
        np.testing.assert_array_equal(C.entries, [[1.1]])
        assert not C.singular_warning

    def test_duplicate_locations_flagged(self):
        C = build_cov_matrix([[0.5, 0.5], [0.5, 0.5]], exp_spec(sigma2=1.0, tau2=0.0))
        np.testing.assert_array_equal(C.entries, np.ones((2, 2)))
        assert C.singular_warning
        assert not build_cov_matrix([[0.5, 0.5], [0.5, 0.5]], exp_spec(tau2=0.1)).singular_warning

    def test_lattice_toeplitz(self):
        C = build_cov_matrix([0.0, 1.0, 2.0], exp_spec(sigma2=1.0, phi=1.0)).entries
        r = math.exp(-math.sqrt(2))
        expect = np.array([[1, r, r * r], [r, 1, r], [r * r, r, 1]])
        np.testing.assert_allclose(C, expect, rtol=1e-14)

    def test_psd_random(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            pts = rng.random((40, 2))
            C = build_cov_matrix(pts, CovarianceSpec(kind="matern", sigma2=2, phi=3, nu=1.5, tau2=0.05)).entries
            np.testing.assert_array_equal(C, C.T)
            assert np.linalg.eigvalsh(C).min() >= -1e-8 * np.trace(C) / len(C)
            np.testing.assert_allclose(np.diag(C), 2.05)

    def test_rejects_3d(self):
        with pytest.raises(ValueError):
            build_cov_matrix(np.zeros((3, 3)), exp_spec())


class TestAR:
    def test_autocovariance_against_ma_weights(self):
        for coeffs in ([0.5], [0.5, 0.2], [0.3, -0.2, 0.1], [-0.7]):
            np.testing.assert_allclose(ar_autocovariance(coeffs, 8), ar_autocov_ma(coeffs, 8), rtol=1e-12)

    def test_ar1_precision(self):
        f = ar_cholesky_factor(3, ar_spec(0.5))
        np.testing.assert_allclose(
            f.precision().toarray(), [[1, -0.5, 0], [-0.5, 1.25, -0.5], [0, -0.5, 1]], atol=1e-14
        )

    def test_ar1_zero_is_identity(self):
        np.testing.assert_allclose(ar_cholesky_factor(5, ar_spec(0.0)).toarray(), np.eye(5), atol=0)

    def test_ar2_dense_inverse(self):
        n = 6
        f = ar_cholesky_factor(n, ar_spec(0.5, 0.2))
        Sigma = toeplitz_cov(ar_autocov_ma([0.5, 0.2], n), n)
        np.testing.assert_allclose(f.precision().toarray(), np.linalg.inv(Sigma), atol=1e-10)

    @pytest.mark.parametrize("coeffs", [(0.6,), (0.4, 0.3), (0.2, -0.3, 0.25)])
    @pytest.mark.parametrize("n", [5, 20, 50])
    def test_precision_frobenius(self, coeffs, n):
        f = ar_cholesky_factor(n, ar_spec(*coeffs, var=2.0))
        Sigma = 2.0 * toeplitz_cov(ar_autocov_ma(coeffs, n), n)
        P = np.linalg.inv(Sigma)
        err = np.linalg.norm(f.precision().toarray() - P) / np.linalg.norm(P)
        assert err < 1e-8
        assert f.q == len(coeffs)
        assert f.is_stationary()

    def test_unstable_rejected(self):
        with pytest.raises(ParameterError):
            ar_spec(1.0)
        with pytest.raises(ParameterError):
            ar_spec(0.6, 0.5)

    def test_needs_n_above_q(self):
        with pytest.raises(ValueError):
            ar_cholesky_factor(2, ar_spec(0.5, 0.2))

    def test_ar_marginal_var(self):
        assert ar_spec(0.5, var=3.0).marginal_var == pytest.approx(3.0 / 0.75)


class TestDominance:
    def test_identity(self):
        r = check_diag_dominance(np.eye(4), "weak")
        assert r.passes_weak and r.passes_strong and r.xi == 1.0

    def test_ar1_half(self):
        r = check_diag_dominance(ar_cholesky_factor(10, ar_spec(0.5)), "weak")
        assert r.passes_weak and not r.passes_strong
        assert r.xi == pytest.approx(0.25)

    def test_ar1_03_strong(self):
        r = check_diag_dominance(ar_cholesky_factor(10, ar_spec(0.3)), "strong")
        assert r.passes_strong
        assert r.max_offdiag_sum == pytest.approx(0.6)

    def test_sparse_and_dense_agree(self):
        f = ar_cholesky_factor(12, ar_spec(0.4, 0.2))
        a = check_diag_dominance(f.precision())
        b = check_diag_dominance(f.precision().toarray())
        assert (a.passes_weak, a.passes_strong) == (b.passes_weak, b.passes_strong)
        assert a.xi == pytest.approx(b.xi, rel=1e-12)
        assert a.max_offdiag_sum == pytest.approx(b.max_offdiag_sum, rel=1e-12)

    def test_strong_implies_weak(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            A = rng.normal(size=(5, 5)) * rng.random()
            Q = A @ A.T + rng.random() * 5 * np.eye(5)
            r = check_diag_dominance(Q)
            assert not r.passes_strong or r.passes_weak

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            check_diag_dominance(np.eye(2), "medium")
