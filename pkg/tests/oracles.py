"""Independent reference computations used by the tests.

Everything here is dense and direct: no sparse factors, no incremental
sweeps and no library Bessel routines.
"""
import math

import numpy as np
from scipy import integrate


def bessel_k_quad(nu, x):
    """K_nu(x) from the integral representation int_0^inf exp(-x cosh t) cosh(nu t) dt."""

    def f(t):
        # cosh written out in exponent form so large t underflows instead of overflowing
        a = -x * math.cosh(t) if t < 700 else -math.inf
        return 0.5 * (math.exp(a + nu * t) + math.exp(a - nu * t))

    # beyond x cosh t - nu t > 800 the integrand is below 1e-340
    upper = 1.0
    while -x * math.cosh(upper) + nu * upper > -800:
        upper *= 1.5
    pts = [upper * k / 8 for k in range(1, 8)]
    val, _ = integrate.quad(f, 0, upper, points=pts, epsabs=0, epsrel=1e-13, limit=400)
    return val


def matern_quad(d, sigma2, phi, nu):
    if d == 0:
        return sigma2
    x = math.sqrt(2) * phi * d
    return sigma2 * 2 ** (1 - nu) * x**nu * bessel_k_quad(nu, x) / math.gamma(nu)


def ar_autocov_ma(coeffs, max_lag, terms=4000):
    """Autocovariances from the MA(infinity) weights psi_j (unit innovations)."""
    a = np.asarray(coeffs, dtype=float)
    q = a.size
    psi = np.zeros(terms)
    psi[0] = 1.0
    for j in range(1, terms):
        psi[j] = sum(a[k] * psi[j - 1 - k] for k in range(min(q, j)))
    return np.array([psi[: terms - h] @ psi[h:] for h in range(max_lag + 1)])


def toeplitz_cov(gamma, n):
    idx = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    return gamma[idx]


def indicator(leaf_of, K):
    Z = np.zeros((len(leaf_of), K))
    Z[np.arange(len(leaf_of)), leaf_of] = 1.0
    return Z


def dense_gls(Z, Q, y):
    return np.linalg.solve(Z.T @ Q @ Z, Z.T @ Q @ y)


def dense_dart(leaf_of, K, node, x, c, Q, y):
    """From-scratch criterion: node moved to the last column of Z0, children appended to Z."""
    leaf_of = np.asarray(leaf_of)
    others = [k for k in range(K) if k != node]
    Z0 = np.column_stack([indicator(leaf_of, K)[:, others], (leaf_of == node).astype(float)])
    in_node = leaf_of == node
    Z = np.column_stack([Z0[:, :-1], (in_node & (x < c)).astype(float), (in_node & (x >= c)).astype(float)])
    r0 = y - Z0 @ dense_gls(Z0, Q, y)
    r1 = y - Z @ dense_gls(Z, Q, y)
    return (r0 @ Q @ r0 - r1 @ Q @ r1) / len(y)


def exp_cov_dense(locs, sigma2, phi, tau2):
    locs = np.asarray(locs, dtype=float)
    if locs.ndim == 1:
        locs = locs[:, None]
    d = np.sqrt(((locs[:, None, :] - locs[None, :, :]) ** 2).sum(-1))
    return sigma2 * np.exp(-math.sqrt(2) * phi * d) + tau2 * np.eye(len(locs))


def dense_dart_nested(leaf_of, K, node, x, c, Q, y):
    """Same criterion through the nested-fit identity r0'Qr0 - r1'Qr1 = (r0 - r1)'Q(r0 - r1).

    The child column space contains the parent one, so the loss difference is
    the Q-norm of the change in fitted values; no cancellation between two
    large residual sums.
    """
    leaf_of = np.asarray(leaf_of)
    Z0 = indicator(leaf_of, K)
    in_node = leaf_of == node
    Z = np.column_stack([Z0, (in_node & (x < c)).astype(float)])
    f0 = Z0 @ dense_gls(Z0, Q, y)
    f1 = Z @ np.linalg.lstsq(Z.T @ Q @ Z, Z.T @ Q @ y, rcond=None)[0]
    diff = f1 - f0
    return diff @ Q @ diff / len(y)
