import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_psd
from lgslab.lanczos import (DimensionMismatch, MatvecOracle, NegativeRitzValue, SpectralBounds,
                            chebyshev_bound, chebyshev_coefficients, lanczos_function_apply,
                            lanczos_sqrt_apply, lanczos_tridiagonalize, lgs_error_bound,
                            measure_chebyshev_error, mms18_bound)
from lgslab.linalg import eigh_tridiag, sqrt_psd_apply_exact


def test_identity_breaks_down_after_one_step():
    st_ = lanczos_tridiagonalize(MatvecOracle.from_matrix(np.eye(5)), np.arange(1.0, 6.0), 3)
    assert st_.m_effective == 1
    assert st_.breakdown
    np.testing.assert_allclose(st_.tri.diag, [1.0], atol=1e-15)


def test_two_by_two_exact():
    v = np.ones(2) / math.sqrt(2)
    st_ = lanczos_tridiagonalize(MatvecOracle.from_matrix(np.diag([1.0, 2.0])), v, 2)
    np.testing.assert_allclose(eigh_tridiag(st_.tri)[0], [1.0, 2.0], atol=1e-14)


def test_full_dimension_ritz_values_match_spectrum():
    rng = np.random.default_rng(0)
    A = random_psd(rng, 32)
    st_ = lanczos_tridiagonalize(MatvecOracle.from_matrix(A), rng.standard_normal(32), 32)
    np.testing.assert_allclose(eigh_tridiag(st_.tri)[0], np.linalg.eigvalsh(A), atol=1e-6)
    np.testing.assert_allclose(st_.q_basis.T @ st_.q_basis, np.eye(st_.m_effective), atol=1e-12)


def test_sqrt_apply_identity_and_scaled():
    v = np.array([1.0, -2.0, 0.5])
    y, _ = lanczos_sqrt_apply(MatvecOracle.from_matrix(np.eye(3)), v, 1)
    np.testing.assert_allclose(y, v, atol=1e-15)
    y, _ = lanczos_sqrt_apply(MatvecOracle.from_matrix(6.25 * np.eye(3)), v, 1)
    np.testing.assert_allclose(y, 2.5 * v, atol=1e-14)


def test_sqrt_apply_exact_at_full_dimension():
    A = np.diag([1.0, 4.0, 9.0, 16.0])
    v = np.ones(4) / 2
    y, _ = lanczos_sqrt_apply(MatvecOracle.from_matrix(A), v, 4)
    np.testing.assert_allclose(y, np.array([1, 2, 3, 4]) / 2, atol=1e-8)
    np.testing.assert_allclose(y, sqrt_psd_apply_exact(A, v), atol=1e-12)


def test_zero_vector():
    y, st_ = lanczos_sqrt_apply(MatvecOracle.from_matrix(np.eye(3)), np.zeros(3), 2)
    assert np.all(y == 0) and st_.matvec_count == 0


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        lanczos_sqrt_apply(MatvecOracle.from_matrix(np.eye(3)), np.ones(4), 2)


def test_negative_ritz_value_raises():
    with pytest.raises(NegativeRitzValue):
        lanczos_sqrt_apply(MatvecOracle.from_matrix(np.diag([1.0, -1.0])), np.ones(2), 2)


def test_small_negative_ritz_value_clamped():
    y, _ = lanczos_sqrt_apply(MatvecOracle.from_matrix(np.diag([1.0, -1e-12])), np.array([1.0, 1.0]), 2)
    np.testing.assert_allclose(y, [1.0, 0.0], atol=1e-6)


def test_function_apply_identity_map_reproduces_matvec():
    rng = np.random.default_rng(1)
    A = random_psd(rng, 10)
    v = rng.standard_normal(10)
    st_ = lanczos_tridiagonalize(MatvecOracle.from_matrix(A), v, 10)
    np.testing.assert_allclose(lanczos_function_apply(st_, lambda lam: lam), A @ v, atol=1e-10)


def test_krylov_exactness_with_few_distinct_eigenvalues():
    rng = np.random.default_rng(2)
    Q, _ = np.linalg.qr(rng.standard_normal((20, 20)))
    A = (Q * np.repeat([1.0, 2.5, 7.0], [7, 7, 6])) @ Q.T
    v = rng.standard_normal(20)
    y, st_ = lanczos_sqrt_apply(MatvecOracle.from_matrix(A), v, 8)
    assert st_.m_effective == 3 and st_.breakdown
    exact = sqrt_psd_apply_exact(A, v)
    assert np.linalg.norm(y - exact) <= 1e-6 * np.linalg.norm(exact)


@given(st.integers(1, 30), st.integers(1, 12), st.integers(0, 10 ** 6))
def test_matvec_count_equals_effective_steps(d, m, seed):
    rng = np.random.default_rng(seed)
    oracle = MatvecOracle.from_matrix(random_psd(rng, d))
    _, st_ = lanczos_sqrt_apply(oracle, rng.standard_normal(d), m)
    assert st_.matvec_count == oracle.calls == min(m, st_.m_effective)
    assert st_.m_effective <= min(m, d)


def test_clamp_restricts_ritz_values():
    rng = np.random.default_rng(3)
    A = random_psd(rng, 12)
    v = rng.standard_normal(12)
    lo, hi = 0.5, 1.5
    y, st_ = lanczos_sqrt_apply(MatvecOracle.from_matrix(A), v, 6, clamp=(lo, hi))
    ref = lanczos_function_apply(st_, lambda lam: np.sqrt(np.clip(lam, lo, hi)))
    np.testing.assert_allclose(y, ref, atol=1e-13)
    lam = eigh_tridiag(st_.tri)[0]
    assert lam.min() < lo or lam.max() > hi   # the clamp is active in this instance
    with pytest.raises(ValueError):
        lanczos_sqrt_apply(MatvecOracle.from_matrix(A), v, 6, clamp=(0.0, 1.0))


def test_mms18_examples():
    assert mms18_bound(SpectralBounds(1.0, 1.0), 3, 1.0, 0.0) == 0.0
    assert mms18_bound(SpectralBounds(1.0, 2.0), 3, 1.0, 0.1) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        SpectralBounds(0.0, 2.0)


def test_chebyshev_bound_examples():
    assert chebyshev_bound(3, 2) == pytest.approx(math.sqrt(5) / 9, rel=1e-14)
    r3 = math.sqrt(3)
    assert chebyshev_bound(2, 3) == pytest.approx(2 * (r3 - 1) ** 4 / (r3 + 1) ** 3, rel=1e-14)
    # the quoted decimal is a rounded approximation of the same expression (0.028166...)
    assert chebyshev_bound(2, 3) == pytest.approx(0.02812, rel=2e-3)


@given(st.floats(1.0, 100.0), st.integers(0, 30))
def test_chebyshev_bound_geometric_decay(kappa, m):
    r = math.sqrt(1 + kappa)
    assert chebyshev_bound(kappa, m + 1) / chebyshev_bound(kappa, m) == pytest.approx((r - 1) / (r + 1), rel=1e-12)


def test_lgs_error_bound_examples():
    assert lgs_error_bound(1.0, 3, 1.0) == pytest.approx(4 * math.sqrt(2) * (math.sqrt(3) - 1) / 27, rel=1e-14)
    assert lgs_error_bound(1.0, 3, 1.0) == pytest.approx(0.15331, rel=2e-3)   # 0.153374...
    assert lgs_error_bound(1.0, 0, 2.0) == pytest.approx(2 * 4.141, rel=1e-3)
    assert lgs_error_bound(1e-12, 2, 1.0) < 1e-5
    with pytest.raises(ValueError):
        lgs_error_bound(1.5, 2, 1.0)


def test_measured_chebyshev_error_degree_zero():
    kappa = 3.0
    c0 = chebyshev_coefficients(lambda x: np.sqrt(1 + kappa / 2 + kappa * x / 2), 0)[0]
    x = np.linspace(-1, 1, 10_000)
    expect = np.max(np.abs(np.sqrt(1 + kappa / 2 + kappa * x / 2) - c0))
    assert measure_chebyshev_error(kappa, 0) == pytest.approx(expect, rel=1e-14)


def test_chebyshev_coefficients_match_numpy_interpolation():
    # independent route: high-degree interpolation, truncated
    f = lambda x: np.sqrt(2.0 + x)
    c = chebyshev_coefficients(f, 6, nodes=200)
    ref = np.polynomial.chebyshev.Chebyshev.interpolate(f, 80).coef[:7]
    np.testing.assert_allclose(c, ref, atol=1e-12)


@pytest.mark.parametrize("kappa,m", [(2, 5), (8, 8)])
def test_measured_chebyshev_error_below_bound(kappa, m):
    assert measure_chebyshev_error(kappa, m) <= chebyshev_bound(kappa, m)


def test_mms18_bound_dominance_ensemble():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        d = int(rng.integers(4, 65))
        m = int(rng.integers(1, 11))
        kA = float(rng.uniform(1.0, 2.0))
        lmin = float(rng.uniform(0.05, 3.0))
        A = lmin * random_psd(rng, d, kappa=kA)
        v = rng.standard_normal(d)
        y, _ = lanczos_sqrt_apply(MatvecOracle.from_matrix(A), v, m)
        err = np.linalg.norm(y - sqrt_psd_apply_exact(A, v))
        # spectrum lies in lmin [1, kA] which is inside lmin [1, 1 + max(1, kA - 1)]
        poly = chebyshev_bound(max(1.0, kA - 1.0), m)
        assert err <= mms18_bound(SpectralBounds(lmin, kA), m, np.linalg.norm(v), poly) + 1e-12


def test_lgs_bound_dominance_on_bounded_regime():
    rng = np.random.default_rng(5)
    for _ in range(300):
        d = int(rng.integers(4, 65))
        m = int(rng.integers(1, 9))
        tb = float(rng.uniform(1e-3, 1.0))
        G = rng.standard_normal((d, d))
        C = G @ G.T
        gamma = float(rng.uniform(0, 1)) / np.linalg.eigvalsh(C)[-1]
        S = tb * (np.eye(d) + gamma * C)
        z = rng.standard_normal(d)
        y, _ = lanczos_sqrt_apply(MatvecOracle.from_matrix(S), z, m)
        assert np.linalg.norm(y - sqrt_psd_apply_exact(S, z)) <= lgs_error_bound(tb, m, np.linalg.norm(z))
