import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_psd
from lgslab.linalg import (NotPSD, SingularCovariance, TridiagSym, eigh_sym, eigh_tridiag,
                           gaussian_kl, householder_tridiagonalize, psd_sqrt, sqrt_psd_apply_exact)


def test_eigh_tridiag_1x1():
    lam, V = eigh_tridiag(TridiagSym([2.0], []))
    assert lam.tolist() == [2.0]
    assert V.tolist() == [[1.0]]


def test_eigh_tridiag_2x2_roots_of_characteristic_polynomial():
    lam, _ = eigh_tridiag(TridiagSym([2.0, 2.0], [1.0]))
    np.testing.assert_allclose(lam, [1.0, 3.0], atol=1e-14)


def test_eigh_tridiag_toeplitz_spectrum():
    a, b = 0.7, -1.3
    t = TridiagSym([a] * 3, [b] * 2)
    lam, V = eigh_tridiag(t)
    s = abs(b) * math.sqrt(2)
    np.testing.assert_allclose(lam, [a - s, a, a + s], atol=1e-13)
    assert np.linalg.norm(t.dense() @ V - V * lam) < 1e-13


def test_tridiag_rejects_bad_offdiag():
    with pytest.raises(ValueError):
        TridiagSym([1.0, 2.0], [1.0, 1.0])


def test_eigh_tridiag_random_reconstruction():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        t = TridiagSym(rng.standard_normal(n), rng.standard_normal(n - 1))
        lam, V = eigh_tridiag(t)
        A = t.dense()
        worst = max(worst, np.linalg.norm(V * lam @ V.T - A) / max(1.0, np.linalg.norm(A)))
        assert np.all(np.diff(lam) >= 0)
    assert worst <= 1e-10


def test_eigh_tridiag_matches_numpy():
    rng = np.random.default_rng(1)
    t = TridiagSym(rng.standard_normal(40), rng.standard_normal(39))
    np.testing.assert_allclose(eigh_tridiag(t)[0], np.linalg.eigvalsh(t.dense()), atol=1e-12)


def test_householder_tridiagonalize_is_similarity():
    rng = np.random.default_rng(2)
    a = random_psd(rng, 12)
    tri, q = householder_tridiagonalize(a)
    np.testing.assert_allclose(q.T @ q, np.eye(12), atol=1e-13)
    np.testing.assert_allclose(q.T @ a @ q, tri.dense(), atol=1e-12)


def test_eigh_sym_matches_numpy():
    rng = np.random.default_rng(3)
    a = random_psd(rng, 20)
    lam, V = eigh_sym(a)
    np.testing.assert_allclose(lam, np.linalg.eigvalsh(a), atol=1e-12)
    np.testing.assert_allclose(V @ np.diag(lam) @ V.T, a, atol=1e-12)


def test_sqrt_identity_and_scaled_identity():
    v = np.array([0.3, -1.0, 2.5])
    np.testing.assert_allclose(sqrt_psd_apply_exact(np.eye(3), v), v, atol=1e-14)
    np.testing.assert_allclose(sqrt_psd_apply_exact(4 * np.eye(3), v), 2 * v, atol=1e-14)


def test_sqrt_diagonal_elementwise():
    np.testing.assert_allclose(sqrt_psd_apply_exact(np.diag([1.0, 4.0, 9.0]), np.ones(3)), [1, 2, 3],
                               atol=1e-14)


def test_sqrt_squared_equals_matvec():
    rng = np.random.default_rng(4)
    for _ in range(50):
        d = int(rng.integers(1, 65))
        a = random_psd(rng, d)
        v = rng.standard_normal(d)
        av = a @ v
        got = sqrt_psd_apply_exact(a, sqrt_psd_apply_exact(a, v))
        assert np.linalg.norm(got - av) <= 1e-8 * np.linalg.norm(av)


def test_psd_sqrt_clamps_roundoff_and_rejects_indefinite():
    a = np.diag([1.0, -1e-12])
    np.testing.assert_allclose(psd_sqrt(a), np.diag([1.0, 0.0]), atol=1e-14)
    with pytest.raises(NotPSD):
        psd_sqrt(np.diag([1.0, -1e-3]))


def test_gaussian_kl_examples():
    assert gaussian_kl([0.0], [[1.0]], [0.0], [[1.0]]) == 0.0
    assert gaussian_kl([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(0.5, abs=1e-15)
    assert gaussian_kl([0.0], [[1.0]], [0.0], [[2.0]]) == pytest.approx(0.5 * (0.5 - 1 + math.log(2)), abs=1e-15)


def test_gaussian_kl_singular_raises():
    with pytest.raises(SingularCovariance):
        gaussian_kl(np.zeros(2), np.eye(2), np.zeros(2), np.diag([1.0, 0.0]))


def test_gaussian_kl_matches_scipy_mc_free_formula():
    # independent route: KL as E_q[log q - log p] by Gauss-Hermite in 1-D
    x, w = np.polynomial.hermite_e.hermegauss(60)
    mq, sq, mp_, sp = 0.3, 1.7, -0.4, 0.6
    xs = mq + math.sqrt(sq) * x
    lq = -0.5 * (xs - mq) ** 2 / sq - 0.5 * math.log(2 * math.pi * sq)
    lp = -0.5 * (xs - mp_) ** 2 / sp - 0.5 * math.log(2 * math.pi * sp)
    quad = float(np.sum(w * (lq - lp)) / math.sqrt(2 * math.pi))
    assert gaussian_kl([mq], [[sq]], [mp_], [[sp]]) == pytest.approx(quad, rel=1e-12)


@given(st.integers(1, 6), st.integers(0, 10 ** 6))
def test_gaussian_kl_nonnegative_and_zero_iff_equal(d, seed):
    rng = np.random.default_rng(seed)
    A, B = random_psd(rng, d), random_psd(rng, d)
    ma, mb = rng.standard_normal(d), rng.standard_normal(d)
    assert gaussian_kl(ma, A, mb, B) > 0
    assert gaussian_kl(ma, A, ma, A) == pytest.approx(0.0, abs=1e-12)
