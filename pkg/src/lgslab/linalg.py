"""Small dense and tridiagonal symmetric linear algebra.

The tridiagonal eigensolver is an implicit QL iteration with Wilkinson
shifts.  Dense symmetric problems are reduced to tridiagonal form with
Householder reflections first and then handed to the same solver.
"""
import math
from dataclasses import dataclass

import numba as nb
import numpy as np


class NotPSD(ValueError):
    pass


class SingularCovariance(ValueError):
    pass


@dataclass(frozen=True)
class TridiagSym:
    diag: np.ndarray
    offdiag: np.ndarray

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.diag, dtype=float))
        e = np.atleast_1d(np.asarray(self.offdiag, dtype=float))
        if len(d) < 1 or len(e) != len(d) - 1:
            raise ValueError("offdiag must have exactly len(diag) - 1 entries")
        object.__setattr__(self, "diag", d)
        object.__setattr__(self, "offdiag", e)

    @property
    def n(self):
        return len(self.diag)

    def dense(self):
        return np.diag(self.diag) + np.diag(self.offdiag, 1) + np.diag(self.offdiag, -1)


@nb.njit(cache=True)
def _tql(d, e, z):
    # d: diagonal (n), e: e[i] couples i and i+1, e[n-1] = 0, z: accumulated rotations.
    n = d.shape[0]
    eps = 2.220446049250313e-16
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= eps * dd:
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > 100:
                return False
            # Wilkinson shift from the leading 2x2 block
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + (r if g >= 0 else -r))
            s = 1.0
            c = 1.0
            p = 0.0
            i = m - 1
            deflated = False
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    deflated = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                for k in range(z.shape[0]):
                    f = z[k, i + 1]
                    z[k, i + 1] = s * z[k, i] + c * f
                    z[k, i] = c * z[k, i] - s * f
                i -= 1
            if deflated:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return True


def eigh_tridiag(t):
    """Eigenvalues (ascending) and orthonormal eigenvectors of a TridiagSym."""
    d = t.diag.copy()
    e = np.zeros(t.n)
    e[:-1] = t.offdiag
    z = np.eye(t.n)
    if not _tql(d, e, z):
        raise RuntimeError("QL iteration did not converge")
    order = np.argsort(d, kind="stable")
    return d[order], z[:, order]


def householder_tridiagonalize(a):
    """Return (TridiagSym, Q) with Q^T a Q tridiagonal."""
    a = np.array(a, dtype=float)
    n = a.shape[0]
    q = np.eye(n)
    for k in range(n - 2):
        x = a[k + 1:, k]
        alpha = -math.copysign(np.linalg.norm(x), x[0]) if x[0] != 0 else -np.linalg.norm(x)
        v = x.copy()
        v[0] -= alpha
        vn = np.linalg.norm(v)
        if vn == 0.0:
            continue
        v /= vn
        # a <- H a H with H = I - 2 v v^T acting on rows/cols k+1..n-1
        sub = a[k + 1:, :]
        sub -= 2.0 * np.outer(v, v @ sub)
        sub = a[:, k + 1:]
        sub -= 2.0 * np.outer(sub @ v, v)
        q[:, k + 1:] -= 2.0 * np.outer(q[:, k + 1:] @ v, v)
    return TridiagSym(np.diag(a).copy(), np.diag(a, 1).copy()), q


def eigh_sym(a):
    """Dense symmetric eigendecomposition via tridiagonalization + QL."""
    a = np.asarray(a, dtype=float)
    if a.shape[0] == 1:
        return a[0].copy(), np.ones((1, 1))
    tri, q = householder_tridiagonalize(a)
    lam, v = eigh_tridiag(tri)
    return lam, q @ v


def psd_sqrt(a):
    """Symmetric square root, clamping round-off negatives to zero."""
    lam, v = eigh_sym(a)
    top = max(float(np.max(np.abs(lam))), 0.0)
    if lam[0] < -1e-8 * top:
        raise NotPSD(f"eigenvalue {lam[0]:.3e} below tolerance")
    return (v * np.sqrt(np.clip(lam, 0.0, None))) @ v.T


def sqrt_psd_apply_exact(a, v):
    return psd_sqrt(a) @ np.asarray(v, dtype=float)


def _logdet_chol(s):
    try:
        L = np.linalg.cholesky(s)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("covariance is not positive definite") from exc
    dg = np.diag(L)
    if np.any(dg <= 0) or not np.all(np.isfinite(dg)):
        raise SingularCovariance("covariance determinant underflows")
    ld = 2.0 * np.sum(np.log(dg))
    if not np.isfinite(ld):
        raise SingularCovariance("covariance determinant underflows")
    return L, ld


def gaussian_kl(mu_q, sig_q, mu_p, sig_p):
    """KL(N(mu_q, sig_q) || N(mu_p, sig_p)) in nats, log-determinants via Cholesky."""
    mu_q = np.atleast_1d(np.asarray(mu_q, dtype=float))
    mu_p = np.atleast_1d(np.asarray(mu_p, dtype=float))
    sig_q = np.atleast_2d(np.asarray(sig_q, dtype=float))
    sig_p = np.atleast_2d(np.asarray(sig_p, dtype=float))
    d = len(mu_q)
    Lq, ldq = _logdet_chol(sig_q)
    Lp, ldp = _logdet_chol(sig_p)
    # tr(Sp^-1 Sq) = ||Lp^-1 Lq||_F^2
    m = np.linalg.solve(Lp, Lq)
    u = np.linalg.solve(Lp, mu_p - mu_q)
    kl = 0.5 * (np.sum(m * m) + u @ u - d + ldp - ldq)
    return max(float(kl), 0.0)
