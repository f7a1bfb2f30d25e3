"""Lanczos approximation of A^{1/2} v from matrix-vector products, and the
a-priori error bounds that go with it.
"""
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev as npcheb

from .linalg import TridiagSym, eigh_tridiag


class DimensionMismatch(ValueError):
    pass


class NegativeRitzValue(ValueError):
    pass


class MatvecOracle:
    """v -> A v for an implicit symmetric PSD A, counting every application."""

    def __init__(self, d, apply):
        self.d = int(d)
        self._apply = apply
        self.calls = 0

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.d,):
            raise DimensionMismatch(f"expected shape ({self.d},), got {v.shape}")
        self.calls += 1
        return np.asarray(self._apply(v), dtype=float)

    @classmethod
    def from_matrix(cls, a):
        a = np.array(a, dtype=float)
        return cls(a.shape[0], lambda v: a @ v)


@dataclass
class LanczosState:
    q_basis: np.ndarray        # d x m_effective, orthonormal columns
    tri: TridiagSym            # T_m (None for a zero start vector)
    v_norm: float
    m_effective: int
    matvec_count: int
    breakdown: bool
    beta_next: float = 0.0     # norm of the last residual, beta_{m+1}


@dataclass(frozen=True)
class SpectralBounds:
    lambda_min: float
    kappa: float

    def __post_init__(self):
        if not self.lambda_min > 0:
            raise ValueError("lambda_min must be positive")
        if not self.kappa >= 1:
            raise ValueError("kappa must be at least 1")


BREAKDOWN_TOL = 1e-10


def lanczos_tridiagonalize(oracle, v, m, reorth=True):
    """m steps of symmetric Lanczos started at v/||v||.

    Stops early when the new residual is negligible next to the largest
    Ritz scale seen so far; in that case the Krylov space is invariant and
    the projection is exact.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.shape[0] != oracle.d:
        raise DimensionMismatch(f"vector of length {v.shape} for oracle of size {oracle.d}")
    if m < 1:
        raise ValueError("m must be at least 1")
    d = oracle.d
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return LanczosState(np.zeros((d, 0)), None, 0.0, 0, 0, True)
    start = oracle.calls
    Q = np.zeros((d, m))
    alphas, betas = [], []
    q, q_prev, b = v / nv, np.zeros(d), 0.0
    scale = 0.0
    breakdown = False
    for j in range(m):
        Q[:, j] = q
        w = oracle(q)
        if j > 0:
            w = w - b * q_prev
        a = float(q @ w)
        w = w - a * q
        if reorth:
            # modified Gram-Schmidt, run twice
            for _ in range(2):
                for i in range(j + 1):
                    w -= (Q[:, i] @ w) * Q[:, i]
        alphas.append(a)
        b_new = float(np.linalg.norm(w))
        scale = max(scale, abs(a) + b + b_new)
        b = b_new
        if b_new <= BREAKDOWN_TOL * scale:
            breakdown = True
            break
        if j + 1 >= d:
            break
        if j < m - 1:
            betas.append(b_new)
            q_prev, q = q, w / b_new
    k = len(alphas)
    return LanczosState(Q[:, :k].copy(), TridiagSym(np.array(alphas), np.array(betas)),
                        nv, k, oracle.calls - start, breakdown, b)


def lanczos_function_apply(state, f):
    """||v|| Q V f(Lambda) V^T e_1 for an arbitrary scalar map f."""
    if state.m_effective == 0:
        return np.zeros(state.q_basis.shape[0])
    lam, V = eigh_tridiag(state.tri)
    return state.v_norm * (state.q_basis @ (V @ (f(lam) * V[0, :])))


def lanczos_sqrt_apply(oracle, v, m, reorth=True, clamp=None):
    state = lanczos_tridiagonalize(oracle, v, m, reorth)
    if state.m_effective == 0:
        return np.zeros(oracle.d), state
    lam, V = eigh_tridiag(state.tri)
    if clamp is not None:
        lo, hi = clamp
        if not 0 < lo <= hi:
            raise ValueError("clamp interval must satisfy 0 < lo <= hi")
        lam_eff = np.clip(lam, lo, hi)
    else:
        tol = 1e-8 * max(1.0, float(np.max(np.abs(lam))))
        if lam[0] < -tol:
            raise NegativeRitzValue(f"Ritz value {lam[0]:.3e} on a PSD oracle")
        lam_eff = np.clip(lam, 0.0, None)
    y = state.v_norm * (state.q_basis @ (V @ (np.sqrt(lam_eff) * V[0, :])))
    return y, state


def mms18_bound(sb, m, v_norm, poly_err):
    return 2.0 * math.sqrt(sb.lambda_min) * v_norm * poly_err


def chebyshev_bound(kappa, m):
    """Sup error of the degree-m Chebyshev projection of sqrt on [1, 1+kappa]."""
    if kappa < 1 or m < 0:
        raise ValueError("need kappa >= 1 and m >= 0")
    r = math.sqrt(1.0 + kappa)
    return math.sqrt(kappa + 2.0) * (r - 1.0) ** (m + 1) / (r + 1.0) ** m


def lgs_error_bound(tilde_beta_t, m, z_norm):
    if not 0 < tilde_beta_t <= 1 or m < 0:
        raise ValueError("need tilde_beta in (0, 1] and m >= 0")
    return 4.0 * math.sqrt(2.0 * tilde_beta_t) * (math.sqrt(3.0) - 1.0) * z_norm * 3.0 ** (-m)


def chebyshev_coefficients(f, m, nodes=None):
    """Degree-m Chebyshev projection coefficients of f on [-1, 1].

    The projection integrals are evaluated by the trapezoid rule in
    theta = arccos(x), i.e. on Chebyshev points of the second kind.
    """
    n = nodes or 4 * (m + 1)
    N = n - 1
    k = np.arange(n)
    fx = f(np.cos(np.pi * k / N))
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    j = np.arange(m + 1)[:, None]
    c = (2.0 / N) * (np.cos(np.pi * j * k / N) * (w * fx)).sum(axis=1)
    c[0] *= 0.5
    return c


def measure_chebyshev_error(kappa, m, grid_n=10_000):
    if grid_n < 1000:
        raise ValueError("grid_n must be at least 1000")

    def f(x):
        return np.sqrt(1.0 + kappa / 2.0 + kappa * x / 2.0)

    c = chebyshev_coefficients(f, m)
    x = np.linspace(-1.0, 1.0, grid_n)
    return float(np.max(np.abs(f(x) - npcheb.chebval(x, c))))
