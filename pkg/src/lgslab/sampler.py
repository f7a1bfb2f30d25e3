"""Reverse-chain DDPM sampling with pluggable covariance, including the
Lanczos Gaussian sampler with batching, windowing and a diagonal guard,
plus the evaluation counts that go with it.

Chains are run as a batch of rows.  All random draws come from streams
keyed by (seed, t, purpose), so every mode consumes the same standard
normal z_t at step t and matched seeds give comparable samples.
"""
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .lanczos import BREAKDOWN_TOL, NegativeRitzValue
from .mixture import posterior_batch

MODES = ("beta", "tilde_beta", "diag_opt", "full_opt_exact", "lanczos")
STREAM_NOISE, STREAM_GUARD, STREAM_INIT, STREAM_SEED = range(4)


class EmptySampleSet(ValueError):
    pass


@dataclass(frozen=True)
class GuardConfig:
    probes: int = 5
    sigma_pix: float = math.inf
    step: int = 2

    def __post_init__(self):
        if self.probes < 1:
            raise ValueError("guard needs at least one probe")
        if not self.sigma_pix > 0:
            raise ValueError("sigma_pix must be positive")


@dataclass(frozen=True)
class SamplerConfig:
    covariance_mode: str = "tilde_beta"
    m: int = 3
    l: int = 1
    w: float = 1.0
    guard: GuardConfig = None
    clamp: bool = False
    final_step: bool = False   # also take the t=1 transition (T transitions instead of T-1)
    seed: int = 0

    def __post_init__(self):
        if self.covariance_mode not in MODES:
            raise ValueError(f"unknown covariance mode {self.covariance_mode!r}")
        if self.covariance_mode == "lanczos" and self.m < 1:
            raise ValueError("lanczos mode needs m >= 1")
        if self.l < 1:
            raise ValueError("l must be at least 1")
        if not 0 < self.w <= 1:
            raise ValueError("w must lie in (0, 1]")
        if self.guard is not None and self.covariance_mode != "lanczos":
            raise ValueError("the guard is only used with lanczos mode")


@dataclass
class ChainResult:
    x_1: np.ndarray          # (n, d) endpoints, or x_0 draws when final_step is set
    oracle_calls: int        # covariance matvecs, summed over chains
    mean_evals: int          # posterior-mean evaluations, summed over chains
    backward_passes: int     # shared matvec units: m per Lanczos batch, M per guard
    n_chains: int

    def per_chain(self, name):
        return Fraction(getattr(self, name), self.n_chains)


# -- batched Lanczos ----------------------------------------------------------

class _RowCov:
    """Rows of Cov(x0 | x_t) for a batch of x_t, applied without forming matrices."""

    def __init__(self, model, schedule, t, x):
        pb = posterior_batch(model, schedule, t, x)
        self.pb = pb
        self.means = model.means
        self.sc = schedule.step(t)

    def cov_apply(self, idx, v):
        pb, mu = self.pb, self.means
        proj = pb.r[idx] * (v @ mu.T)
        mb = pb.mu_bar[idx]
        cv = proj @ mu - np.sum(mb * v, axis=1, keepdims=True) * mb
        return pb.s2 * v + pb.shrink ** 2 * cv

    def sigma_apply(self, idx, v):
        return self.sc.tilde_beta * v + self.sc.jac_scale * self.cov_apply(idx, v)

    def cov_diag(self):
        pb = self.pb
        second = pb.r @ (self.means ** 2)
        return pb.s2 + pb.shrink ** 2 * (second - pb.mu_bar ** 2)

    def cov_dense(self):
        return self.pb.cov(self.means)


def batched_lanczos(apply, V, m):
    """Row-wise Lanczos with full reorthogonalisation.

    apply(idx, W) returns A_i w_i for the rows idx.  Returns the basis
    (n, m, d), diagonals (n, m), off-diagonals (n, m), start norms, the
    per-row Krylov dimension and the per-row matvec count.
    """
    n, d = V.shape
    nv = np.linalg.norm(V, axis=1)
    Q = np.zeros((n, m, d))
    alpha = np.zeros((n, m))
    beta = np.zeros((n, m))
    m_eff = np.zeros(n, dtype=np.int64)
    calls = np.zeros(n, dtype=np.int64)
    idx = np.flatnonzero(nv > 0)
    q = np.zeros_like(V)
    q[idx] = V[idx] / nv[idx, None]
    q_prev = np.zeros_like(V)
    b = np.zeros(n)
    scale = np.zeros(n)
    for j in range(m):
        if len(idx) == 0:
            break
        Q[idx, j] = q[idx]
        w = apply(idx, q[idx])
        calls[idx] += 1
        w -= b[idx, None] * q_prev[idx]
        a = np.sum(q[idx] * w, axis=1)
        w -= a[:, None] * q[idx]
        for _ in range(2):
            for i in range(j + 1):
                w -= np.sum(Q[idx, i] * w, axis=1)[:, None] * Q[idx, i]
        alpha[idx, j] = a
        m_eff[idx] = j + 1
        b_new = np.linalg.norm(w, axis=1)
        scale[idx] = np.maximum(scale[idx], np.abs(a) + b[idx] + b_new)
        go = (b_new > BREAKDOWN_TOL * scale[idx]) & (j + 1 < d) & (j + 1 < m)
        beta[idx, j] = b_new
        keep = idx[go]
        q_prev[keep] = q[keep]
        q[keep] = w[go] / b_new[go, None]
        b[keep] = b_new[go]
        idx = keep
    return Q, alpha, beta, nv, m_eff, calls


def _ritz(alpha, beta, m_eff, k_rows):
    """Eigen-decomposition of each row's leading m_eff x m_eff tridiagonal."""
    k = int(m_eff[k_rows[0]])
    T = np.zeros((len(k_rows), k, k))
    ii = np.arange(k)
    T[:, ii, ii] = alpha[k_rows, :k]
    if k > 1:
        T[:, ii[:-1], ii[1:]] = beta[k_rows, :k - 1]
        T[:, ii[1:], ii[:-1]] = beta[k_rows, :k - 1]
    return np.linalg.eigh(T)


def lanczos_function_rows(Q, alpha, beta, nv, m_eff, fs):
    """For every scalar map f in fs, return ||v|| Q_m f(T_m) e_1 row-wise."""
    n, _, d = Q.shape
    outs = [np.zeros((n, d)) for _ in fs]
    for k in np.unique(m_eff):
        if k == 0:
            continue
        rows = np.flatnonzero(m_eff == k)
        lam, U = _ritz(alpha, beta, m_eff, rows)
        for out, f in zip(outs, fs):
            coef = U @ (f(lam, rows) * U[:, 0, :])[:, :, None]
            out[rows] = nv[rows, None] * np.einsum("nkd,nk->nd", Q[rows, :k], coef[:, :, 0])
    return outs


def _check_ritz(lam):
    tol = 1e-8 * np.maximum(1.0, np.max(np.abs(lam), axis=1))
    if np.any(lam[:, 0] < -tol):
        raise NegativeRitzValue(f"Ritz value {lam[:, 0].min():.3e} on a PSD oracle")


def _lgs_rows(rc, Z, steps, schedule, m, clamp):
    """Noise for each step in `steps` from independent draws Z[j] pushed
    through Lanczos on Sigma*(x_t0) with t0 = steps[0].

    The Krylov data of draw j are reused at step s_j with the Ritz values
    mapped through the Jacobian part: theta -> tilde_beta_s + c_s^2 lambda_C.
    Returns the noise list, the Ritz ranges per step and the matvec count.
    """
    sc0 = rc.sc
    noises, ranges, calls = [], [], 0
    for Zj, s in zip(Z, steps):
        scs = schedule.step(s)
        Q, al, be, nv, m_eff, c = batched_lanczos(rc.sigma_apply, Zj, m)
        calls += int(c.sum())

        def f(lam, rows, scs=scs):
            if not clamp:
                _check_ritz(lam)
            lam_c = (lam - sc0.tilde_beta) / sc0.jac_scale
            lam_c = np.clip(lam_c, 0.0, 1.0 if clamp else None)
            return np.sqrt(scs.tilde_beta + scs.jac_scale * lam_c)

        y, = lanczos_function_rows(Q, al, be, nv, m_eff, [f])
        noises.append(y)
        ranges.append((scs, Q, al, be, m_eff))
    return noises, ranges, calls


def _ritz_interval_rows(scs, sc0, alpha, beta, m_eff, clamp):
    n = len(m_eff)
    lo = np.full(n, np.inf)
    hi = np.full(n, -np.inf)
    for k in np.unique(m_eff):
        if k == 0:
            continue
        rows = np.flatnonzero(m_eff == k)
        lam, _ = _ritz(alpha, beta, m_eff, rows)
        lam_c = np.clip((lam - sc0.tilde_beta) / sc0.jac_scale, 0.0, 1.0 if clamp else None)
        th = scs.tilde_beta + scs.jac_scale * lam_c
        lo[rows], hi[rows] = th.min(axis=1), th.max(axis=1)
    return lo, hi


def hutchinson_diagonal(apply, n, d, M, rng):
    """Row-wise estimate of diag(Sigma) from M Rademacher probes: mean of r * (Sigma r)."""
    est = np.zeros((n, d))
    idx = np.arange(n)
    for _ in range(M):
        r = rng.integers(0, 2, size=(n, d)) * 2.0 - 1.0
        est += r * apply(idx, r)
    return est / M


def _guard_rows(noise, apply, lo, hi, M, sigma_pix, rng):
    n, d = noise.shape
    est = np.clip(hutchinson_diagonal(apply, n, d, M, rng), lo[:, None], hi[:, None])
    s2 = sigma_pix ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(est > s2, np.sqrt(s2 / est), 1.0)
    return noise * scale


def hutchinson_guard(noise, oracle, ritz_interval, M, sigma_pix, rng):
    """Rescale coordinates whose estimated variance exceeds sigma_pix^2.

    diag(Sigma) is estimated with M Rademacher probes (M oracle calls) and
    clamped to ritz_interval before the rescaling.
    """
    if M < 1 or not sigma_pix > 0:
        raise ValueError("need M >= 1 and sigma_pix > 0")
    noise = np.asarray(noise, dtype=float)
    lo, hi = ritz_interval

    def apply(idx, v):
        return np.stack([oracle(row) for row in v])

    return _guard_rows(noise[None, :], apply, np.array([lo]), np.array([hi]), M, sigma_pix, rng)[0]


def lgs_noise_batch(model, schedule, t, x_t, l, m, rng, clamp=False):
    """l noise vectors for steps t, t-1, ..., t-l+1 from the covariance frozen at (x_t, t)."""
    if l < 1 or t - l + 1 < 2:
        raise ValueError("need l >= 1 and t - l + 1 >= 2")
    x = np.asarray(x_t, dtype=float)[None, :]
    rc = _RowCov(model, schedule, t, x)
    Z = [rng.standard_normal((1, model.d)) for _ in range(l)]
    noises, _, calls = _lgs_rows(rc, Z, list(range(t, t - l, -1)), schedule, m, clamp)
    return np.concatenate(noises, axis=0), calls


# -- the chain ------------------------------------------------------------------

def _noise(seed, t, n, d):
    return np.random.default_rng([seed, t, STREAM_NOISE]).standard_normal((n, d))


def window_steps(n_steps, config):
    """Steps (counted from the end of the chain) handled by the Lanczos sampler."""
    return int(round(config.w * n_steps))


def reverse_chain_sample(model, schedule, config, n=1, rng=None):
    """Run n chains from x_T ~ N(0, I) down to x_1 (or x_0 with final_step)."""
    seed = config.seed if rng is None else int(rng.integers(2 ** 62))
    T, d = schedule.T, model.d
    last = 1 if config.final_step else 2
    steps = list(range(T, last - 1, -1))
    x = np.random.default_rng([seed, T + 1, STREAM_INIT]).standard_normal((n, d))
    mean_evals = calls = units = 0
    mode = config.covariance_mode
    n_win = window_steps(len(steps), config) if mode == "lanczos" else 0
    win_start = steps[len(steps) - n_win] if n_win else None
    pending = {}
    for t in steps:
        sc = schedule.step(t)
        rc = _RowCov(model, schedule, t, x)
        mean = sc.coef_x0 * rc.pb.mean + sc.coef_xt * x
        mean_evals += n
        z = _noise(seed, t, n, d)
        if mode == "lanczos" and win_start is not None and t <= win_start:
            if t not in pending:
                batch = [s for s in range(t, max(t - config.l, last - 1), -1)]
                Z = [_noise(seed, s, n, d) for s in batch]
                noises, info, c = _lgs_rows(rc, Z, batch, schedule, config.m, config.clamp)
                calls += c
                units += config.m * n
                pending = {s: (y, inf, rc) for s, y, inf in zip(batch, noises, info)}
            eps, info, rc0 = pending.pop(t)
            g = config.guard
            if g is not None and t == g.step:
                scs, _, al, be, m_eff = info
                lo, hi = _ritz_interval_rows(scs, rc0.sc, al, be, m_eff, config.clamp)

                def frozen(idx, v, scs=scs, rc0=rc0):
                    return scs.tilde_beta * v + scs.jac_scale * rc0.cov_apply(idx, v)

                grng = np.random.default_rng([seed, t, STREAM_GUARD])
                eps = _guard_rows(eps, frozen, lo, hi, g.probes, g.sigma_pix, grng)
                calls += g.probes * n
                units += g.probes * n
        elif mode == "beta":
            eps = np.sqrt(sc.beta) * z
        elif mode == "tilde_beta" or mode == "lanczos":
            eps = np.sqrt(sc.tilde_beta) * z
        elif mode == "diag_opt":
            eps = np.sqrt(sc.tilde_beta + sc.jac_scale * rc.cov_diag()) * z
        else:
            S = sc.tilde_beta * np.eye(d) + sc.jac_scale * rc.cov_dense()
            lam, U = np.linalg.eigh(S)
            root = np.einsum("nij,nj,nkj->nik", U, np.sqrt(np.clip(lam, 0.0, None)), U)
            eps = np.einsum("nij,nj->ni", root, z)
        x = mean + eps
    return ChainResult(x, calls, mean_evals, units, n)


# -- cost accounting ----------------------------------------------------------

def cost_model(k, l, w):
    """Predicted evaluation ratio against a fixed-variance sampler: 1 + k w / l."""
    if k < 1 or l < 1 or not 0 < w <= 1:
        raise ValueError("need k >= 1, l >= 1 and w in (0, 1]")
    return 1 + Fraction(k) * Fraction(w).limit_denominator(10 ** 6) / l


def measured_cost_ratio(model, schedule, config_a, config_b, n=2):
    """Ratio of per-chain (mean evaluations + shared matvec units)."""
    ra = reverse_chain_sample(model, schedule, config_a, n)
    rb = reverse_chain_sample(model, schedule, config_b, n)
    cost_a = ra.per_chain("mean_evals") + ra.per_chain("backward_passes")
    cost_b = rb.per_chain("mean_evals") + rb.per_chain("backward_passes")
    return cost_a / cost_b


# -- sample quality --------------------------------------------------------------

def _w2_1d(a, b):
    a, b = np.sort(a), np.sort(b)
    if len(a) != len(b):
        q = (np.arange(max(len(a), len(b))) + 0.5) / max(len(a), len(b))
        a = np.quantile(a, q)
        b = np.quantile(b, q)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def sliced_wasserstein(samples_a, samples_b, n_projections, rng):
    """Mean over random unit directions of the 1-D W2 distance of projections."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise EmptySampleSet("both sample sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets differ in dimension")
    if n_projections < 1:
        raise ValueError("need at least one projection")
    dirs = rng.standard_normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return float(np.mean([_w2_1d(a @ u, b @ u) for u in dirs]))
