"""A two-dimensional Gaussian counter-example for classifier guidance.

Data X0 = R Y0 with Y0 ~ N(0, diag(1, 2)), label C = Y0_1 + N(0, 1),
conditioned on C = sqrt(T).  Guided reverse chains with a fixed scalar
covariance (tilde_beta I) and with the fixed unconditional optimal
covariance are propagated exactly through their first two moments; the
endpoint KL to q(x_1 | C) separates as 1/T versus 1/T^2.

The recursions below track deviations from the exact conditional moments
(mean error e_t, variance deviation d_t) so that the small quantities are
never formed by subtracting nearly equal numbers.

A second part checks, on a labelled 1-D point-mass model, that the
expected conditional endpoint KL under exact Bayes guidance is bounded by
the unconditional path KL.
"""
import math
from dataclasses import dataclass

import mpmath as mp
import numpy as np
from scipy.special import logsumexp

from .mixture import LOG2PI, MixtureModel, reverse_kernel_logpdf
from .pathkl import fit_loglog_slope, trajectory_path_kl_mc
from .schedule import counterexample_theta, make_counterexample_schedule, make_snr_uniform


@dataclass
class CounterexampleParams:
    T: int
    theta: np.ndarray        # SNR_t, t = 1..T
    dtheta: float            # theta_{t-1} - theta_t, the same for every t
    alpha_bar: np.ndarray
    beta: np.ndarray         # beta_t, index 0 is t=1
    tilde_beta: np.ndarray   # index 0 is t=1 (unused, 0)
    u: np.ndarray            # 1 / (1 + theta_t) = 1 - alpha_bar_t
    ell: np.ndarray          # 1 - alpha_bar_t / 2, conditional variance of Y_t1
    M: np.ndarray            # (c_T / 2) sqrt(alpha_bar_t), conditional mean of Y_t1
    a: np.ndarray            # sqrt(alpha_t) ell_{t-1} / ell_t, index 0 unused
    c_T: float
    R: np.ndarray

    @property
    def schedule(self):
        return make_counterexample_schedule(self.T)


@dataclass
class ChainMoments:
    mean_error: float        # coordinate-1 mean error at t=1
    variance: float          # coordinate-1 variance at t=1
    variance_dev: float      # variance - ell_1
    second_dev: float = 0.0  # coordinate-2 variance deviation (full chain only)


def counterexample_params(T, R=None):
    if T < 2:
        raise ValueError("T must be at least 2")
    theta = counterexample_theta(T)
    dth = (1.0 - float(T) ** -4) / (T - 1)
    ab = theta / (1.0 + theta)
    u = 1.0 / (1.0 + theta)
    beta = np.empty(T)
    beta[0] = u[0]
    beta[1:] = dth / (theta[:-1] * (1.0 + theta[1:]))
    tb = np.zeros(T)
    tb[1:] = beta[1:] - beta[1:] * dth * u[:-1]
    ell = 1.0 - ab / 2.0
    c = math.sqrt(T)
    a = np.zeros(T)
    a[1:] = np.sqrt(ab[1:] / ab[:-1]) * ell[:-1] / ell[1:]
    return CounterexampleParams(T, theta, dth, ab, beta, tb, u, ell, 0.5 * c * np.sqrt(ab), a, c,
                                np.eye(2) if R is None else np.asarray(R, dtype=float))


def run_scalar_guided_chain(T):
    """Coordinate-1 moments of the tilde_beta guided chain at t=1."""
    if T < 4:
        raise ValueError("T must be at least 4")
    p = counterexample_params(T)
    e, r = -p.M[-1], 1.0
    for t in range(T, 1, -1):
        i = t - 1
        sa = math.sqrt(p.alpha_bar[i] / p.alpha_bar[i - 1])
        A = sa - p.tilde_beta[i] * p.alpha_bar[i] / (sa * (1.0 + p.u[i]))
        g = math.sqrt(p.alpha_bar[i]) * p.c_T / 2.0
        F = (p.beta[i] - p.tilde_beta[i]) / sa * g
        e = A * e - F
        r = A * A * r + p.tilde_beta[i]
    return ChainMoments(e, r, r - p.ell[0])


def run_fullcov_guided_chain(T):
    """Moments at t=1 of the chain using the fixed unconditional optimal covariance."""
    if T < 4:
        raise ValueError("T must be at least 4")
    p = counterexample_params(T)
    prod_a = float(np.prod(p.a[1:]))
    d = p.alpha_bar[-1] / 2.0
    # coordinate 2: Var(Y_t2) = 1 + alpha_bar_t, chain starts at 1
    d2 = -p.alpha_bar[-1]
    for t in range(T, 1, -1):
        i = t - 1
        d = p.a[i] ** 2 * d + p.beta[i] ** 2 * p.alpha_bar[i - 1] / (2.0 * p.ell[i])
        b2 = (p.alpha_bar[i] / p.alpha_bar[i - 1]) * ((1.0 + p.alpha_bar[i - 1]) / (1.0 + p.alpha_bar[i])) ** 2
        d2 = b2 * d2
    return ChainMoments(-p.M[-1] * prod_a, p.ell[0] + d, d, d2)


def _kl_var_term(x):
    """log(1 + x) - x / (1 + x), accurate for small x."""
    if abs(x) < 1e-3:
        # sum_{k>=2} (-1)^k (k-1)/k x^k
        return x * x * (0.5 - x * (2.0 / 3.0 - x * (0.75 - 0.8 * x)))
    return math.log1p(x) - x / (1.0 + x)


def endpoint_kl_1d(mean_err, var, target_mean_err=0.0, target_var=1.0):
    """KL(N(target_mean_err, target_var) || N(mean_err, var))."""
    if not (var > 0 and target_var > 0):
        raise ValueError("variances must be positive")
    dm = mean_err - target_mean_err
    return 0.5 * (dm * dm / var + _kl_var_term(var / target_var - 1.0))


def scalar_chain_kl(T):
    m = run_scalar_guided_chain(T)
    return endpoint_kl_1d(m.mean_error, m.variance, 0.0, m.variance - m.variance_dev)


def fullcov_chain_kl(T):
    m = run_fullcov_guided_chain(T)
    p = counterexample_params(T)
    first = endpoint_kl_1d(m.mean_error, m.variance, 0.0, p.ell[0])
    second = 0.5 * _kl_var_term(m.second_dev / (1.0 + p.alpha_bar[0]))
    return first + second


@dataclass
class GuidanceRates:
    T_grid: np.ndarray
    scalar_kl: np.ndarray
    full_kl: np.ndarray
    scalar_slope: float
    full_slope: float
    min_scalar_T: float
    max_full_T2: float
    scalar_T_variation: float
    full_T2_variation: float


def verify_guidance_rates(T_grid):
    T_grid = np.asarray(T_grid, dtype=int)
    if len(T_grid) < 4:
        raise ValueError("need at least 4 grid points")
    sk = np.array([scalar_chain_kl(int(T)) for T in T_grid])
    fk = np.array([fullcov_chain_kl(int(T)) for T in T_grid])
    sT = sk * T_grid
    fT2 = fk * T_grid.astype(float) ** 2
    return GuidanceRates(T_grid, sk, fk,
                         fit_loglog_slope(T_grid, sk).slope, fit_loglog_slope(T_grid, fk).slope,
                         float(sT.min()), float(fT2.max()),
                         float(sT.max() / sT.min()), float(fT2.max() / fT2.min()))


# -- independent route: 2-D moments in x-coordinates, extended precision -------

def _mat(a):
    return mp.matrix([[mp.mpf(v) for v in row] for row in np.asarray(a, dtype=float)])


def _gauss_kl_2d(m_q, S_q, m_p, S_p):
    Sp_inv = S_p ** -1
    dm = m_p - m_q
    tr = sum((Sp_inv * S_q)[i, i] for i in range(2))
    quad = (dm.T * Sp_inv * dm)[0, 0]
    return (tr + quad - 2 + mp.log(mp.det(S_p) / mp.det(S_q))) / 2


def guided_chain_xcoords(T, R, kind, dps=50):
    """Endpoint KL(q(x_1 | C) || chain) for the 2-D chain propagated in x-coordinates.

    kind is 'scalar' (tilde_beta I) or 'full' (unconditional optimal covariance).
    Mean and covariance are pushed through the affine guided update in mpmath.
    """
    with mp.workdps(dps):
        Tm = mp.mpf(T)
        eps = Tm ** -4
        dth = (1 - eps) / (T - 1)
        theta = [None] + [eps + (T - t) * dth for t in range(1, T + 1)]
        ab = [None] + [th / (1 + th) for th in theta[1:]]
        c = mp.sqrt(Tm)
        Rm = _mat(R)
        e1 = Rm[:, 0]
        m = mp.matrix(2, 1)
        C = mp.eye(2)
        for t in range(T, 1, -1):
            beta = dth / (theta[t - 1] * (1 + theta[t]))
            tb = beta - beta * dth / (1 + theta[t - 1])
            sa = mp.sqrt(ab[t] / ab[t - 1])
            b = sa * (1 + ab[t - 1]) / (1 + ab[t])
            u = 1 / (1 + theta[t])
            mu0 = Rm * mp.diag([sa, b]) * Rm.T
            if kind == "scalar":
                S = tb * mp.eye(2)
            else:
                S = Rm * mp.diag([beta, beta * (1 + ab[t - 1]) / (1 + ab[t])]) * Rm.T
            k = mp.sqrt(ab[t]) / (1 + u)
            P = mu0 - (S * e1) * (e1.T) * (k * mp.sqrt(ab[t]) / sa)
            q = (S * e1) * (k * c / sa)
            m = P * m + q
            C = P * C * P.T + S
        m_q = Rm * mp.matrix([[c / 2 * mp.sqrt(ab[1])], [0]])
        S_q = Rm * mp.diag([1 - ab[1] / 2, 1 + ab[1]]) * Rm.T
        return float(_gauss_kl_2d(m_q, S_q, m, C))


def scalar_chain_kl_exact(T, dps=50):
    """Coordinate-1 KL of the scalar chain from the direct affine recursion in mpmath."""
    with mp.workdps(dps):
        Tm = mp.mpf(T)
        eps = Tm ** -4
        dth = (1 - eps) / (T - 1)
        theta = [None] + [eps + (T - t) * dth for t in range(1, T + 1)]
        ab = [None] + [th / (1 + th) for th in theta[1:]]
        c = mp.sqrt(Tm)
        m, r = mp.mpf(0), mp.mpf(1)
        for t in range(T, 1, -1):
            beta = dth / (theta[t - 1] * (1 + theta[t]))
            tb = beta - beta * dth / (1 + theta[t - 1])
            sa = mp.sqrt(ab[t] / ab[t - 1])
            u = 1 / (1 + theta[t])
            k = mp.sqrt(ab[t]) / (1 + u)
            A = sa - tb * k * mp.sqrt(ab[t]) / sa
            m = A * m + tb * k * c / sa
            r = A * A * r + tb
        M1, l1 = c / 2 * mp.sqrt(ab[1]), 1 - ab[1] / 2
        return float(((m - M1) ** 2 + l1 - r) / (2 * r) + mp.log(r / l1) / 2)


# -- data-processing check on a labelled point-mass model ---------------------

def dpi_instance():
    """1-D two-atom model with the atom index as label, on a 6-step schedule."""
    model = MixtureModel(np.array([0.4, 0.6]), np.array([[-1.0], [1.5]]), 0.0, name="dpi")
    return model, make_snr_uniform(6, 2.0, 0.05)


@dataclass
class DPIReport:
    family: str
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    endpoint_kl: float       # KL(q(x_1) || p(x_1)) from the same grid density

    @property
    def slack(self):
        return self.rhs - self.lhs

    @property
    def holds(self):
        return self.lhs - self.rhs <= 3.0 * math.hypot(self.lhs_se, self.rhs_se)


def _grid_weights(x):
    h = x[1] - x[0]
    w = np.full(len(x), h)
    w[0] = w[-1] = h / 2
    return w


def endpoint_density_grid(model, schedule, family, lo=-8.0, hi=8.0, h=0.01):
    """log p(x_1) on a grid, from N(0, 1) at T pushed through the reverse kernels."""
    x = np.arange(lo, hi + h / 2, h)
    w = _grid_weights(x)
    logp = -0.5 * x * x - 0.5 * LOG2PI
    xs = x[:, None]
    for t in range(schedule.T, 1, -1):
        # K[i, j] = log p(x_{t-1} = x_i | x_t = x_j)
        xp = np.repeat(xs, len(x), axis=0)
        xt = np.tile(xs, (len(x), 1))
        K = reverse_kernel_logpdf(model, schedule, t, family, xp, xt).reshape(len(x), len(x))
        logp = logsumexp(K + (logp + np.log(w))[None, :], axis=1)
    return x, logp


def _log_label_given_x1(model, schedule, x1):
    ab, om = schedule.alpha_bar[0], schedule.one_minus_ab[0]
    mu = np.sqrt(ab) * model.means[:, 0]
    ll = np.log(model.weights)[None, :] - 0.5 * (x1[:, None] - mu[None, :]) ** 2 / om
    return ll - logsumexp(ll, axis=1, keepdims=True)


def check_guidance_dpi(instance, n, seed, family="tilde_beta"):
    """Both sides of E_y KL(q(x_1|y) || p(x_1|y)) <= KL(q(x_{1:T}) || p(x_{1:T})).

    p(x_1 | y) is the exact Bayes-guided endpoint, proportional to
    p(x_1) q(y | x_1); p(x_1) comes from grid propagation.
    """
    model, schedule = instance
    grid, logp = endpoint_density_grid(model, schedule, family)
    w = _grid_weights(grid)
    lab_grid = _log_label_given_x1(model, schedule, grid)
    logZ = logsumexp(lab_grid + (logp + np.log(w))[:, None], axis=0)   # log sum_x p(x) q(y|x)

    rng = np.random.default_rng([seed, 0, 0, 7])
    ab, om = schedule.alpha_bar[0], schedule.one_minus_ab[0]
    y = rng.choice(model.K, size=n, p=model.weights)
    x1 = np.sqrt(ab) * model.means[y, 0] + np.sqrt(om) * rng.standard_normal(n)
    log_q = -0.5 * (x1 - np.sqrt(ab) * model.means[y, 0]) ** 2 / om - 0.5 * (LOG2PI + np.log(om))
    log_px = np.interp(x1, grid, logp)
    log_lab = _log_label_given_x1(model, schedule, x1)[np.arange(n), y]
    vals = log_q - (log_px + log_lab - logZ[y])
    lhs, lhs_se = float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))

    log_q1 = logsumexp(np.log(model.weights)[None, :]
                       - 0.5 * (x1[:, None] - np.sqrt(ab) * model.means[None, :, 0]) ** 2 / om, axis=1) \
        - 0.5 * (LOG2PI + np.log(om))
    endpoint = float(np.mean(log_q1 - log_px))
    rhs, rhs_se = trajectory_path_kl_mc(model, schedule, family, n, seed)
    return DPIReport(family, lhs, lhs_se, rhs, rhs_se, endpoint)
