"""Monte-Carlo estimates of per-step KL gaps, path KL and related identities.

Random streams are keyed by (seed, t, chunk, purpose), so every per-step
estimate is reproducible on its own and independent of the others.
x_t draws are stratified over the mixture components (proportional
allocation) whenever every component receives at least two samples.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import _kernels as kern
from .linalg import gaussian_kl
from .mixture import (LOG2PI, marginal_logpdf, posterior_batch,
                      reverse_kernel_logpdf, reverse_mixture_logpdf)

CHUNK = 1 << 15
STREAM_STEP, STREAM_TERMINAL, STREAM_CLOSED, STREAM_MI, STREAM_PATH = range(5)
GAP_FAMILIES = ("exact", "beta", "tilde_beta", "diag_opt", "full_opt")


class UnboundedSupport(ValueError):
    pass


class NonPositiveValue(ValueError):
    pass


@dataclass
class PathKLEstimate:
    family: str
    per_step_gap: np.ndarray      # t = 2..T
    per_step_stderr: np.ndarray
    terminal_kl: float
    terminal_stderr: float
    n_samples: int
    seed: int

    @property
    def T(self):
        return len(self.per_step_gap) + 1

    @property
    def gap_sum(self):
        return float(np.sum(self.per_step_gap))

    @property
    def total(self):
        return self.gap_sum + self.terminal_kl

    @property
    def stderr(self):
        return float(np.sqrt(np.sum(self.per_step_stderr ** 2) + self.terminal_stderr ** 2))


@dataclass
class RateFit:
    T_grid: np.ndarray
    values: np.ndarray
    slope: float
    intercept: float
    residual: float


# -- sampling helpers ---------------------------------------------------------

def _allocate(weights, n):
    raw = weights * n
    base = np.floor(raw).astype(np.int64)
    order = np.argsort(-(raw - base), kind="stable")
    base[order[: n - base.sum()]] += 1
    return base


def _components(model, n):
    """Stratified component labels, or None when strata would be too thin."""
    counts = _allocate(model.weights, n)
    if np.any(counts[model.weights > 0] < 2):
        return None
    return np.repeat(np.arange(model.K), counts)


def _xt_chunks(model, schedule, t, n, seed, stream):
    """Yield (slice, x_t, rng) chunks of forward samples at step t."""
    ab, om = schedule.alpha_bar[t - 1], schedule.one_minus_ab[t - 1]
    sd = np.sqrt(ab * model.component_var + om)
    labels = _components(model, n)
    for ci, start in enumerate(range(0, n, CHUNK)):
        stop = min(n, start + CHUNK)
        rng = np.random.default_rng([seed, t, ci, stream])
        if labels is None:
            comp = rng.choice(model.K, size=stop - start, p=model.weights)
        else:
            comp = labels[start:stop]
        x = np.sqrt(ab) * model.means[comp] + sd * rng.standard_normal((stop - start, model.d))
        yield slice(start, stop), x, rng
    return labels


def _mean_se(values, model, n):
    """Stratified (or plain) mean and standard error of per-sample values."""
    labels = _components(model, n)
    if labels is None:
        return float(np.mean(values)), float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    cnt = np.bincount(labels, minlength=model.K)
    mk = np.bincount(labels, values, minlength=model.K) / np.maximum(cnt, 1)
    dev = values - mk[labels]
    vk = np.bincount(labels, dev * dev, minlength=model.K) / np.maximum(cnt - 1, 1)
    w = model.weights
    return float(w @ mk), float(np.sqrt(np.sum(w * w * vk / np.maximum(cnt, 1))))


# -- per-step gaps --------------------------------------------------------------

def step_terms(model, schedule, t, n, seed):
    """Per-sample kernel columns at step t (see _kernels for the layout)."""
    if t < 2:
        raise ValueError("per-step gaps are defined for t >= 2")
    sc = schedule.step(t)
    out = np.empty((n, kern.NCOL))
    logw = np.log(model.weights)
    for sl, x, rng in _xt_chunks(model, schedule, t, n, seed, STREAM_STEP):
        z = rng.standard_normal(x.shape)
        u = rng.random(len(x))
        kern.step_terms(x, z, u, model.means, logw, float(model.component_var),
                        sc.alpha_bar, sc.one_minus_ab, sc.alpha_bar_prev, sc.one_minus_ab_prev,
                        sc.beta, out[sl])
    return out


def gap_values(cols, family, method="controlled"):
    """Per-sample unbiased values whose mean is the step-t gap of `family`."""
    if family == "exact":
        return np.zeros(len(cols))
    if method == "paired":
        col = {"full_opt": kern.LR_FULL, "diag_opt": kern.LR_DIAG,
               "tilde_beta": kern.LR_TILDE, "beta": kern.LR_BETA}[family]
        return cols[:, col]
    if method != "controlled":
        raise ValueError(f"unknown estimator {method!r}")
    extra = {"full_opt": None, "diag_opt": kern.KL_DIAG,
             "tilde_beta": kern.KL_TILDE, "beta": kern.KL_BETA}[family]
    y = cols[:, kern.LR_FULL] if extra is None else cols[:, kern.LR_FULL] + cols[:, extra]
    return y - cv_coefficient(y, cols[:, kern.CV]) * cols[:, kern.CV]


def cv_coefficient(y, c):
    """Least-squares weight of a zero-mean control variate c for target y.

    The Hermite terms track the log ratio well at small gamma (weight near
    1) but not at large gamma, where a fixed weight of 1 would add variance.
    """
    vc = float(np.var(c))
    if not vc > 0:
        return 0.0
    return float(np.mean((y - y.mean()) * (c - c.mean())) / vc)


def per_step_gap_mc(model, schedule, family, t, n, seed, method="controlled"):
    """E log q(x_{t-1}|x_t) / p_family(x_{t-1}|x_t) with its standard error.

    method='paired' averages the raw log ratio over antithetic pairs;
    method='controlled' (default) subtracts Hermite control variates with a
    fitted weight and adds the closed-form covariance mismatch for the
    non-full families.
    Both estimate the same quantity.
    """
    if family not in GAP_FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    if family == "exact":
        return 0.0, 0.0
    return _mean_se(gap_values(step_terms(model, schedule, t, n, seed), family, method), model, n)


def terminal_kl_mc(model, schedule, n, seed):
    """KL(q(x_T) || N(0, I)).

    The log ratio is split at the moment-matched Gaussian N(m, S) of q(x_T):
    the Gaussian part is exact and only log q - log N(m, S) is sampled.
    """
    T = schedule.T
    ab, om = schedule.alpha_bar[-1], schedule.one_minus_ab[-1]
    w, mu = model.weights, model.means
    m = np.sqrt(ab) * (w @ mu)
    spread = (mu - w @ mu).T @ (w[:, None] * (mu - w @ mu))
    S = (ab * model.component_var + om) * np.eye(model.d) + ab * spread
    kl_gauss = gaussian_kl(m, S, np.zeros(model.d), np.eye(model.d))
    L = np.linalg.cholesky(S)
    ldet = 2 * np.sum(np.log(np.diag(L)))
    vals = np.empty(n)
    for sl, x, _ in _xt_chunks(model, schedule, T, n, seed, STREAM_TERMINAL):
        u = np.linalg.solve(L, (x - m).T).T
        log_g = -0.5 * np.sum(u * u, axis=1) - 0.5 * ldet - 0.5 * model.d * LOG2PI
        vals[sl] = marginal_logpdf(model, schedule, T, x) - log_g
    est, se = _mean_se(vals, model, n)
    return est + kl_gauss, se


def path_kl_families(model, schedule, families, n, seed, method="controlled", progress=None):
    """PathKLEstimate for several families from one set of samples per step."""
    T = schedule.T
    gaps = {f: np.zeros(T - 1) for f in families}
    ses = {f: np.zeros(T - 1) for f in families}
    for t in range(2, T + 1):
        cols = None
        for f in families:
            if f == "exact":
                continue
            if cols is None:
                cols = step_terms(model, schedule, t, n, seed)
            gaps[f][t - 2], ses[f][t - 2] = _mean_se(gap_values(cols, f, method), model, n)
        if progress is not None:
            progress(t)
    term, term_se = terminal_kl_mc(model, schedule, n, seed)
    return {f: PathKLEstimate(f, gaps[f], ses[f], term, term_se, n, seed) for f in families}


def path_kl_mc(model, schedule, family, n, seed, method="controlled"):
    return path_kl_families(model, schedule, (family,), n, seed, method)[family]


def trajectory_path_kl_mc(model, schedule, family, n, seed):
    """Direct estimate of KL(q(x_{1:T}) || p(x_{1:T})) from whole forward paths."""
    T = schedule.T
    vals = np.empty(n)
    for ci, start in enumerate(range(0, n, CHUNK)):
        stop = min(n, start + CHUNK)
        m = stop - start
        rng = np.random.default_rng([seed, 0, ci, STREAM_PATH])
        comp = rng.choice(model.K, size=m, p=model.weights)
        x0 = model.means[comp] + np.sqrt(model.component_var) * rng.standard_normal((m, model.d))
        b1 = schedule.beta[0]
        x = np.sqrt(1 - b1) * x0 + np.sqrt(b1) * rng.standard_normal((m, model.d))
        acc = np.zeros(m)
        for t in range(2, T + 1):
            b = schedule.beta[t - 1]
            x_new = np.sqrt(1 - b) * x + np.sqrt(b) * rng.standard_normal((m, model.d))
            if family != "exact":
                acc += (reverse_mixture_logpdf(model, schedule, t, x, x_new)
                        - reverse_kernel_logpdf(model, schedule, t, family, x, x_new))
            x = x_new
        acc += marginal_logpdf(model, schedule, T, x) + 0.5 * np.sum(x * x, axis=1) + 0.5 * model.d * LOG2PI
        vals[start:stop] = acc
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(n))


# -- closed-form loss, channel identity, Taylor bounds -----------------------

def _posterior_cov_samples(model, schedule, t, n, seed):
    covs = np.empty((n, model.d, model.d))
    for sl, x, _ in _xt_chunks(model, schedule, t, n, seed, STREAM_CLOSED):
        covs[sl] = posterior_batch(model, schedule, t, x).cov(model.means)
    return covs


def _half_logdet(covs, gamma):
    lam = np.linalg.eigvalsh(covs)
    return 0.5 * np.sum(np.log1p(gamma * np.clip(lam, 0.0, None)), axis=1)


def full_cov_loss_closedform(model, schedule, t, n, seed):
    """L_t at the optimal full covariance: E 0.5 log det(I + gamma_t Cov(x0|x_t))."""
    g = schedule.step(t).gamma
    return _mean_se(_half_logdet(_posterior_cov_samples(model, schedule, t, n, seed), g), model, n)


def _channel_values(model, schedule, t, x, rng):
    g = schedule.step(t).gamma
    pb = posterior_batch(model, schedule, t, x)
    cm = pb.component_means(model.means)
    m = len(x)
    k = np.minimum((np.cumsum(pb.r, axis=1) < rng.random(m)[:, None]).sum(axis=1), model.K - 1)
    x0 = cm[np.arange(m), k] + np.sqrt(pb.s2) * rng.standard_normal((m, model.d))
    z = rng.standard_normal((m, model.d))
    y = np.sqrt(g) * x0 + z
    log_cond = -0.5 * np.sum(z * z, axis=1)
    vy = 1.0 + g * pb.s2
    diff = y[:, None, :] - np.sqrt(g) * cm
    with np.errstate(divide="ignore"):
        lr = np.log(pb.r)
    log_marg = logsumexp(lr - 0.5 * np.einsum("nkd,nkd->nk", diff, diff) / vy, axis=1) \
        - 0.5 * model.d * np.log(vy)
    return log_cond - log_marg


def mi_gaussian_channel_mc(model, schedule, t, x_t, n, seed):
    """I(X; sqrt(gamma_t) X + Z) for X ~ q(x0 | x_t) at one fixed x_t."""
    x = np.broadcast_to(np.asarray(x_t, dtype=float), (n, model.d))
    vals = np.empty(n)
    for ci, start in enumerate(range(0, n, CHUNK)):
        stop = min(n, start + CHUNK)
        rng = np.random.default_rng([seed, t, ci, STREAM_MI])
        vals[start:stop] = _channel_values(model, schedule, t, x[start:stop], rng)
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def expected_mi_mc(model, schedule, t, n, seed):
    """E over x_t ~ q(x_t) of the channel mutual information, one draw per x_t."""
    vals = np.empty(n)
    for sl, x, rng in _xt_chunks(model, schedule, t, n, seed, STREAM_MI):
        vals[sl] = _channel_values(model, schedule, t, x, rng)
    return _mean_se(vals, model, n)


@dataclass
class TraceMoments:
    """MC averages of tr Cov(x0|x_t) and tr Cov(x0|x_t)^2 with standard errors."""
    tr1: float
    tr2: float
    tr1_se: float = 0.0
    tr2_se: float = 0.0
    n: int = 0
    samples: dict = field(default_factory=dict, repr=False)


def trace_moments(model, schedule, t, n, seed):
    covs = _posterior_cov_samples(model, schedule, t, n, seed)
    tr1 = np.trace(covs, axis1=1, axis2=2)
    tr2 = np.einsum("nij,nij->n", covs, covs)
    (m1, s1), (m2, s2) = _mean_se(tr1, model, n), _mean_se(tr2, model, n)
    return TraceMoments(m1, m2, s1, s2, n, {"tr1": tr1, "tr2": tr2, "covs": covs})


def taylor_bounds(moments, gamma, D):
    """(upper on L_t at the optimum, lower on the irreducible L*_t)."""
    if not np.isfinite(D):
        raise UnboundedSupport("Taylor bounds need a bounded support radius")
    head = 0.5 * gamma * moments.tr1 - 0.25 * gamma ** 2 * moments.tr2
    tail = gamma ** 3 * D ** 6
    return head + tail / 6.0, head - tail / 3.0


def check_taylor_bounds(model, schedule, t, n, seed):
    """Both Taylor inequalities with standard errors.

    Returns the slack of each inequality (upper - L_t, L*_t - lower) and its
    standard error; each slack should be >= -3 stderr.
    """
    D = model.support_radius
    g = schedule.step(t).gamma
    mom = trace_moments(model, schedule, t, n, seed)
    tr1, tr2 = mom.samples["tr1"], mom.samples["tr2"]
    # upper bound minus L_t, per x_t
    head = 0.5 * g * tr1 - 0.25 * g * g * tr2
    slack_u = head + g ** 3 * D ** 6 / 6.0 - _half_logdet(mom.samples["covs"], g)
    up, up_se = _mean_se(slack_u, model, n)
    mi, mi_se = expected_mi_mc(model, schedule, t, n, seed)
    lo_head, lo_se = _mean_se(head, model, n)
    slack_l = mi - (lo_head - g ** 3 * D ** 6 / 3.0)
    return {"gamma": g, "upper_slack": up, "upper_se": up_se,
            "lower_slack": slack_l, "lower_se": float(np.hypot(mi_se, lo_se)),
            "L_star": mi, "L_opt_upper": taylor_bounds(mom, g, D)[0]}


def fit_loglog_slope(T_grid, values):
    T_grid = np.asarray(T_grid, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(T_grid) < 4 or len(values) != len(T_grid):
        raise ValueError("need at least 4 matching grid points")
    if np.any(values <= 0):
        raise NonPositiveValue("log-log fit needs positive values")
    X, Y = np.log(T_grid), np.log(values)
    slope, intercept = np.polyfit(X, Y, 1)
    resid = float(np.sqrt(np.mean((Y - (slope * X + intercept)) ** 2)))
    return RateFit(T_grid, values, float(slope), float(intercept), resid)
