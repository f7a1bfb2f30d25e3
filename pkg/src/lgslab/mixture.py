"""Analytic DDPM over isotropic mixture data.

q(x0) = sum_k pi_k N(mu_k, var I); var = 0 gives a mixture of point masses.
Forward marginals, posteriors q(x0 | x_t) and the reverse kernels
q(x_{t-1} | x_t) are all available in closed form, so this module stands in
for a trained score network.

Functions accept a single point (shape (d,)) or a batch (shape (n, d)).
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .lanczos import MatvecOracle

FAMILIES = ("beta", "tilde_beta", "diag_opt", "full_opt")
LOG2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class MixtureModel:
    weights: np.ndarray
    means: np.ndarray
    component_var: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        mu = np.asarray(self.means, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        if len(w) != mu.shape[0] or len(w) < 1:
            raise ValueError("weights and means disagree on K")
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
            raise ValueError("weights must lie on the simplex")
        if self.component_var < 0:
            raise ValueError("component variance must be non-negative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)

    @property
    def K(self):
        return len(self.weights)

    @property
    def d(self):
        return self.means.shape[1]

    @property
    def support_radius(self):
        if self.component_var > 0:
            return np.inf
        return float(np.max(np.linalg.norm(self.means, axis=1)))

    def to_config(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "component_var": self.component_var, "name": self.name}


def random_box_mixture(K, d, var, box, seed, name="custom"):
    """Equal weights, means uniform on [-box, box]^d."""
    rng = np.random.default_rng(seed)
    return MixtureModel(np.full(K, 1.0 / K), rng.uniform(-box, box, size=(K, d)), var, name)


TOY_SEED = 20240501


def toy_preset(seed=TOY_SEED):
    """40 Gaussians in 2-D, means uniform on [-40, 40]^2, variance 40."""
    return random_box_mixture(40, 2, 40.0, 40.0, seed, name="toy40")


def three_component_preset():
    """Small 2-D Gaussian mixture used for identity checks."""
    ang = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    means = np.stack([np.cos(ang), np.sin(ang)], axis=1) * 1.5
    return MixtureModel(np.array([0.5, 0.3, 0.2]), means, 0.1, name="three")


def two_point_preset(radius=1.5):
    """Two atoms in 2-D with support radius D = radius."""
    means = np.array([[radius, 0.0], [-0.6 * radius, 0.6 * radius]])
    return MixtureModel(np.array([0.6, 0.4]), means, 0.0, name="two_point")


PRESETS = {
    "toy40": toy_preset,
    "three": three_component_preset,
    "two_point": two_point_preset,
}


# -- sampling ---------------------------------------------------------------

def sample_x0(model, rng, n=None):
    m = 1 if n is None else n
    k = rng.choice(model.K, size=m, p=model.weights)
    x = model.means[k] + np.sqrt(model.component_var) * rng.standard_normal((m, model.d))
    return x[0] if n is None else x


def forward_sample(model, schedule, t, x0, rng):
    ab = schedule.alpha_bar[t - 1]
    x0 = np.asarray(x0, dtype=float)
    return np.sqrt(ab) * x0 + np.sqrt(schedule.one_minus_ab[t - 1]) * rng.standard_normal(x0.shape)


def forward_step(schedule, t, x_prev, rng):
    """One transition q(x_t | x_{t-1})."""
    b = schedule.beta[t - 1]
    return np.sqrt(1 - b) * x_prev + np.sqrt(b) * rng.standard_normal(np.shape(x_prev))


# -- marginals and posteriors -----------------------------------------------

def _as_batch(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _component_loglik(model, ab, om, x):
    # log pi_k + log N(x; sqrt(ab) mu_k, v I), v = ab var + 1 - ab
    v = ab * model.component_var + om
    diff = x[:, None, :] - np.sqrt(ab) * model.means[None, :, :]
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    return np.log(model.weights)[None, :] - 0.5 * sq / v - 0.5 * model.d * (LOG2PI + np.log(v))


def marginal_logpdf(model, schedule, t, x_t):
    x, single = _as_batch(x_t)
    out = logsumexp(_component_loglik(model, schedule.alpha_bar[t - 1], schedule.one_minus_ab[t - 1], x), axis=1)
    return out[0] if single else out


@dataclass
class PosteriorMoments:
    mean: np.ndarray
    cov: np.ndarray
    responsibilities: np.ndarray


@dataclass
class PosteriorBatch:
    """Posterior q(x0 | x_t) for a batch: sum_k r_k N(m_k, s2 I).

    m_k = shrink * mu_k + pull * x_t, so m_k - mean = shrink (mu_k - mu_bar).
    """
    r: np.ndarray        # (n, K)
    mean: np.ndarray     # (n, d)
    mu_bar: np.ndarray   # (n, d) responsibility-weighted data means
    s2: float
    shrink: float
    pull: float

    def component_means(self, means):
        return self.shrink * means[None, :, :] + (self.mean - self.shrink * self.mu_bar)[:, None, :]

    def cov(self, means):
        second = np.einsum("nk,kd,ke->nde", self.r, means, means)
        spread = second - np.einsum("nd,ne->nde", self.mu_bar, self.mu_bar)
        d = means.shape[1]
        return self.s2 * np.eye(d)[None] + self.shrink ** 2 * spread

    def cov_apply(self, means, v):
        """Cov(x0|x_t) v row by row, without forming d x d matrices."""
        proj = self.r * (v @ means.T)                       # (n, K): r_k mu_k . v
        cv = proj @ means - np.sum(self.mu_bar * v, axis=1, keepdims=True) * self.mu_bar
        return self.s2 * v + self.shrink ** 2 * cv


def posterior_batch(model, schedule, t, x):
    ab, om = schedule.alpha_bar[t - 1], schedule.one_minus_ab[t - 1]
    ll = _component_loglik(model, ab, om, x)
    r = np.exp(ll - logsumexp(ll, axis=1, keepdims=True))
    v = ab * model.component_var + om
    shrink = om / v
    pull = np.sqrt(ab) * model.component_var / v
    mu_bar = r @ model.means
    mean = shrink * mu_bar + pull * x
    return PosteriorBatch(r, mean, mu_bar, model.component_var * om / v, shrink, pull)


def posterior_moments(model, schedule, t, x_t):
    x, single = _as_batch(x_t)
    pb = posterior_batch(model, schedule, t, x)
    cov = pb.cov(model.means)
    if single:
        return PosteriorMoments(pb.mean[0], cov[0], pb.r[0])
    return PosteriorMoments(pb.mean, cov, pb.r)


# -- reverse kernels --------------------------------------------------------

@dataclass
class ReverseKernel:
    mean: np.ndarray
    cov_kind: str        # "scalar", "diagonal" or "full"
    cov: object          # float, (d,) or (d, d)

    def dense_cov(self):
        d = self.mean.shape[-1]
        if self.cov_kind == "scalar":
            return self.cov * np.eye(d)
        if self.cov_kind == "diagonal":
            return np.diag(self.cov)
        return self.cov


def kernel_mean(sc, post_mean, x):
    return sc.coef_x0 * post_mean + sc.coef_xt * x


def family_cov(sc, family, cov):
    """Covariance description of a family given Cov(x0|x_t) (batched, (n,d,d))."""
    if family == "beta":
        return "scalar", sc.beta
    if family == "tilde_beta":
        return "scalar", sc.tilde_beta
    if family == "diag_opt":
        return "diagonal", sc.tilde_beta + sc.jac_scale * np.diagonal(cov, axis1=-2, axis2=-1)
    if family == "full_opt":
        d = cov.shape[-1]
        return "full", sc.tilde_beta * np.eye(d) + sc.jac_scale * cov
    raise ValueError(f"unknown covariance family {family!r}")


def optimal_reverse_kernel(model, schedule, t, x_t, family):
    if t < 2:
        raise ValueError("reverse kernels are defined for t >= 2")
    x, single = _as_batch(x_t)
    sc = schedule.step(t)
    pb = posterior_batch(model, schedule, t, x)
    mean = kernel_mean(sc, pb.mean, x)
    kind, cov = family_cov(sc, family, pb.cov(model.means))
    if single:
        return ReverseKernel(mean[0], kind, cov if kind == "scalar" else cov[0])
    return ReverseKernel(mean, kind, cov)


def sigma_star_matvec(model, schedule, t, x_t):
    """Counted oracle for tilde_beta_t I + c_t^2 Cov(x0|x_t), applied low-rank."""
    x = np.asarray(x_t, dtype=float)
    sc = schedule.step(t)
    pb = posterior_batch(model, schedule, t, x[None, :])

    def apply(v):
        return sc.tilde_beta * v + sc.jac_scale * pb.cov_apply(model.means, v[None, :])[0]

    return MatvecOracle(model.d, apply)


def reverse_mixture_logpdf(model, schedule, t, x_prev, x_t):
    """log q(x_{t-1} | x_t): mixture over components of the data posterior."""
    xp, single = _as_batch(x_prev)
    x, _ = _as_batch(x_t)
    sc = schedule.step(t)
    pb = posterior_batch(model, schedule, t, x)
    centers = sc.coef_xt * x[:, None, :] + sc.coef_x0 * pb.component_means(model.means)
    var = sc.tilde_beta + sc.jac_scale * pb.s2
    diff = xp[:, None, :] - centers
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    with np.errstate(divide="ignore"):
        lr = np.log(pb.r)
    out = logsumexp(lr - 0.5 * sq / var, axis=1) - 0.5 * model.d * (LOG2PI + np.log(var))
    return out[0] if single else out


def gaussian_logpdf_batch(x, mean, kind, cov):
    """Row-wise log N(x_i; mean_i, cov_i) for the three covariance kinds."""
    diff = x - mean
    d = x.shape[1]
    if kind == "scalar":
        return -0.5 * np.sum(diff * diff, axis=1) / cov - 0.5 * d * (LOG2PI + np.log(cov))
    if kind == "diagonal":
        return -0.5 * np.sum(diff * diff / cov, axis=1) - 0.5 * np.sum(LOG2PI + np.log(cov), axis=1)
    L = np.linalg.cholesky(cov)
    u = np.linalg.solve(L, diff[..., None])[..., 0]
    logdet = 2 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    return -0.5 * np.sum(u * u, axis=1) - 0.5 * logdet - 0.5 * d * LOG2PI


def reverse_kernel_logpdf(model, schedule, t, family, x_prev, x_t):
    """log p(x_{t-1} | x_t) for a Gaussian family or 'exact' (the mixture kernel)."""
    if family == "exact":
        return reverse_mixture_logpdf(model, schedule, t, x_prev, x_t)
    xp, single = _as_batch(x_prev)
    x, _ = _as_batch(x_t)
    sc = schedule.step(t)
    pb = posterior_batch(model, schedule, t, x)
    kind, cov = family_cov(sc, family, pb.cov(model.means))
    out = gaussian_logpdf_batch(xp, kernel_mean(sc, pb.mean, x), kind, cov)
    return out[0] if single else out


def sample_reverse_mixture(model, schedule, t, x_t, rng):
    """Draw x_{t-1} ~ q(x_{t-1} | x_t) for a batch of x_t."""
    x, single = _as_batch(x_t)
    sc = schedule.step(t)
    pb = posterior_batch(model, schedule, t, x)
    u = rng.random(len(x))
    k = np.minimum((np.cumsum(pb.r, axis=1) < u[:, None]).sum(axis=1), model.K - 1)
    centers = sc.coef_xt * x + sc.coef_x0 * pb.component_means(model.means)[np.arange(len(x)), k]
    var = sc.tilde_beta + sc.jac_scale * pb.s2
    out = centers + np.sqrt(var) * rng.standard_normal(x.shape)
    return out[0] if single else out
