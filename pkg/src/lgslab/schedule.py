"""Noise schedules for a T-step DDPM and the per-step quantities derived from them.

Arrays are stored 0-based (index 0 is step t=1).  Accessors that take a
step index use the 1-based convention t = 1..T.  gamma and tilde_beta are
defined for t = 2..T only, so their arrays have length T-1.
"""
from dataclasses import dataclass, field

import numpy as np


class InvalidSchedule(ValueError):
    pass


@dataclass(frozen=True)
class StepCoefficients:
    """Everything a reverse step t -> t-1 needs, in one place."""
    t: int
    alpha_bar: float
    alpha_bar_prev: float
    one_minus_ab: float
    one_minus_ab_prev: float
    beta: float
    tilde_beta: float
    gamma: float
    coef_x0: float  # sqrt(ab_{t-1}) beta_t / (1 - ab_t), multiplies E[x0|xt]
    coef_xt: float  # sqrt(alpha_t) (1 - ab_{t-1}) / (1 - ab_t), multiplies x_t

    @property
    def jac_scale(self):
        # ab_{t-1} beta_t^2 / (1-ab_t)^2, the weight of Cov(x0|xt) in the optimal covariance
        return self.coef_x0 ** 2


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray
    one_minus_ab: np.ndarray
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    @property
    def T(self):
        return len(self.beta)

    @property
    def snr(self):
        return self.alpha_bar / self.one_minus_ab

    @property
    def gamma(self):
        # SNR_{t-1} - SNR_t for t=2..T, written without the subtraction
        ab_prev, om_prev, om = self.alpha_bar[:-1], self.one_minus_ab[:-1], self.one_minus_ab[1:]
        return ab_prev * self.beta[1:] / (om_prev * om)

    @property
    def tilde_beta(self):
        return self.one_minus_ab[:-1] * self.beta[1:] / self.one_minus_ab[1:]

    def step(self, t):
        if not 1 <= t <= self.T:
            raise IndexError(f"step {t} outside 1..{self.T}")
        i = t - 1
        ab, om, b = self.alpha_bar[i], self.one_minus_ab[i], self.beta[i]
        if t == 1:
            ab_prev, om_prev, tb, g = 1.0, 0.0, 0.0, np.inf
        else:
            ab_prev, om_prev = self.alpha_bar[i - 1], self.one_minus_ab[i - 1]
            tb = om_prev * b / om
            g = ab_prev * b / (om_prev * om)
        return StepCoefficients(
            t=t, alpha_bar=float(ab), alpha_bar_prev=float(ab_prev),
            one_minus_ab=float(om), one_minus_ab_prev=float(om_prev),
            beta=float(b), tilde_beta=float(tb), gamma=float(g),
            coef_x0=float(np.sqrt(ab_prev) * b / om),
            coef_xt=float(np.sqrt(1.0 - b) * om_prev / om),
        )

    def to_config(self):
        return {"kind": self.kind, "T": self.T, **self.params}


def _check(s):
    b, ab = s.beta, s.alpha_bar
    if not (np.all(b > 0) and np.all(b < 1)):
        raise InvalidSchedule("beta must lie in (0, 1)")
    if not np.all(np.diff(ab) < 0):
        raise InvalidSchedule("alpha_bar must be strictly decreasing")
    if s.T >= 2 and not np.all(s.gamma > 0):
        raise InvalidSchedule("gamma must be positive")
    return s


def from_beta(beta, kind="custom", params=None):
    beta = np.asarray(beta, dtype=float)
    if beta.ndim != 1 or len(beta) < 2:
        raise InvalidSchedule("need at least two steps")
    if not (np.all(beta > 0) and np.all(beta < 1)):
        raise InvalidSchedule("beta must lie in (0, 1)")
    log_ab = np.cumsum(np.log1p(-beta))
    return _check(NoiseSchedule(beta, np.exp(log_ab), -np.expm1(log_ab), kind, params or {}))


def from_snr(snr, kind="custom", params=None):
    """Build a schedule from a strictly decreasing SNR sequence SNR_1..SNR_T."""
    s = np.asarray(snr, dtype=float)
    if s.ndim != 1 or len(s) < 2:
        raise InvalidSchedule("need at least two steps")
    if not (np.all(s > 0) and np.all(np.diff(s) < 0)):
        raise InvalidSchedule("SNR must be positive and strictly decreasing")
    ab = s / (1 + s)
    om = 1 / (1 + s)
    beta = np.empty_like(s)
    beta[0] = om[0]
    # 1 - ab_t/ab_{t-1} = (s_{t-1} - s_t) / (s_{t-1} (1 + s_t))
    beta[1:] = (s[:-1] - s[1:]) / (s[:-1] * (1 + s[1:]))
    return _check(NoiseSchedule(beta, ab, om, kind, params or {}))


def make_linear_beta(T, beta_min, beta_max):
    if not (0 < beta_min <= beta_max < 1):
        raise InvalidSchedule("need 0 < beta_min <= beta_max < 1")
    if T < 2:
        raise InvalidSchedule("T must be at least 2")
    return from_beta(np.linspace(beta_min, beta_max, T), "linear_beta",
                     {"beta_min": beta_min, "beta_max": beta_max})


def make_snr_uniform(T, snr_max, snr_min):
    """SNR equally spaced from snr_max (t=1) down to snr_min (t=T)."""
    if not snr_max > snr_min > 0:
        raise InvalidSchedule("need snr_max > snr_min > 0")
    if T < 2:
        raise InvalidSchedule("T must be at least 2")
    step = (snr_max - snr_min) / (T - 1)
    snr = snr_max - step * np.arange(T)
    snr[-1] = snr_min
    return from_snr(snr, "snr_uniform", {"snr_max": snr_max, "snr_min": snr_min})


def make_log_snr_uniform(T, snr_max, snr_min):
    """log SNR equally spaced; gamma_t is then proportional to SNR_t."""
    if not snr_max > snr_min > 0:
        raise InvalidSchedule("need snr_max > snr_min > 0")
    if T < 2:
        raise InvalidSchedule("T must be at least 2")
    snr = np.exp(np.linspace(np.log(snr_max), np.log(snr_min), T))
    return from_snr(snr, "log_snr_uniform", {"snr_max": snr_max, "snr_min": snr_min})


def counterexample_theta(T):
    """theta_t = T^-4 + (T-t)/(T-1) (1 - T^-4), t = 1..T."""
    t = np.arange(1, T + 1)
    eps = float(T) ** -4
    return eps + (T - t) / (T - 1) * (1 - eps)


def make_counterexample_schedule(T):
    if T < 2:
        raise InvalidSchedule("T must be at least 2")
    return from_snr(counterexample_theta(T), "counterexample", {})


CONSTRUCTORS = {
    "linear_beta": (make_linear_beta, ("beta_min", "beta_max")),
    "snr_uniform": (make_snr_uniform, ("snr_max", "snr_min")),
    "log_snr_uniform": (make_log_snr_uniform, ("snr_max", "snr_min")),
    "counterexample": (make_counterexample_schedule, ()),
}


def from_config(rec):
    """Inverse of NoiseSchedule.to_config for the named constructors."""
    kind = rec.get("kind")
    if kind not in CONSTRUCTORS:
        raise InvalidSchedule(f"unknown schedule kind {kind!r}")
    fn, keys = CONSTRUCTORS[kind]
    missing = [k for k in ("T",) + keys if k not in rec]
    if missing:
        raise InvalidSchedule(f"schedule {kind} missing {', '.join(missing)}")
    return fn(int(rec["T"]), *(float(rec[k]) for k in keys))
