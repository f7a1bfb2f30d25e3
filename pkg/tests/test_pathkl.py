import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lgslab import _kernels as kern
from lgslab import pathkl
from lgslab.linalg import gaussian_kl
from lgslab.mixture import (MixtureModel, optimal_reverse_kernel, posterior_batch, reverse_kernel_logpdf,
                            reverse_mixture_logpdf, three_component_preset, toy_preset, two_point_preset)
from lgslab.pathkl import (NonPositiveValue, TraceMoments, UnboundedSupport, check_taylor_bounds,
                           expected_mi_mc, fit_loglog_slope, full_cov_loss_closedform, gap_values,
                           mi_gaussian_channel_mc, path_kl_families, path_kl_mc, per_step_gap_mc,
                           step_terms, taylor_bounds, terminal_kl_mc, trajectory_path_kl_mc)
from lgslab.schedule import from_snr, make_linear_beta, make_log_snr_uniform, make_snr_uniform

SCH = make_linear_beta(16, 1e-2, 0.4)
FAMS = ("full_opt", "diag_opt", "tilde_beta", "beta")


def kernel_inputs(model, schedule, t, n, seed):
    rng = np.random.default_rng(seed)
    sc = schedule.step(t)
    k = rng.choice(model.K, n, p=model.weights)
    x = math.sqrt(sc.alpha_bar) * model.means[k] + math.sqrt(sc.alpha_bar * model.component_var
                                                              + sc.one_minus_ab) * rng.standard_normal((n, model.d))
    return sc, x, rng.standard_normal((n, model.d)), rng.random(n)


@pytest.mark.parametrize("model", [three_component_preset(), two_point_preset(),
                                   MixtureModel(np.full(4, 0.25), np.random.default_rng(0).uniform(-2, 2, (4, 3)), 0.3)],
                         ids=["three", "two_point", "d3"])
def test_kernel_columns_match_direct_densities(model):
    # independent route: numpy reverse densities evaluated at the same antithetic pair
    t = 9
    sc, x, z, u = kernel_inputs(model, SCH, t, 300, 1)
    out = np.empty((len(x), kern.NCOL))
    kern.step_terms(x, z, u, model.means, np.log(model.weights), float(model.component_var),
                    sc.alpha_bar, sc.one_minus_ab, sc.alpha_bar_prev, sc.one_minus_ab_prev, sc.beta, out)
    pb = posterior_batch(model, SCH, t, x)
    kk = np.minimum((np.cumsum(pb.r, axis=1) <= u[:, None]).sum(axis=1), model.K - 1)
    centers = sc.coef_xt * x + sc.coef_x0 * pb.component_means(model.means)[np.arange(len(x)), kk]
    sd = math.sqrt(sc.tilde_beta + sc.jac_scale * pb.s2)
    cols = {"full_opt": kern.LR_FULL, "diag_opt": kern.LR_DIAG, "tilde_beta": kern.LR_TILDE, "beta": kern.LR_BETA}
    for fam, col in cols.items():
        ref = 0.0
        for sgn in (1.0, -1.0):
            xp = centers + sgn * sd * z
            ref = ref + 0.5 * (reverse_mixture_logpdf(model, SCH, t, xp, x)
                               - reverse_kernel_logpdf(model, SCH, t, fam, xp, x))
        np.testing.assert_allclose(out[:, col], ref, atol=1e-9, rtol=1e-9)
    kfull = optimal_reverse_kernel(model, SCH, t, x, "full_opt")
    for fam, col in (("diag_opt", kern.KL_DIAG), ("tilde_beta", kern.KL_TILDE), ("beta", kern.KL_BETA)):
        kf = optimal_reverse_kernel(model, SCH, t, x, fam)
        dense = [np.diag(kf.cov[i]) if kf.cov_kind == "diagonal" else kf.cov * np.eye(model.d)
                 for i in range(len(x))]
        ref = [gaussian_kl(kfull.mean[i], kfull.cov[i], kf.mean[i], dense[i]) for i in range(len(x))]
        np.testing.assert_allclose(out[:, col], ref, atol=1e-12, rtol=1e-9)
    covs = pb.cov(model.means)
    np.testing.assert_allclose(out[:, kern.TRCOV], np.trace(covs, axis1=1, axis2=2), rtol=1e-10, atol=1e-14)


def test_exact_family_has_zero_gap():
    assert per_step_gap_mc(three_component_preset(), SCH, "exact", 5, 1000, 0) == (0.0, 0.0)
    assert np.all(gap_values(np.ones((4, kern.NCOL)), "exact") == 0)


def test_single_gaussian_full_gap_vanishes():
    m = MixtureModel(np.array([1.0]), np.array([[0.5, -1.0]]), 2.0)
    for t in (2, 8, 16):
        g, se = per_step_gap_mc(m, SCH, "full_opt", t, 20_000, 1, method="paired")
        assert abs(g) <= 3 * se + 1e-12
        g, se = per_step_gap_mc(m, SCH, "full_opt", t, 20_000, 1)
        assert abs(g) < 1e-10


def test_paired_and_controlled_agree():
    m = three_component_preset()
    for fam in FAMS:
        for t in (3, 9, 15):
            a, sa = per_step_gap_mc(m, SCH, fam, t, 40_000, 2, method="paired")
            b, sb = per_step_gap_mc(m, SCH, fam, t, 40_000, 2)
            assert abs(a - b) <= 3 * math.hypot(sa, sb)
            if fam == "full_opt":
                assert sb <= sa * 1.001


def test_toy_tilde_gap_exceeds_full_gap():
    m = toy_preset()
    s = make_log_snr_uniform(16, 10.0, 1e-4)
    est = path_kl_families(m, s, ("full_opt", "tilde_beta"), 20_000, 3)
    f, b = est["full_opt"], est["tilde_beta"]
    se = np.hypot(f.per_step_stderr, b.per_step_stderr)
    assert np.all(b.per_step_gap - f.per_step_gap > -3 * se)
    assert b.gap_sum > f.gap_sum


def test_unknown_family_and_method():
    with pytest.raises(ValueError):
        per_step_gap_mc(three_component_preset(), SCH, "nope", 3, 10, 0)
    with pytest.raises(ValueError):
        gap_values(np.ones((2, kern.NCOL)), "full_opt", "other")
    with pytest.raises(ValueError):
        step_terms(three_component_preset(), SCH, 1, 10, 0)


def test_terminal_kl_standard_normal_is_zero():
    m = MixtureModel(np.array([1.0]), np.zeros((1, 2)), 1.0)
    v, se = terminal_kl_mc(m, SCH, 10_000, 0)
    assert abs(v) <= 3 * se + 1e-12


def test_terminal_kl_vanishes_without_signal():
    s = make_log_snr_uniform(10, 10.0, 1e-12)
    v, se = terminal_kl_mc(three_component_preset(), s, 10_000, 0)
    assert abs(v) <= 3 * se + 1e-9


def test_terminal_kl_toy_long_schedule():
    v, se = terminal_kl_mc(toy_preset(), make_linear_beta(1000, 1e-4, 0.02), 20_000, 0)
    assert v > 0 and se < v


def test_terminal_kl_matches_plain_mc():
    # independent route: log q(x_T) - log N(0, I) averaged over raw draws
    m = three_component_preset()
    s = make_snr_uniform(6, 4.0, 0.5)
    v, se = terminal_kl_mc(m, s, 20_000, 4)
    from lgslab.mixture import marginal_logpdf
    rng = np.random.default_rng(9)
    k = rng.choice(m.K, 200_000, p=m.weights)
    ab, om = s.alpha_bar[-1], s.one_minus_ab[-1]
    x = math.sqrt(ab) * m.means[k] + math.sqrt(ab * m.component_var + om) * rng.standard_normal((200_000, 2))
    vals = marginal_logpdf(m, s, 6, x) + 0.5 * np.sum(x * x, 1) + math.log(2 * math.pi)
    assert abs(vals.mean() - v) <= 3 * math.hypot(se, vals.std() / math.sqrt(len(vals)))


def test_path_kl_exact_family_is_terminal_only():
    m = three_component_preset()
    e = path_kl_mc(m, SCH, "exact", 5000, 1)
    assert e.gap_sum == 0.0
    assert e.total == e.terminal_kl
    assert e.T == SCH.T


def test_path_kl_total_nonnegative():
    e = path_kl_mc(three_component_preset(), SCH, "tilde_beta", 5000, 1)
    assert e.total >= -3 * e.stderr
    assert np.all(e.per_step_gap > -3 * e.per_step_stderr)


def test_trajectory_estimate_matches_decomposition():
    m = three_component_preset()
    for fam in ("tilde_beta", "exact"):
        a, sa = trajectory_path_kl_mc(m, SCH, fam, 100_000, 5)
        e = path_kl_mc(m, SCH, fam, 50_000, 5)
        assert abs(a - e.total) <= 3 * math.hypot(sa, e.stderr)


def test_stderr_shrinks_like_root_n():
    m = three_component_preset()
    r = []
    for seed in range(6):
        _, s1 = per_step_gap_mc(m, SCH, "tilde_beta", 7, 20_000, seed)
        _, s2 = per_step_gap_mc(m, SCH, "tilde_beta", 7, 40_000, seed)
        r.append(s1 / s2)
    assert np.mean(r) == pytest.approx(math.sqrt(2), rel=0.2)


def test_estimates_are_reproducible():
    m = three_component_preset()
    assert per_step_gap_mc(m, SCH, "diag_opt", 6, 5000, 11) == per_step_gap_mc(m, SCH, "diag_opt", 6, 5000, 11)
    assert per_step_gap_mc(m, SCH, "diag_opt", 6, 5000, 11) != per_step_gap_mc(m, SCH, "diag_opt", 6, 5000, 12)


def test_closed_form_loss_zero_for_single_atom():
    m = MixtureModel(np.array([1.0]), np.array([[0.3, 0.1]]), 0.0)
    assert full_cov_loss_closedform(m, SCH, 5, 1000, 0)[0] == pytest.approx(0.0, abs=1e-15)


def test_closed_form_loss_single_gaussian():
    var = 1.5
    m = MixtureModel(np.array([1.0]), np.array([[0.3, 0.1]]), var)
    t = 6
    sc = SCH.step(t)
    s2 = var * sc.one_minus_ab / (sc.alpha_bar * var + sc.one_minus_ab)
    v, se = full_cov_loss_closedform(m, SCH, t, 500, 0)
    assert v == pytest.approx(math.log1p(sc.gamma * s2), rel=1e-12)
    assert se < 1e-12


def test_channel_identity():
    m = three_component_preset()
    for t in (3, 8, 14):
        closed, cse = full_cov_loss_closedform(m, SCH, t, 40_000, 1)
        gap, gse = per_step_gap_mc(m, SCH, "full_opt", t, 40_000, 1)
        mi, mse = expected_mi_mc(m, SCH, t, 40_000, 1)
        assert abs(closed - gap - mi) <= 3 * math.sqrt(cse ** 2 + gse ** 2 + mse ** 2)


def test_mi_vanishes_without_snr_increment():
    s = from_snr(np.array([1.0 + 1e-10, 1.0]))
    v, se = mi_gaussian_channel_mc(three_component_preset(), s, 2, np.array([0.1, 0.2]), 20_000, 0)
    assert abs(v) <= 3 * se + 1e-8


def test_mi_vanishes_for_concentrated_posterior():
    m = MixtureModel(np.array([0.5, 0.5]), np.array([[3.0, 0.0], [-3.0, 0.0]]), 0.0)
    s = from_snr(np.array([60.0, 50.0]))
    x = math.sqrt(s.alpha_bar[1]) * m.means[0]
    v, se = mi_gaussian_channel_mc(m, s, 2, x, 20_000, 0)
    assert abs(v) <= 3 * se + 1e-12


def test_mi_matches_gaussian_formula():
    # for a Gaussian posterior N(m, s2 I) the channel MI is d/2 log(1 + gamma s2)
    var = 0.7
    m = MixtureModel(np.array([1.0]), np.zeros((1, 2)), var)
    t = 5
    sc = SCH.step(t)
    s2 = var * sc.one_minus_ab / (sc.alpha_bar * var + sc.one_minus_ab)
    v, se = mi_gaussian_channel_mc(m, SCH, t, np.array([0.2, 0.4]), 50_000, 0)
    assert abs(v - math.log1p(sc.gamma * s2)) <= 3 * se


def test_taylor_bounds_examples():
    mom = TraceMoments(2.0, 3.0)
    assert taylor_bounds(mom, 0.0, 1.5) == (0.0, 0.0)
    zero = TraceMoments(0.0, 0.0)
    up, lo = taylor_bounds(zero, 0.1, 1.5)
    assert up == pytest.approx(0.1 ** 3 * 1.5 ** 6 / 6)
    assert lo == pytest.approx(-0.1 ** 3 * 1.5 ** 6 / 3)
    with pytest.raises(UnboundedSupport):
        taylor_bounds(mom, 0.1, np.inf)


def test_taylor_inequalities_two_point():
    m = two_point_preset()
    for g in (0.3, 0.03):
        r = check_taylor_bounds(m, from_snr(np.array([1.0 + g, 1.0])), 2, 20_000, 0)
        assert r["gamma"] == pytest.approx(g, rel=1e-12)
        assert r["upper_slack"] >= -3 * r["upper_se"]
        assert r["lower_slack"] >= -3 * r["lower_se"]


def test_fit_slope_exact_powers():
    T = np.array([16, 32, 64, 128, 256])
    assert fit_loglog_slope(T, 3.0 / T).slope == pytest.approx(-1.0, abs=1e-12)
    f = fit_loglog_slope(T, 0.5 / T ** 2)
    assert f.slope == pytest.approx(-2.0, abs=1e-12)
    assert f.residual < 1e-12


def test_fit_slope_errors():
    with pytest.raises(ValueError):
        fit_loglog_slope([1, 2, 3], [1, 2, 3])
    with pytest.raises(NonPositiveValue):
        fit_loglog_slope([1, 2, 3, 4], [1, 0, 3, 4])


@given(st.floats(-3, 3), st.floats(1e-3, 1e3))
def test_fit_slope_recovers_power(p, c):
    T = np.array([8, 16, 32, 64, 128])
    assert fit_loglog_slope(T, c * T ** p).slope == pytest.approx(p, abs=1e-9)


def test_allocation_sums_and_strata():
    w = np.array([0.5, 0.3, 0.2])
    for n in (1, 7, 100, 12345):
        c = pathkl._allocate(w, n)
        assert c.sum() == n
        assert np.all(np.abs(c - w * n) < 1)
