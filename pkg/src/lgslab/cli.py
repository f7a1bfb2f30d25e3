"""Command-line runner: `lgslab run <config>` and `lgslab validate <config>`.

Configs are INI files with an [experiment] section plus optional [model],
[schedule] and [sampler] sections.  `--set section.key=value` overrides a
key.  Output goes to <root>/<experiment.output>, where root is the current
directory or $LGSLAB_OUTPUT_ROOT.

Exit codes: 0 success, 2 config error, 3 numerical invariant violated.
"""
import argparse
import configparser
import csv
import json
import math
import os
import sys
import time
from fractions import Fraction

import numpy as np

from . import __version__
from . import guidance, lanczos, mixture, pathkl, sampler, schedule

EXPERIMENTS = ("pathkl-rates", "lanczos-bench", "guidance-rates", "cost-count",
               "sample", "taylor-check", "channel-check")
EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    pass


# -- config parsing -------------------------------------------------------------

class Config:
    def __init__(self, path, overrides=()):
        self.path = path
        self.parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                self.text = fh.read()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
        try:
            self.parser.read_string(self.text, source=path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.partition(".")
            if not sep or not dot:
                raise ConfigError(f"--set {item!r}: expected section.key=value")
            if not self.parser.has_section(section):
                self.parser.add_section(section)
            self.parser.set(section, name, value)

    def line_of(self, section, key=None):
        cur = None
        for i, raw in enumerate(self.text.splitlines(), 1):
            line = raw.strip()
            if line.startswith("[") and line.endswith("]"):
                cur = line[1:-1].strip()
                if key is None and cur == section:
                    return i
            elif cur == section and key is not None:
                name = line.split("=", 1)[0].split(":", 1)[0].strip()
                if name.lower() == key.lower():
                    return i
        return None

    def error(self, section, key, msg):
        ln = self.line_of(section, key)
        where = f"{self.path}:{ln}" if ln else f"{self.path}"
        label = f"[{section}] {key}" if key else f"[{section}]"
        return f"{where}: {label}: {msg}"

    def has(self, section, key):
        return self.parser.has_option(section, key)

    def get(self, section, key, default=None):
        if self.parser.has_option(section, key):
            return self.parser.get(section, key).strip()
        return default

    def section(self, name):
        return dict(self.parser.items(name)) if self.parser.has_section(name) else {}


def _num(cfg, errors, section, key, kind=float, default=None, required=False, check=None, why=""):
    raw = cfg.get(section, key)
    if raw is None:
        if required:
            errors.append(cfg.error(section, key, "missing (required)"))
        return default
    try:
        val = kind(raw)
    except ValueError:
        errors.append(cfg.error(section, key, f"cannot parse {raw!r} as {kind.__name__}"))
        return default
    if check is not None and not check(val):
        errors.append(cfg.error(section, key, f"{raw!r} {why}"))
        return default
    return val


def _int_list(cfg, errors, section, key, default=None):
    raw = cfg.get(section, key)
    if raw is None:
        return default
    try:
        return [int(v) for v in raw.replace(",", " ").split()]
    except ValueError:
        errors.append(cfg.error(section, key, f"cannot parse {raw!r} as a list of integers"))
        return default


def _float_list(cfg, errors, section, key, default=None):
    raw = cfg.get(section, key)
    if raw is None:
        return default
    try:
        return [float(v) for v in raw.replace(",", " ").split()]
    except ValueError:
        errors.append(cfg.error(section, key, f"cannot parse {raw!r} as a list of numbers"))
        return default


def _model(cfg, errors):
    sec = cfg.section("model")
    preset = sec.get("preset")
    if preset is not None:
        if preset not in mixture.PRESETS:
            errors.append(cfg.error("model", "preset", f"unknown preset {preset!r} "
                                    f"(known: {', '.join(sorted(mixture.PRESETS))})"))
            return None
        if preset == "toy40" and "seed" in sec:
            seed = _num(cfg, errors, "model", "seed", int)
            return mixture.toy_preset(seed) if seed is not None else None
        return mixture.PRESETS[preset]()
    if not sec:
        return None
    K = _num(cfg, errors, "model", "K", int, required=True, check=lambda v: v >= 1, why="must be >= 1")
    d = _num(cfg, errors, "model", "d", int, required=True, check=lambda v: v >= 1, why="must be >= 1")
    var = _num(cfg, errors, "model", "var", float, 0.0, check=lambda v: v >= 0, why="must be >= 0")
    box = _num(cfg, errors, "model", "box", float, 1.0, check=lambda v: v > 0, why="must be > 0")
    seed = _num(cfg, errors, "model", "seed", int, required=True)
    if None in (K, d, seed):
        return None
    return mixture.random_box_mixture(K, d, var, box, seed)


def _schedule_factory(cfg, errors):
    sec = cfg.section("schedule")
    kind = sec.get("kind")
    if kind is None:
        errors.append(cfg.error("schedule", "kind", "missing (required)"))
        return None
    if kind not in schedule.CONSTRUCTORS:
        errors.append(cfg.error("schedule", "kind", f"unknown schedule {kind!r} "
                                f"(known: {', '.join(schedule.CONSTRUCTORS)})"))
        return None
    _, keys = schedule.CONSTRUCTORS[kind]
    params = {}
    for k in keys:
        params[k] = _num(cfg, errors, "schedule", k, float, required=True)
    if any(v is None for v in params.values()):
        return None

    def make(T):
        return schedule.from_config({"kind": kind, "T": T, **params})

    return make


def _sampler_config(cfg, errors, seed):
    mode = cfg.get("sampler", "mode", "lanczos")
    if mode not in sampler.MODES:
        errors.append(cfg.error("sampler", "mode", f"unknown mode {mode!r}"))
        return None
    m = _num(cfg, errors, "sampler", "m", int, 3, check=lambda v: v >= 1, why="must be >= 1")
    l = _num(cfg, errors, "sampler", "l", int, 1, check=lambda v: v >= 1, why="must be >= 1")
    w = _num(cfg, errors, "sampler", "w", float, 1.0, check=lambda v: 0 < v <= 1, why="must lie in (0, 1]")
    probes = _num(cfg, errors, "sampler", "guard_probes", int, 0, check=lambda v: v >= 0, why="must be >= 0")
    sigma_pix = _num(cfg, errors, "sampler", "sigma_pix", float, math.inf, check=lambda v: v > 0, why="must be > 0")
    gstep = _num(cfg, errors, "sampler", "guard_step", int, 2, check=lambda v: v >= 1, why="must be >= 1")
    clamp = cfg.get("sampler", "clamp", "false").lower() in ("1", "true", "yes", "on")
    final = cfg.get("sampler", "final_step", "false").lower() in ("1", "true", "yes", "on")
    if probes and mode != "lanczos":
        errors.append(cfg.error("sampler", "guard_probes", "the guard needs mode = lanczos"))
        return None
    guard = sampler.GuardConfig(probes, sigma_pix, gstep) if probes else None
    try:
        return sampler.SamplerConfig(mode, m, l, w, guard, clamp, final, seed)
    except (TypeError, ValueError) as exc:
        errors.append(cfg.error("sampler", None, str(exc)))
        return None


def check_config(cfg):
    """Validate a config; returns (errors, plan)."""
    errors = []
    if not cfg.parser.has_section("experiment"):
        return [f"{cfg.path}: missing [experiment] section"], None
    kind = cfg.get("experiment", "kind")
    if kind is None:
        errors.append(cfg.error("experiment", "kind", "missing (required)"))
    elif kind not in EXPERIMENTS:
        errors.append(cfg.error("experiment", "kind", f"unknown experiment {kind!r} "
                                f"(known: {', '.join(EXPERIMENTS)})"))
    seed = _num(cfg, errors, "experiment", "seed", int, required=True)
    n = _num(cfg, errors, "experiment", "n", int, 1000, check=lambda v: v > 0, why="must be positive")
    output = cfg.get("experiment", "output", kind or "out")
    plan = {"kind": kind, "seed": seed, "n": n, "output": output}
    if kind is None or kind not in EXPERIMENTS:
        return errors, None

    needs_grid = kind in ("pathkl-rates", "guidance-rates", "sample", "cost-count")
    if needs_grid:
        default = {"guidance-rates": [64, 128, 256, 512, 1024, 2048, 4096]}.get(kind)
        grid = _int_list(cfg, errors, "experiment", "T_grid", default)
        if grid is None:
            errors.append(cfg.error("experiment", "T_grid", "missing (required)"))
        else:
            lo = 4 if kind == "guidance-rates" else 2
            bad = [T for T in grid if T < lo]
            if bad:
                errors.append(cfg.error("experiment", "T_grid",
                                        f"entries {bad} below the minimum {lo} (step sums run over t=2..T)"))
            if kind == "pathkl-rates" and len(grid) < 4:
                errors.append(cfg.error("experiment", "T_grid", "need at least 4 values for a slope fit"))
        plan["T_grid"] = grid

    if kind in ("pathkl-rates", "sample", "cost-count", "channel-check", "taylor-check"):
        model = _model(cfg, errors)
        if model is None and not any("[model]" in e for e in errors):
            errors.append(cfg.error("model", None, "missing model (preset or inline K, d, var, box, seed)"))
        plan["model"] = model
    if kind in ("pathkl-rates", "sample", "cost-count", "channel-check"):
        make = _schedule_factory(cfg, errors)
        plan["make_schedule"] = make
        grid = plan.get("T_grid") or []
        if kind == "channel-check":
            T = _num(cfg, errors, "schedule", "T", int, required=True, check=lambda v: v >= 2, why="must be >= 2")
            grid = [T] if T else []
            plan["T"] = T
        if make is not None:
            for T in grid:
                try:
                    make(T)
                except (schedule.InvalidSchedule, ValueError) as exc:
                    errors.append(cfg.error("schedule", None, f"T={T}: {exc}"))
    if kind == "pathkl-rates":
        fams = cfg.get("experiment", "families", "full_opt diag_opt tilde_beta").replace(",", " ").split()
        bad = [f for f in fams if f not in pathkl.GAP_FAMILIES]
        if bad:
            errors.append(cfg.error("experiment", "families", f"unknown families {bad}"))
        plan["families"] = fams
        plan["budget"] = (n or 0) * sum(T - 1 for T in (plan.get("T_grid") or []))
    if kind in ("sample", "cost-count"):
        plan["sampler"] = _sampler_config(cfg, errors, seed or 0)
    if kind == "cost-count":
        raw = cfg.get("experiment", "cases", "3,1,1; 5,1,1; 3,2,1; 3,3,1; 5,2,1; 5,3,1; 3,1,0.25; 3,2,0.25")
        cases = []
        for part in raw.split(";"):
            try:
                k, l, w = part.split(",")
                cases.append((int(k), int(l), float(w)))
            except ValueError:
                errors.append(cfg.error("experiment", "cases", f"cannot parse case {part.strip()!r} as k,l,w"))
        plan["cases"] = cases
    if kind == "lanczos-bench":
        plan["instances"] = _num(cfg, errors, "experiment", "instances", int, 1000,
                                 check=lambda v: v > 0, why="must be positive")
    if kind == "taylor-check":
        plan["gammas"] = _float_list(cfg, errors, "experiment", "gammas", [0.3, 0.1, 0.03, 0.01])
        plan["snr_base"] = _num(cfg, errors, "experiment", "snr_base", float, 1.0,
                                check=lambda v: v > 0, why="must be positive")
        model = plan.get("model")
        if model is not None and not np.isfinite(model.support_radius):
            errors.append(cfg.error("model", None, "taylor-check needs point masses (var = 0)"))
    if kind == "channel-check":
        plan["steps"] = _int_list(cfg, errors, "experiment", "steps", None)
        T = plan.get("T")
        if plan["steps"] is None:
            errors.append(cfg.error("experiment", "steps", "missing (required)"))
        elif T and any(not 2 <= t <= T for t in plan["steps"]):
            errors.append(cfg.error("experiment", "steps", f"steps must lie in 2..{T}"))
    return errors, plan


# -- output helpers ---------------------------------------------------------------

def _outdir(plan):
    root = os.environ.get("LGSLAB_OUTPUT_ROOT", os.getcwd())
    path = os.path.join(root, plan["output"])
    os.makedirs(path, exist_ok=True)
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, Fraction):
        return str(v)
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# manifest={MANIFEST}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_svg(path, title, series, xlabel="T", ylabel="value"):
    """Minimal log-log line plot: series is a list of (label, xs, ys)."""
    W, H, L, B = 560, 400, 70, 50
    pts = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys) if x > 0 and y > 0]
    if not pts:
        return
    lx = [math.log10(p[0]) for p in pts]
    ly = [math.log10(p[1]) for p in pts]
    x0, x1 = min(lx), max(lx) + 1e-12
    y0, y1 = min(ly), max(ly) + 1e-12

    def sx(x):
        return L + (math.log10(x) - x0) / (x1 - x0) * (W - L - 20)

    def sy(y):
        return H - B - (math.log10(y) - y0) / (y1 - y0) * (H - B - 30)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
           f'<text x="{W / 2}" y="16" text-anchor="middle" font-size="13">{title}</text>',
           f'<line x1="{L}" y1="{H - B}" x2="{W - 20}" y2="{H - B}" stroke="black"/>',
           f'<line x1="{L}" y1="{H - B}" x2="{L}" y2="30" stroke="black"/>']
    for e in range(math.floor(x0), math.ceil(x1) + 1):
        if x0 - 1e-9 <= e <= x1 + 1e-9:
            out.append(f'<text x="{sx(10 ** e):.1f}" y="{H - B + 15}" text-anchor="middle">1e{e}</text>')
    for e in range(math.floor(y0), math.ceil(y1) + 1):
        if y0 - 1e-9 <= e <= y1 + 1e-9:
            out.append(f'<text x="{L - 5}" y="{sy(10 ** e) + 4:.1f}" text-anchor="end">1e{e}</text>')
    out.append(f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle">{xlabel} (log)</text>')
    out.append(f'<text x="14" y="{H / 2}" transform="rotate(-90 14 {H / 2})" text-anchor="middle">{ylabel} (log)</text>')
    for i, (label, xs, ys) in enumerate(series):
        c = colors[i % len(colors)]
        p = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys) if x > 0 and y > 0)
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{p}"/>')
        out.append(f'<text x="{L + 10}" y="{40 + 14 * i}" fill="{c}">{label}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def _versions():
    import scipy
    return {"lgslab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": sys.version.split()[0]}


# -- experiments ----------------------------------------------------------------------

def run_pathkl_rates(plan, out):
    model, fams, n, seed = plan["model"], plan["families"], plan["n"], plan["seed"]
    summary, files = [], []
    per_T = {}
    for T in plan["T_grid"]:
        est = pathkl.path_kl_families(model, plan["make_schedule"](T), fams, n, seed)
        per_T[T] = est
        name = f"pathkl_steps_T{T}.csv"
        rows = [(t, f, est[f].per_step_gap[t - 2], est[f].per_step_stderr[t - 2])
                for f in fams for t in range(2, T + 1)]
        write_csv(os.path.join(out, name), ["t", "family", "gap", "stderr"], rows)
        files.append(name)
        for f in fams:
            e = est[f]
            gse = float(np.sqrt(np.sum(e.per_step_stderr ** 2)))
            summary.append((T, f, e.total, e.stderr, e.gap_sum, gse, e.terminal_kl, e.terminal_stderr))
    write_csv(os.path.join(out, "pathkl_summary.csv"),
              ["T", "family", "total", "stderr", "gap_sum", "gap_stderr", "terminal_kl", "terminal_stderr"],
              summary)
    files.append("pathkl_summary.csv")
    grid = plan["T_grid"]
    slopes, ok = {}, True
    for f in fams:
        if f == "exact":
            continue
        gaps = [per_T[T][f].gap_sum for T in grid]
        tots = [per_T[T][f].total for T in grid]
        slopes[f] = {"gap_sum": pathkl.fit_loglog_slope(grid, gaps).slope if min(gaps) > 0 else None,
                     "total": pathkl.fit_loglog_slope(grid, tots).slope}
    order = [f for f in ("full_opt", "diag_opt", "tilde_beta", "beta") if f in fams]
    for T in grid:
        for lo, hi in zip(order, order[1:]):
            a, b = per_T[T][lo], per_T[T][hi]
            se = math.hypot(float(np.sqrt(np.sum(a.per_step_stderr ** 2))),
                            float(np.sqrt(np.sum(b.per_step_stderr ** 2))))
            if a.gap_sum > b.gap_sum + 3 * se:
                ok = False
    write_svg(os.path.join(out, "pathkl_rates.svg"), "path KL minus terminal KL",
              [(f, grid, [per_T[T][f].gap_sum for T in grid]) for f in fams if f != "exact"],
              ylabel="sum of per-step gaps")
    files.append("pathkl_rates.svg")
    return {"slopes": slopes, "ordering_holds": ok}, files, ok


def lanczos_ensemble(n_instances, seed):
    """Random Sigma = tilde_beta (I + gamma C) instances with their Lanczos errors and bounds."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n_instances):
        d = int(rng.integers(4, 65))
        m = int(rng.integers(1, 9))
        tb = float(rng.uniform(0.01, 1.0))
        G = rng.standard_normal((d, d))
        C = G @ G.T / d
        gl = float(rng.uniform(0.25, 1.0))       # gamma * lambda_max(C)
        gamma = gl / np.linalg.eigvalsh(C)[-1]
        S = tb * (np.eye(d) + gamma * C)
        z = rng.standard_normal(d)
        lam, V = np.linalg.eigh(S)
        exact = V @ (np.sqrt(lam) * (V.T @ z))
        y, _ = lanczos.lanczos_sqrt_apply(lanczos.MatvecOracle.from_matrix(S), z, m)
        err = float(np.linalg.norm(y - exact))
        bound = lanczos.lgs_error_bound(tb, m, float(np.linalg.norm(z)))
        rows.append((d, m, tb, gl, err, bound))
    return rows


def run_lanczos_bench(plan, out):
    rows = lanczos_ensemble(plan["instances"], plan["seed"])
    write_csv(os.path.join(out, "lanczos_bench.csv"),
              ["d", "m", "tilde_beta", "gamma_lambda_max", "error", "bound"], rows)
    err = np.array([r[4] for r in rows])
    bnd = np.array([r[5] for r in rows])
    ms = np.array([r[1] for r in rows])
    pos = err > 0
    slope = float(np.polyfit(ms[pos], np.log(err[pos]), 1)[0]) if pos.sum() > 2 else None
    res = {"all_below_bound": bool(np.all(err <= bnd)),
           "median_ratio": float(np.median(err / bnd)),
           "log_error_slope_in_m": slope}
    ok = res["all_below_bound"]
    return res, ["lanczos_bench.csv"], ok


def run_guidance_rates(plan, out):
    r = guidance.verify_guidance_rates(plan["T_grid"])
    rows = [(int(T), s, f, s * T, f * T * T) for T, s, f in zip(r.T_grid, r.scalar_kl, r.full_kl)]
    write_csv(os.path.join(out, "guidance_rates.csv"),
              ["T", "scalar_kl", "full_kl", "scalar_kl_T", "full_kl_T2"], rows)
    write_svg(os.path.join(out, "guidance_rates.svg"), "conditional endpoint KL",
              [("scalar", list(r.T_grid), list(r.scalar_kl)), ("full", list(r.T_grid), list(r.full_kl))],
              ylabel="KL")
    ok = bool(np.all(r.scalar_kl > r.full_kl))
    res = {"scalar_slope": r.scalar_slope, "full_slope": r.full_slope, "min_scalar_kl_T": r.min_scalar_T,
           "max_full_kl_T2": r.max_full_T2, "scalar_T_variation": r.scalar_T_variation,
           "full_T2_variation": r.full_T2_variation, "scalar_above_full": ok}
    return res, ["guidance_rates.csv", "guidance_rates.svg"], ok


def run_cost_count(plan, out):
    model = plan["model"]
    base = plan["sampler"]
    rows, ok = [], True
    for T in plan["T_grid"]:
        sch = plan["make_schedule"](T)
        ref = sampler.SamplerConfig("tilde_beta", final_step=base.final_step, seed=base.seed)
        for k, l, w in plan["cases"]:
            cfg = sampler.SamplerConfig("lanczos", k, l, w, None, base.clamp, base.final_step, base.seed)
            measured = sampler.measured_cost_ratio(model, sch, cfg, ref)
            predicted = sampler.cost_model(k, l, w)
            ok &= measured == predicted
            rows.append((k, l, w, T, measured, float(measured), predicted, measured == predicted))
    write_csv(os.path.join(out, "cost_count.csv"),
              ["k", "l", "w", "T", "ratio_exact", "ratio", "predicted", "match"], rows)
    return {"all_match": bool(ok)}, ["cost_count.csv"], bool(ok)


def run_sample(plan, out):
    model, cfg, n = plan["model"], plan["sampler"], plan["n"]
    res, files = {}, []
    for T in plan["T_grid"]:
        sch = plan["make_schedule"](T)
        r = sampler.reverse_chain_sample(model, sch, cfg, n)
        name = f"samples_T{T}.csv"
        write_csv(os.path.join(out, name), [f"x{j + 1}" for j in range(model.d)], r.x_1.tolist())
        files.append(name)
        rng = np.random.default_rng([plan["seed"], T, 99])
        truth = mixture.sample_x0(model, rng, n)
        if not cfg.final_step:
            truth = mixture.forward_sample(model, sch, 1, truth, rng)
        sw = sampler.sliced_wasserstein(r.x_1, truth, 50, np.random.default_rng([plan["seed"], T, 98]))
        res[str(T)] = {"oracle_calls": r.oracle_calls, "mean_evals": r.mean_evals,
                       "backward_passes": r.backward_passes, "sliced_w2_to_truth": sw}
    return res, files, True


def taylor_schedule(gamma, snr_base):
    """Two-step schedule whose single reverse step has gamma_2 = gamma."""
    return schedule.from_snr(np.array([snr_base + gamma, snr_base]), "taylor", {})


def run_taylor_check(plan, out):
    model, n, seed = plan["model"], plan["n"], plan["seed"]
    rows, ok = [], True
    for g in plan["gammas"]:
        r = pathkl.check_taylor_bounds(model, taylor_schedule(g, plan["snr_base"]), 2, n, seed)
        up_ok = r["upper_slack"] >= -3 * r["upper_se"]
        lo_ok = r["lower_slack"] >= -3 * r["lower_se"]
        ok &= up_ok and lo_ok
        rows.append((g, r["upper_slack"], r["upper_se"], up_ok, r["L_star"], r["lower_slack"], r["lower_se"], lo_ok))
    write_csv(os.path.join(out, "taylor_check.csv"),
              ["gamma", "upper_slack", "upper_stderr", "upper_ok", "L_star", "lower_slack", "lower_stderr", "lower_ok"],
              rows)
    return {"all_hold": bool(ok)}, ["taylor_check.csv"], bool(ok)


def channel_check_row(model, sch, t, n, seed):
    closed, cse = pathkl.full_cov_loss_closedform(model, sch, t, n, seed)
    gap, gse = pathkl.per_step_gap_mc(model, sch, "full_opt", t, n, seed)
    mi, mse = pathkl.expected_mi_mc(model, sch, t, n, seed)
    diff = closed - gap - mi
    se = math.sqrt(cse ** 2 + gse ** 2 + mse ** 2)
    return (t, closed, gap, mi, diff, se, abs(diff) <= 3 * se)


def run_channel_check(plan, out):
    sch = plan["make_schedule"](plan["T"])
    rows = [channel_check_row(plan["model"], sch, t, plan["n"], plan["seed"]) for t in plan["steps"]]
    write_csv(os.path.join(out, "channel_check.csv"),
              ["t", "closed_form", "full_gap", "mutual_info", "difference", "stderr", "agrees"], rows)
    ok = all(r[-1] for r in rows)
    return {"all_agree": bool(ok)}, ["channel_check.csv"], bool(ok)


RUNNERS = {
    "pathkl-rates": run_pathkl_rates,
    "lanczos-bench": run_lanczos_bench,
    "guidance-rates": run_guidance_rates,
    "cost-count": run_cost_count,
    "sample": run_sample,
    "taylor-check": run_taylor_check,
    "channel-check": run_channel_check,
}


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, Fraction):
        return str(v)
    return v


def cmd_validate(cfg):
    errors, plan = check_config(cfg)
    if errors:
        for e in errors:
            print(e, file=sys.stderr)
        return EXIT_CONFIG
    print(f"{cfg.path}: ok ({plan['kind']})")
    if "budget" in plan:
        print(f"estimated MC budget: {plan['budget']} per-step samples")
    return EXIT_OK


def cmd_run(cfg):
    errors, plan = check_config(cfg)
    if errors:
        for e in errors:
            print(e, file=sys.stderr)
        return EXIT_CONFIG
    out = _outdir(plan)
    t0 = time.perf_counter()
    results, files, ok = RUNNERS[plan["kind"]](plan, out)
    manifest = {
        "experiment": plan["kind"],
        "config": {s: cfg.section(s) for s in cfg.parser.sections()},
        "versions": _versions(),
        "files": files,
        "results": _jsonable(results),
        "invariants_hold": bool(ok),
    }
    if plan.get("model") is not None:
        manifest["model"] = _jsonable(plan["model"].to_config())
    with open(os.path.join(out, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{plan['kind']}: wrote {len(files) + 1} files to {out} ({time.perf_counter() - t0:.1f}s)")
    print(json.dumps(_jsonable(results), indent=2, sort_keys=True))
    return EXIT_OK if ok else EXIT_INVARIANT


def main(argv=None):
    ap = argparse.ArgumentParser(prog="lgslab", description="Lanczos Gaussian sampler lab")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run", "validate"):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key")
    args = ap.parse_args(argv)
    try:
        cfg = Config(args.config, args.set)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    return cmd_run(cfg) if args.command == "run" else cmd_validate(cfg)


if __name__ == "__main__":
    sys.exit(main())
