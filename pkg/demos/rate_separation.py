## Path-KL rates on the toy mixture: full covariance vs diagonal vs beta-tilde
# small n so it runs in about a minute; the acceptance suite uses more samples
import numpy as np

from lgslab import mixture, pathkl, schedule

model = mixture.toy_preset()
families = ("full_opt", "diag_opt", "tilde_beta")
T_grid = [16, 32, 64, 128]

gaps = {f: [] for f in families}
for T in T_grid:
    sch = schedule.make_log_snr_uniform(T, 10.0, 1e-4)
    est = pathkl.path_kl_families(model, sch, families, n=5000, seed=7)
    for f in families:
        gaps[f].append(est[f].gap_sum)
    print(f"T={T:4d}  " + "  ".join(f"{f}={est[f].gap_sum:.3e}" for f in families)
          + f"  terminal={est[families[0]].terminal_kl:.2e}")

for f in families:
    fit = pathkl.fit_loglog_slope(T_grid, gaps[f])
    print(f"{f:10s} slope {fit.slope:+.2f}")
# full covariance should fall like 1/T^2, the other two closer to 1/T
