## Reverse chains on the 3-component mixture: exact optimal covariance, Lanczos, beta-tilde
import numpy as np

from lgslab import mixture, sampler, schedule

model = mixture.three_component_preset()
sch = schedule.make_linear_beta(48, 1e-3, 0.3)
truth = mixture.sample_x0(model, np.random.default_rng(0), 4000)

for mode, m in (("full_opt_exact", 3), ("lanczos", 1), ("lanczos", 2), ("tilde_beta", 3)):
    cfg = sampler.SamplerConfig(covariance_mode=mode, m=m, final_step=True, seed=3)
    res = sampler.reverse_chain_sample(model, sch, cfg, n=4000)
    sw = sampler.sliced_wasserstein(res.x_1, truth, 64, np.random.default_rng(1))
    print(f"{mode:15s} m={m}  SW to data {sw:.4f}  matvecs/chain {float(res.per_chain('oracle_calls')):.0f}")

# predicted vs measured cost of batching l noise draws per Lanczos run
for k, l, w in ((5, 1, 1.0), (5, 4, 1.0), (5, 4, 0.25)):
    print(f"k={k} l={l} w={w}  predicted ratio {float(sampler.cost_model(k, l, w)):.3f}")
