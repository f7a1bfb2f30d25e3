## Guided chains on the counter-example schedule: scalar covariance stalls at 1/T, full at 1/T^2
import numpy as np

from lgslab import guidance

T_grid = [16, 32, 64, 128, 256, 512]
r = guidance.verify_guidance_rates(T_grid)
for T, s, f in zip(r.T_grid, r.scalar_kl, r.full_kl):
    print(f"T={T:4d}  scalar {s:.4e}  T*scalar {s * T:.4f}  full {f:.4e}  T^2*full {f * T * T:.4f}")
print(f"slopes: scalar {r.scalar_slope:+.3f}, full {r.full_slope:+.3f}")

# the float64 recursion against a 50-digit direct propagation
T = 64
print("scalar KL at T=64:", guidance.scalar_chain_kl(T), "vs", float(guidance.scalar_chain_kl_exact(T)))
