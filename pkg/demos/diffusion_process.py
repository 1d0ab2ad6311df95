"""The denoising diffusion machinery, without a trained network.

First the forward process: how much of a clean stack survives at a few
noise levels. Then the reverse chain driven by an oracle that knows the
injected noise exactly, which must land back on the clean stack; this is
the identity the learned denoiser approximates.

    python demos/diffusion_process.py
"""
import numpy as np

from fmtrecon.ddpm import DESK_SCHEDULE, forward_noise, make_schedule, posterior_mean, to_unit_range
from fmtrecon.geometry import GridSpec, case_phantom, rasterize_phantom

s = make_schedule(**DESK_SCHEDULE)
grid = GridSpec.enclosing(32, 32, 8)
x0 = to_unit_range(rasterize_phantom(case_phantom(0.2), grid).data, 1.0)
rng = np.random.default_rng(0)

print("t     alpha_bar   corr(x_t, x0)")
for t in (1, 20, 50, 100, 200):
    x_t = forward_noise(x0, t, rng.standard_normal(x0.shape), s)
    corr = np.corrcoef(x_t.ravel(), x0.ravel())[0, 1]
    print(f"{t:<5d} {s.alpha_bar[t - 1]:.3e}   {corr:+.3f}")

# deterministic reverse pass with the true noise: each step re-noises the
# current estimate of x0 so the oracle prediction stays exact
eps = rng.standard_normal(x0.shape)
x = forward_noise(x0, s.T, eps, s)
for t in range(s.T, 0, -1):
    mean = posterior_mean(x, eps, t, s)
    x = mean if t == 1 else forward_noise(x0, t - 1, eps, s)
print(f"oracle reverse chain max error: {np.abs(x - x0).max():.2e}")
