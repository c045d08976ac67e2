"""Noise schedule identities and an exact check of the ancestral sampler.

When the data are Gaussian the Bayes-optimal noise predictor is known in
closed form, so the sampler's output distribution can be compared with the
data distribution without training anything.

    python3 demos/schedule_and_sampler.py
"""

import torch

from ddpm_pa import GaussianDataOracle, build_schedule, p_sample_loop, predict_x0_from_eps, q_sample
from ddpm_pa.diffusion import reverse_moments

s = build_schedule(1000)
print(f"beta range      {float(s.beta[0]):.2e} .. {float(s.beta[-1]):.2e}")
print(f"alpha_bar_T     {float(s.alpha_bar[-1]):.3e}")

# forward noising followed by the x0 prediction is the identity
g = torch.Generator().manual_seed(0)
x0 = torch.rand(4, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
t = torch.tensor([1, 10, 500, 1000])
err = (predict_x0_from_eps(q_sample(x0, t, eps, s), t, eps, s) - x0).abs().max()
print(f"x0 round trip   max error {float(err):.1e}")

mean, std = 0.1, 0.25
small = build_schedule(100)
oracle = GaussianDataOracle(mean, std, small)
samples = p_sample_loop(
    oracle, (20_000, 1, 1, 1), small, torch.Generator().manual_seed(1),
    variance="learned", clip_x0=False, dtype=torch.float64,
).ravel()
print(f"learned variance  mean {float(samples.mean()):.4f} (data {mean}), std {float(samples.std()):.4f} (data {std})")

for variance in ("posterior", "beta"):
    m, v = reverse_moments(mean, std, small, variance)
    print(f"fixed {variance:<9} exact output std {v ** 0.5:.4f}")
