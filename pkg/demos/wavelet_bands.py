"""Haar decomposition of a small image and its high-frequency component.

    python3 demos/wavelet_bands.py
"""

import torch

from ddpm_pa import haar_decompose, haar_reconstruct, hf_sum
from ddpm_pa.data import synthetic_images

x = torch.from_numpy(synthetic_images(1, 16, "shapes", seed=0)).double()
bands = haar_decompose(x)
for name, band in zip(bands._fields, bands):
    print(f"{name}  shape {tuple(band.shape)}  energy {float((band ** 2).sum()):8.3f}")

print(f"input energy       {float((x ** 2).sum()):8.3f}  (the transform is orthonormal)")
print(f"reconstruction err {float((haar_reconstruct(bands) - x).abs().max()):.1e}")

flat = torch.full_like(x, 0.3)
print(f"hf of a flat image {float(hf_sum(haar_decompose(flat)).abs().max()):.1e}")
