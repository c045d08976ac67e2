"""Pretrain on a toy domain, adapt to ten images of another, compare diversity.

Takes a few minutes on one CPU core at 16x16.  Longer schedules (see the
acceptance tests) give clearer separation between the two adaptation modes.

    python3 demos/train_and_adapt.py
"""

import time

import torch

from ddpm_pa import TrainConfig, adapt, evaluate, generate, train_scratch
from ddpm_pa.data import synthetic_images
from ddpm_pa.training import model_from_checkpoint

ARCH = dict(image_size=16, timesteps=1000, learning_rate=1e-3)

source_data = torch.from_numpy(synthetic_images(1000, 16, "shapes", seed=2)).float()
target_data = torch.from_numpy(synthetic_images(10, 16, "sketch", seed=3)).float()

start = time.perf_counter()
source = list(train_scratch(TrainConfig(**ARCH, batch_size=16, iterations=2000), source_data))[-1]
print(f"pretrained {source.iteration} steps in {time.perf_counter() - start:.0f}s")

for mode in ("finetune", "pa"):
    start = time.perf_counter()
    rows = []
    cfg = TrainConfig(**ARCH, mode=mode, batch_size=10, iterations=400)
    ckpt = list(adapt(cfg, source, target_data, on_log=rows.append))[-1]
    samples = generate(model_from_checkpoint(ckpt), ckpt.schedule, 40, seed=7)
    report = evaluate(samples.numpy(), target_data.numpy())
    print(
        f"{mode:<8} {time.perf_counter() - start:4.0f}s  last loss {rows[-1]['total']:.3f}"
        f"  intra {report.intra_lpips_mean:.3f}  nearest {report.nearest_lpips:.3f}"
    )
