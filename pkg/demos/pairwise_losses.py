"""Pairwise similarity losses between a frozen source model and its adapted copy.

Predictions that keep the source's relative similarities give zero loss even
when every image moves; collapsing all predictions to one image does not.

    python3 demos/pairwise_losses.py
"""

import torch

from ddpm_pa import LossTerms, LossWeights, hf_mse_loss, hf_pairwise_loss, pairwise_sim_loss, total_loss

g = torch.Generator().manual_seed(0)
src = torch.randn(6, 3, 16, 16, generator=g)

scaled = 2.0 * src
collapsed = src[:1].repeat(6, 1, 1, 1) + 0.01 * torch.randn(src.shape, generator=g)

for name, ada in [("identical", src), ("scaled", scaled), ("collapsed", collapsed)]:
    print(
        f"{name:<10} image {float(pairwise_sim_loss(src, ada)):.4f}"
        f"  hf {float(hf_pairwise_loss(src, ada)):.4f}"
    )

x0 = torch.randn(src.shape, generator=g)
terms = LossTerms(
    simple=torch.tensor(0.2), vlb=torch.tensor(3.0),
    img=pairwise_sim_loss(src, collapsed), hf=hf_pairwise_loss(src, collapsed),
    hfmse=hf_mse_loss(collapsed, x0),
)
print(f"total with default weights {float(total_loss(terms, LossWeights())):.4f}")
print(f"total for plain fine-tuning {float(total_loss(terms, LossWeights.finetune())):.4f}")
