"""Pairwise-adaptation objective.

Source and adapted denoisers see the same noised batch.  For each predicted
clean image the cosine similarities to every other image in the batch are
turned into a probability vector by a softmax; the adapted model is penalised
by ``KL(p_adapted || p_source)`` summed over the batch.  The same is done on the
Haar high-frequency sum of each prediction, and a plain MSE pulls the adapted
high frequencies towards those of the real images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import torch
import torch.nn.functional as F

from .wavelet import high_frequency


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.001
    lambda2: float = 0.5
    lambda3: float = 0.5
    lambda4: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {value}")

    @classmethod
    def finetune(cls, lambda1: float = 0.001) -> "LossWeights":
        """Direct fine-tuning: only the denoising terms."""
        return cls(lambda1, 0.0, 0.0, 0.0)


@dataclass
class LossTerms:
    simple: torch.Tensor
    vlb: Optional[torch.Tensor] = None
    img: Optional[torch.Tensor] = None
    hf: Optional[torch.Tensor] = None
    hfmse: Optional[torch.Tensor] = None


@dataclass(frozen=True)
class SimilarityDistribution:
    """Row ``i`` is a distribution over the other ``N - 1`` batch members, ascending ``j``."""

    probs: torch.Tensor

    @property
    def log_probs(self) -> torch.Tensor:
        return torch.log(self.probs)


def _offdiag_log_probs(batch: torch.Tensor) -> torch.Tensor:
    n = batch.shape[0]
    if n < 2:
        raise ValueError("pairwise similarities need a batch of at least 2")
    flat = batch.reshape(n, -1)
    norms = flat.norm(dim=1)
    if bool((norms == 0).any()):
        raise ValueError("cosine similarity undefined for a zero-norm sample")
    unit = flat / norms[:, None]
    cos = unit @ unit.T
    keep = ~torch.eye(n, dtype=torch.bool, device=batch.device)
    return F.log_softmax(cos[keep].reshape(n, n - 1), dim=1)


def similarity_rows(batch: torch.Tensor) -> SimilarityDistribution:
    return SimilarityDistribution(torch.exp(_offdiag_log_probs(batch)))


def _pairwise_kl(src: torch.Tensor, ada: torch.Tensor) -> torch.Tensor:
    if src.shape[0] != ada.shape[0]:
        raise ValueError(f"batch size mismatch: {src.shape[0]} vs {ada.shape[0]}")
    log_p_src = _offdiag_log_probs(src.detach())
    log_p_ada = _offdiag_log_probs(ada)
    return torch.sum(torch.exp(log_p_ada) * (log_p_ada - log_p_src))


def pairwise_sim_loss(src_x0_pred: torch.Tensor, ada_x0_pred: torch.Tensor) -> torch.Tensor:
    """Image-level pairwise similarity loss; the source batch is a constant target."""
    return _pairwise_kl(src_x0_pred, ada_x0_pred)


def hf_pairwise_loss(src_x0_pred: torch.Tensor, ada_x0_pred: torch.Tensor) -> torch.Tensor:
    """Pairwise similarity loss on the Haar high-frequency sums."""
    if src_x0_pred.shape[0] != ada_x0_pred.shape[0]:
        raise ValueError("batch size mismatch")
    return _pairwise_kl(high_frequency(src_x0_pred), high_frequency(ada_x0_pred))


def hf_mse_loss(ada_x0_pred: torch.Tensor, x0: torch.Tensor) -> torch.Tensor:
    """MSE between the high-frequency sums of predictions and real images."""
    if ada_x0_pred.shape != x0.shape:
        raise ValueError(f"shape mismatch {tuple(ada_x0_pred.shape)} vs {tuple(x0.shape)}")
    return torch.mean((high_frequency(ada_x0_pred) - high_frequency(x0)) ** 2)


def total_loss(terms: LossTerms, w: LossWeights) -> torch.Tensor:
    """Weighted sum; absent optional terms (``None``) contribute nothing."""
    for f in fields(terms):
        value = getattr(terms, f.name)
        if value is not None and not bool(torch.isfinite(value).all()):
            raise FloatingPointError(f"loss term {f.name} is not finite: {value}")
    total = terms.simple
    for weight, value in (
        (w.lambda1, terms.vlb),
        (w.lambda2, terms.img),
        (w.lambda3, terms.hf),
        (w.lambda4, terms.hfmse),
    ):
        if value is not None and weight != 0.0:
            total = total + weight * value
    return total
