"""Single-level orthonormal 2-D Haar transform.

With ``L = [1, 1] / sqrt(2)`` and ``H = [-1, 1] / sqrt(2)``, every non-overlapping
2x2 block ``[[a, b], [c, d]]`` maps to::

    LL = ( a + b + c + d) / 2
    LH = (-a + b - c + d) / 2     # L along rows, H along columns: vertical edges
    HL = (-a - b + c + d) / 2     # H along rows, L along columns: horizontal edges
    HH = ( a - b - c + d) / 2

The first letter names the filter applied down the rows (height axis) and the
second the filter across the columns (width axis).
"""

from __future__ import annotations

from typing import NamedTuple

import torch


class FrequencyBands(NamedTuple):
    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor


def haar_decompose(x: torch.Tensor) -> FrequencyBands:
    """Split an ``N x C x H x W`` batch into four half-resolution sub-bands."""
    if x.ndim < 2:
        raise ValueError("input must have at least two spatial dimensions")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"height and width must be even, got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return FrequencyBands(
        ll=(a + b + c + d) / 2,
        lh=(-a + b - c + d) / 2,
        hl=(-a - b + c + d) / 2,
        hh=(a - b - c + d) / 2,
    )


def haar_reconstruct(bands: FrequencyBands) -> torch.Tensor:
    """Exact inverse of :func:`haar_decompose`."""
    ll, lh, hl, hh = bands
    if not (ll.shape == lh.shape == hl.shape == hh.shape):
        raise ValueError("all four bands must share one shape")
    a = (ll - lh - hl + hh) / 2
    b = (ll + lh - hl - hh) / 2
    c = (ll - lh + hl - hh) / 2
    d = (ll + lh + hl + hh) / 2
    top = torch.stack([a, b], dim=-1).flatten(-2)
    bottom = torch.stack([c, d], dim=-1).flatten(-2)
    return torch.stack([top, bottom], dim=-2).flatten(-3, -2)


def hf_sum(bands: FrequencyBands) -> torch.Tensor:
    """Sum of the three high-frequency bands, ``LH + HL + HH``."""
    if not (bands.lh.shape == bands.hl.shape == bands.hh.shape):
        raise ValueError("high-frequency bands must share one shape")
    return bands.lh + bands.hl + bands.hh


def high_frequency(x: torch.Tensor) -> torch.Tensor:
    return hf_sum(haar_decompose(x))
