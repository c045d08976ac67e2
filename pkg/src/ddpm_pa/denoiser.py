"""Desk-scale UNet noise predictor with sinusoidal timestep embeddings."""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import DenoiserOutput


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 16
    channels: int = 3
    base_width: int = 32
    depth: int = 2
    learn_variance: bool = True
    time_embed_dim: int = 64
    dropout: float = 0.1
    attention: bool = False
    max_timestep: int = 1000

    def __post_init__(self):
        if self.image_size < 2 or self.image_size % 2:
            raise ValueError(f"image_size must be even, got {self.image_size}")
        if min(self.channels, self.base_width, self.depth, self.time_embed_dim) < 1:
            raise ValueError("channels, base_width, depth and time_embed_dim must be positive")
        if self.image_size % (2**self.depth):
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2**depth = {2**self.depth}"
            )
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.max_timestep < 1:
            raise ValueError("max_timestep must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1).to(dtype)


def _groups(channels: int) -> int:
    g = min(8, channels)
    while channels % g:
        g -= 1
    return g


def _dropout(h: torch.Tensor, p: float, training: bool, generator) -> torch.Tensor:
    # Masks come from an explicit generator so runs replay bit-for-bit.
    if not training or p == 0.0:
        return h
    keep = torch.rand(h.shape, generator=generator, dtype=h.dtype) >= p
    return h * keep.to(h.dtype) / (1.0 - p)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        self.dropout = dropout

    def forward(self, x, emb, generator=None):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = F.silu(self.norm2(h))
        h = _dropout(h, self.dropout, self.training, generator)
        return self.skip(x) + self.conv2(h)


class SelfAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(n, c, h, w)
        return x + self.proj(out)


class Denoiser(nn.Module):
    """Predicts the injected noise and, optionally, the variance coefficient.

    Calling the module returns a :class:`DenoiserOutput`.  Pass ``generator`` to
    draw dropout masks from an explicit random stream.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c = config
        widths = [c.base_width * 2**i for i in range(c.depth)]
        emb = c.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.conv_in = nn.Conv2d(c.channels, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        prev = widths[0]
        for w in widths:
            self.down_blocks.append(ResBlock(prev, w, emb, c.dropout))
            self.downsamplers.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            prev = w
        self.mid1 = ResBlock(prev, prev, emb, c.dropout)
        self.mid_attn = SelfAttention(prev) if c.attention else None
        self.mid2 = ResBlock(prev, prev, emb, c.dropout)
        self.upsamplers = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for w in reversed(widths):
            self.upsamplers.append(nn.Conv2d(prev, prev, 3, padding=1))
            self.up_blocks.append(ResBlock(prev + w, w, emb, c.dropout))
            prev = w
        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        out_ch = 2 * c.channels if c.learn_variance else c.channels
        self.conv_out = nn.Conv2d(prev, out_ch, 3, padding=1)

    def forward(self, x: torch.Tensor, t, generator: Optional[torch.Generator] = None):
        c = self.config
        expected = (c.channels, c.image_size, c.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input N x {expected}, got {tuple(x.shape)}")
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        if t.shape != (x.shape[0],):
            raise ValueError("t must be a scalar or one timestep per sample")
        if bool(((t < 1) | (t > c.max_timestep)).any()):
            raise ValueError(f"timesteps must lie in [1, {c.max_timestep}]")

        emb = self.time_mlp(timestep_embedding(t, c.time_embed_dim, x.dtype))
        h = self.conv_in(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamplers):
            h = block(h, emb, generator)
            skips.append(h)
            h = down(h)
        h = self.mid1(h, emb, generator)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid2(h, emb, generator)
        for up, block in zip(self.upsamplers, self.up_blocks):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, skips.pop()], dim=1), emb, generator)
        out = self.conv_out(F.silu(self.norm_out(h)))
        if c.learn_variance:
            eps, raw_v = out.split(c.channels, dim=1)
            return DenoiserOutput(eps, torch.sigmoid(raw_v))
        return DenoiserOutput(out)


def init_params(config: DenoiserConfig, seed: int = 0) -> Denoiser:
    """Build a denoiser with seed-determined fan-in scaled weights.

    Weights are ``N(0, 1/fan_in)``, biases and norm shifts zero, norm scales one.
    The output convolution is zero so an untrained model predicts ``eps = 0``.
    """
    model = Denoiser(config)
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if ".norm" in name or name.startswith("norm"):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(fan_in))
        model.conv_out.weight.zero_()
        model.conv_out.bias.zero_()
    return model


def clone_params(model: Denoiser) -> Denoiser:
    """Deep, independent copy of a denoiser (architecture and weights)."""
    return copy.deepcopy(model)


def param_count(config: DenoiserConfig) -> int:
    return sum(p.numel() for p in Denoiser(config).parameters())


def params_hash(model: nn.Module) -> str:
    """SHA-256 over parameter names, dtypes, shapes and raw bytes."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        t = tensor.detach().contiguous().cpu()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
