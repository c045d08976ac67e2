"""Image IO, sample grids and synthetic toy domains."""

from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".png",)


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """Map 8-bit values to [-1, 1] as ``v / 127.5 - 1``."""
    return pixels.astype(np.float64) / 127.5 - 1.0


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(
        np.uint8
    )


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_image(path, image_size: int | None = None, channels: int | None = None) -> np.ndarray:
    """Decode one image to a ``C x H x W`` float64 array in [-1, 1]."""
    with Image.open(path) as img:
        mode = {1: "L", 3: "RGB"}.get(channels) if channels else None
        if mode is None:
            mode = "L" if img.mode in ("L", "LA", "I", "I;16", "1") else "RGB"
        img = img.convert(mode)
        if image_size is not None and img.size != (image_size, image_size):
            img = img.resize((image_size, image_size), Image.Resampling.BICUBIC)
        arr = np.asarray(img, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return to_unit_range(arr)


def load_image_dir(
    directory, image_size: int | None = None, channels: int | None = None
) -> torch.Tensor:
    """Load every PNG in ``directory`` (sorted by name) into an ``N x C x H x W`` tensor.

    Without ``image_size``/``channels`` all images must already share one shape.
    """
    paths = list_images(directory)
    if not paths:
        raise ValueError(f"no PNG images in {directory}")
    arrays = [load_image(p, image_size, channels) for p in paths]
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"images in {directory} have mixed dimensions: {sorted(shapes)}")
    return torch.from_numpy(np.stack(arrays)).to(torch.float32)


def save_png(image, path) -> None:
    """Write one ``C x H x W`` image in [-1, 1] as an 8-bit PNG."""
    arr = to_uint8(torch.as_tensor(image).detach().cpu().numpy())
    if arr.shape[0] == 1:
        pil = Image.fromarray(arr[0])
    else:
        pil = Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0)))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    pil.save(path, format="PNG")


def make_grid(images, pad: int = 2, pad_value: float = 1.0) -> torch.Tensor:
    """Tile images row-major into a near-square grid with ``pad``-pixel separators.

    The grid has ``ceil(sqrt(n))`` columns; separators sit between tiles only.
    """
    images = torch.as_tensor(images)
    n, c, h, w = images.shape
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    grid = torch.full(
        (c, rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad),
        pad_value,
        dtype=images.dtype,
    )
    for i in range(n):
        r, k = divmod(i, cols)
        y, x = r * (h + pad), k * (w + pad)
        grid[:, y : y + h, x : x + w] = images[i]
    return grid


def hflip(images: torch.Tensor) -> torch.Tensor:
    return images.flip(-1)


# --- synthetic domains -------------------------------------------------------

DOMAINS = ("shapes", "sketch", "stripes")


def _coords(size: int):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return (y + 0.5) / size, (x + 0.5) / size


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    y, x = _coords(size)
    cy, cx = rng.uniform(0.2, 0.8, size=2)
    r = rng.uniform(0.12, 0.3)
    if rng.random() < 0.5:
        return ((y - cy) ** 2 + (x - cx) ** 2 <= r * r).astype(np.float64)
    return ((np.abs(y - cy) <= r) & (np.abs(x - cx) <= r)).astype(np.float64)


def _shapes_image(rng, size):
    y, x = _coords(size)
    c0, c1 = rng.uniform(-1, 0.2, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * x + np.sin(angle) * y
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(rng.integers(1, 4)):
        mask = _shape_mask(rng, size)
        color = rng.uniform(-0.2, 1.0, size=3)
        img = img * (1 - mask) + color[:, None, None] * mask
    return img


def _sketch_image(rng, size):
    img = np.full((3, size, size), 0.9)
    ink = rng.uniform(-1.0, -0.6)
    for _ in range(rng.integers(1, 4)):
        mask = _shape_mask(rng, size)
        inner = np.zeros_like(mask)
        inner[1:-1, 1:-1] = (
            mask[1:-1, 1:-1] * mask[:-2, 1:-1] * mask[2:, 1:-1] * mask[1:-1, :-2] * mask[1:-1, 2:]
        )
        edge = mask - inner
        img = img * (1 - edge) + ink * edge
    return img


def _stripes_image(rng, size):
    y, x = _coords(size)
    freq = rng.uniform(2, 5)
    angle = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (np.cos(angle) * x + np.sin(angle) * y) + phase)
    c0, c1 = rng.uniform(-1, 1, size=(2, 3))
    t = (wave + 1) / 2
    return c0[:, None, None] * (1 - t) + c1[:, None, None] * t


_GENERATORS = {"shapes": _shapes_image, "sketch": _sketch_image, "stripes": _stripes_image}


def synthetic_images(count: int, size: int = 16, domain: str = "shapes", seed: int = 0) -> np.ndarray:
    """Deterministic toy images, ``count x 3 x size x size`` in [-1, 1].

    ``shapes``: circles and squares over colour gradients.  ``sketch``: dark
    outlines of the same kind of shapes on a light background.  ``stripes``:
    two-colour sinusoidal gratings.
    """
    if domain not in _GENERATORS:
        raise ValueError(f"unknown domain {domain!r}; choose from {DOMAINS}")
    if count < 1 or size < 2:
        raise ValueError("count must be >= 1 and size >= 2")
    rng = np.random.default_rng(seed)
    make = _GENERATORS[domain]
    return np.clip(np.stack([make(rng, size) for _ in range(count)]), -1.0, 1.0)


def write_synthetic(out_dir, count: int, size: int = 16, domain: str = "shapes", seed: int = 0):
    """Write quantized synthetic images as ``img_00000.png``...; returns the paths."""
    images = synthetic_images(count, size, domain, seed)
    paths = []
    for i, img in enumerate(images):
        path = Path(out_dir) / f"img_{i:05d}.png"
        save_png(torch.from_numpy(img), path)
        paths.append(path)
    return paths
