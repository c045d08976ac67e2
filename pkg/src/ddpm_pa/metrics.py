"""Diversity and quality metrics: perceptual distance, Nearest/Intra-LPIPS, Frechet distance.

Reductions use :func:`math.fsum`, so results do not depend on the order in
which generated samples are supplied.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg


class PerceptualBackend(Protocol):
    """Maps one ``C x H x W`` image to a list of per-layer feature maps.

    ``distance`` must be zero on identical feature lists, symmetric and
    non-negative.
    """

    descriptor: dict

    def features(self, image: np.ndarray) -> list[np.ndarray]: ...

    def distance(self, fa: list[np.ndarray], fb: list[np.ndarray]) -> float: ...


class RandomConvBackend:
    """LPIPS-shaped proxy built from fixed random convolutions.

    Each layer is a seeded 3x3 convolution with fan-in scaling followed by a
    ReLU; layers after the first start with a 2x average pool.  At each
    spatial location the channel vector is scaled to unit length, and the
    distance is the squared difference summed over channels, averaged over
    space and then over layers.
    """

    def __init__(self, seed: int = 0, widths: Sequence[int] = (16, 32, 32)):
        self.seed = int(seed)
        self.widths = tuple(int(w) for w in widths)
        self.descriptor = {"name": "random-conv", "seed": self.seed, "widths": list(self.widths)}
        self._weights: dict[int, list[torch.Tensor]] = {}

    def _layers(self, in_channels: int) -> list[torch.Tensor]:
        if in_channels not in self._weights:
            g = torch.Generator().manual_seed(self.seed * 1000 + in_channels)
            layers, prev = [], in_channels
            for w in self.widths:
                weight = torch.randn((w, prev, 3, 3), generator=g, dtype=torch.float64)
                layers.append(weight / math.sqrt(prev * 9))
                prev = w
            self._weights[in_channels] = layers
        return self._weights[in_channels]

    def features(self, image) -> list[np.ndarray]:
        x = torch.as_tensor(np.asarray(image), dtype=torch.float64)
        if x.ndim != 3:
            raise ValueError(f"expected a C x H x W image, got shape {tuple(x.shape)}")
        h = x[None]
        feats = []
        for i, weight in enumerate(self._layers(x.shape[0])):
            if i > 0 and min(h.shape[-2:]) >= 2:
                h = F.avg_pool2d(h, 2)
            h = F.relu(F.conv2d(h, weight, padding=1))
            norm = torch.sqrt(torch.sum(h * h, dim=1, keepdim=True))
            feats.append((h / (norm + 1e-10))[0].numpy())
        return feats

    def distance(self, fa, fb) -> float:
        per_layer = [float(np.mean(np.sum((a - b) ** 2, axis=0))) for a, b in zip(fa, fb)]
        return math.fsum(per_layer) / len(per_layer)

    def pooled(self, feats: list[np.ndarray]) -> np.ndarray:
        """Spatially averaged features, concatenated across layers."""
        return np.concatenate([f.mean(axis=(1, 2)) for f in feats])


def default_backend() -> RandomConvBackend:
    return RandomConvBackend(seed=0)


def _as_images(images) -> np.ndarray:
    arr = images.detach().cpu().numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
    if arr.ndim != 4:
        raise ValueError(f"expected an N x C x H x W image set, got shape {arr.shape}")
    return arr.astype(np.float64, copy=False)


def perceptual_distance(a, b, backend: PerceptualBackend | None = None) -> float:
    backend = backend or default_backend()
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return backend.distance(backend.features(a), backend.features(b))


def distance_table(generated, training, backend: PerceptualBackend | None = None) -> np.ndarray:
    """``len(generated) x len(training)`` matrix of perceptual distances."""
    backend = backend or default_backend()
    gen, train = _as_images(generated), _as_images(training)
    if len(gen) == 0 or len(train) == 0:
        raise ValueError("both image sets must be non-empty")
    if gen.shape[1:] != train.shape[1:]:
        raise ValueError(f"image shapes differ: {gen.shape[1:]} vs {train.shape[1:]}")
    fg = [backend.features(x) for x in gen]
    ft = [backend.features(x) for x in train]
    return np.array([[backend.distance(a, b) for b in ft] for a in fg])


@dataclass
class ClusterAssignment:
    index: np.ndarray
    distance: np.ndarray


def assign_nearest(table: np.ndarray) -> ClusterAssignment:
    # argmin returns the first minimum: ties go to the lowest training index.
    idx = np.argmin(table, axis=1)
    return ClusterAssignment(idx, table[np.arange(len(table)), idx])


def nearest_lpips(generated, training, backend: PerceptualBackend | None = None, *, table=None) -> float:
    """Mean distance from each generated image to its closest training image."""
    if table is None:
        table = distance_table(generated, training, backend)
    return math.fsum(assign_nearest(table).distance) / table.shape[0]


@dataclass
class IntraResult:
    mean: float
    std: float
    assignment: ClusterAssignment
    cluster_scores: np.ndarray
    cluster_counts: np.ndarray
    small_clusters: list[int]


def intra_lpips(generated, training, backend: PerceptualBackend | None = None) -> IntraResult:
    """Average within-cluster pairwise distance after nearest-training assignment.

    There is one cluster per training image.  Clusters with fewer than two
    members score 0 and are listed in ``small_clusters``.  ``std`` is the
    population standard deviation across clusters.
    """
    backend = backend or default_backend()
    gen, train = _as_images(generated), _as_images(training)
    if len(gen) == 0 or len(train) == 0:
        raise ValueError("both image sets must be non-empty")
    fg = [backend.features(x) for x in gen]
    ft = [backend.features(x) for x in train]
    table = np.array([[backend.distance(a, b) for b in ft] for a in fg])
    assignment = assign_nearest(table)
    k = len(train)
    scores = np.zeros(k)
    counts = np.bincount(assignment.index, minlength=k)
    small = []
    for c in range(k):
        members = np.flatnonzero(assignment.index == c)
        if len(members) < 2:
            small.append(c)
            continue
        pairs = [
            backend.distance(fg[i], fg[j])
            for n, i in enumerate(members)
            for j in members[n + 1 :]
        ]
        scores[c] = math.fsum(pairs) / len(pairs)
    mean = math.fsum(scores) / k
    std = math.sqrt(math.fsum((scores - mean) ** 2) / k)
    return IntraResult(mean, std, assignment, scores, counts, small)


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(feats_a, feats_b, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two ``M x D`` feature sets.

    ``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`` with ``eps`` added to
    both covariance diagonals.  The trace of the product root is taken from the
    eigenvalues of the symmetric ``S_a^{1/2} S_b S_a^{1/2}``, clipped at zero.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1] or a.shape[1] < 1:
        raise ValueError("feature sets must share a positive dimension")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two samples per set")
    d = a.shape[1]
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + eps * np.eye(d)
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + eps * np.eye(d)
    root_a = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.clip(linalg.eigvalsh((inner + inner.T) / 2), 0.0, None)
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sum(np.sqrt(vals))
    return float(max(value, 0.0))


REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "nearest_lpips",
        "intra_lpips_mean",
        "intra_lpips_std",
        "frechet",
        "cluster_counts",
        "small_clusters",
        "n_generated",
        "n_training",
        "flip_augmented",
        "backend",
    ],
    "properties": {
        "nearest_lpips": {"type": "number", "minimum": 0},
        "intra_lpips_mean": {"type": "number", "minimum": 0},
        "intra_lpips_std": {"type": "number", "minimum": 0},
        "frechet": {"type": ["number", "null"]},
        "cluster_counts": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "small_clusters": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "n_generated": {"type": "integer", "minimum": 1},
        "n_training": {"type": "integer", "minimum": 1},
        "flip_augmented": {"type": "boolean"},
        "backend": {"type": "object"},
    },
    "additionalProperties": False,
}


@dataclass
class EvalReport:
    nearest_lpips: float
    intra_lpips_mean: float
    intra_lpips_std: float
    frechet: float | None
    cluster_counts: list[int]
    small_clusters: list[int]
    n_generated: int
    n_training: int
    flip_augmented: bool = False
    backend: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def evaluate(
    generated,
    training,
    backend: RandomConvBackend | None = None,
    *,
    flip_augment_training: bool = False,
    table_csv=None,
) -> EvalReport:
    """Full report for a generated set against its training set.

    With ``flip_augment_training`` the horizontally flipped training images are
    appended as extra candidates for Nearest-LPIPS only; Intra-LPIPS clusters
    stay one per original training image.
    """
    backend = backend or default_backend()
    gen, train = _as_images(generated), _as_images(training)
    candidates = np.concatenate([train, train[..., ::-1]]) if flip_augment_training else train
    table = distance_table(gen, candidates, backend)
    near = nearest_lpips(gen, candidates, backend, table=table)
    intra = intra_lpips(gen, train, backend)
    frechet = None
    if len(gen) >= 2 and len(train) >= 2:
        pg = np.stack([backend.pooled(backend.features(x)) for x in gen])
        pt = np.stack([backend.pooled(backend.features(x)) for x in train])
        frechet = frechet_distance(pg, pt)
    if table_csv is not None:
        with open(table_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["generated"] + [f"train_{j}" for j in range(table.shape[1])])
            for i, row in enumerate(table):
                writer.writerow([i] + [repr(float(v)) for v in row])
    return EvalReport(
        nearest_lpips=near,
        intra_lpips_mean=intra.mean,
        intra_lpips_std=intra.std,
        frechet=frechet,
        cluster_counts=[int(c) for c in intra.cluster_counts],
        small_clusters=[int(c) for c in intra.small_clusters],
        n_generated=int(len(gen)),
        n_training=int(len(train)),
        flip_augmented=bool(flip_augment_training),
        backend=dict(backend.descriptor),
    )
