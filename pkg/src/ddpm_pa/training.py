"""Training loops: from-scratch pretraining, direct fine-tuning and pairwise adaptation.

One ``torch.Generator`` seeded from ``TrainConfig.seed`` drives minibatch
indices, flips, timesteps, noise and dropout, and is stored in every
checkpoint, so a resumed run continues bit-for-bit.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterator, Optional

import torch

from .checkpoint import Checkpoint, CheckpointError
from .denoiser import Denoiser, DenoiserConfig, clone_params, init_params, param_count, params_hash
from .diffusion import (
    build_schedule,
    loss_simple,
    loss_vlb,
    p_sample_loop,
    predict_x0_from_eps,
    q_sample,
)
from .pa_losses import (
    LossTerms,
    LossWeights,
    hf_mse_loss,
    hf_pairwise_loss,
    pairwise_sim_loss,
    total_loss,
)

log = logging.getLogger(__name__)

MODES = ("scratch", "finetune", "pa")
LOG_COLUMNS = ("iteration", "l_simple", "l_vlb", "l_img", "l_hf", "l_hfmse", "total")


@dataclass
class TrainConfig:
    mode: str = "scratch"
    # diffusion
    timesteps: int = 1000
    beta_start: Optional[float] = None
    beta_end: Optional[float] = None
    # optimisation; 1e-4 follows the small-scale setup, 1e-3 is the other documented value
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 8
    iterations: int = 1000
    seed: int = 0
    lambda1: float = 0.001
    lambda2: float = 0.5
    lambda3: float = 0.5
    lambda4: float = 0.05
    flip_augment: bool = True
    checkpoint_every: int = 0
    sample_every: int = 0
    deterministic: bool = True
    # denoiser architecture
    image_size: int = 16
    channels: int = 3
    base_width: int = 32
    depth: int = 2
    learn_variance: bool = True
    time_embed_dim: int = 64
    dropout: float = 0.1
    attention: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.mode == "pa" and self.batch_size < 2:
            raise ValueError("pa mode needs batch_size >= 2 for pairwise losses")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.checkpoint_every < 0 or self.sample_every < 0:
            raise ValueError("checkpoint_every and sample_every must be >= 0")
        self.weights()
        self.model_config()
        build_schedule(self.timesteps, self.beta_start, self.beta_end)

    def weights(self) -> LossWeights:
        if self.mode == "finetune":
            return LossWeights.finetune(self.lambda1)
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def model_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            image_size=self.image_size,
            channels=self.channels,
            base_width=self.base_width,
            depth=self.depth,
            learn_variance=self.learn_variance,
            time_embed_dim=self.time_embed_dim,
            dropout=self.dropout,
            attention=self.attention,
            max_timestep=self.timesteps,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _generator_copy(g: torch.Generator) -> torch.Generator:
    twin = torch.Generator()
    twin.set_state(g.get_state())
    return twin


class Trainer:
    """Owns the model, optimizer and random stream of one training run.

    ``source`` (a checkpoint) is required for ``finetune`` and ``pa`` modes; the
    adapted model starts as a copy of it and the source stays frozen.  The
    source model replays the adapted model's dropout masks, so at step 0 both
    produce identical predictions.
    """

    def __init__(
        self,
        config: TrainConfig,
        images: torch.Tensor,
        source: Optional[Checkpoint] = None,
        resume: Optional[Checkpoint] = None,
    ):
        config.validate()
        self.config = config
        self.model_config = config.model_config()
        images = torch.as_tensor(images, dtype=torch.float32)
        expected = (self.model_config.channels, config.image_size, config.image_size)
        if images.ndim != 4 or images.shape[0] == 0:
            raise ValueError("dataset must be a non-empty N x C x H x W batch")
        if tuple(images.shape[1:]) != expected:
            raise ValueError(f"dataset images are {tuple(images.shape[1:])}, expected {expected}")
        if not bool(torch.isfinite(images).all()):
            raise ValueError("dataset contains non-finite values")
        if config.mode == "pa" and images.shape[0] < 2:
            raise ValueError("pa mode needs at least 2 training images")
        self.images = images
        self.weights = config.weights()
        self.schedule = build_schedule(config.timesteps, config.beta_start, config.beta_end)
        if config.deterministic:
            torch.set_num_threads(1)

        self.source: Optional[Denoiser] = None
        self.source_hash: Optional[str] = None
        if config.mode == "scratch":
            self.model = init_params(self.model_config, config.seed)
        else:
            if source is None:
                raise ValueError(f"{config.mode} mode requires a source checkpoint")
            if source.model_config != self.model_config:
                raise CheckpointError(
                    "source checkpoint architecture does not match the requested config"
                )
            self.source = Denoiser(self.model_config)
            self.source.load_state_dict(source.params)
            self.source.requires_grad_(False)
            self.source.train()
            self.source_hash = params_hash(self.source)
            self.model = clone_params(self.source)
            self.model.requires_grad_(True)
        self.model.train()
        self.optimizer = torch.optim.Adam(
            self.model.parameters(),
            lr=config.learning_rate,
            betas=(config.adam_beta1, config.adam_beta2),
            foreach=False,
        )
        self.generator = torch.Generator().manual_seed(config.seed)
        self.iteration = 0
        if resume is not None:
            self._restore(resume)

    def _restore(self, ckpt: Checkpoint) -> None:
        if ckpt.model_config != self.model_config:
            raise CheckpointError("resume checkpoint architecture does not match the config")
        self.model.load_state_dict(ckpt.params)
        if ckpt.optimizer is not None:
            self.optimizer.load_state_dict(ckpt.optimizer)
        self.generator.set_state(ckpt.rng_state)
        self.iteration = ckpt.iteration
        expected_hash = ckpt.meta.get("source_hash")
        if expected_hash is not None and expected_hash != self.source_hash:
            raise CheckpointError("resume checkpoint was adapted from a different source model")

    def _batch(self):
        g, cfg = self.generator, self.config
        idx = torch.randint(self.images.shape[0], (cfg.batch_size,), generator=g)
        x0 = self.images[idx]
        if cfg.flip_augment:
            flip = torch.rand(cfg.batch_size, generator=g) < 0.5
            x0 = torch.where(flip[:, None, None, None], x0.flip(-1), x0)
        t = torch.randint(1, cfg.timesteps + 1, (cfg.batch_size,), generator=g)
        eps = torch.randn(x0.shape, generator=g)
        return x0, t, eps

    def step(self) -> dict:
        """Run one optimisation step and return its log row."""
        s = self.schedule
        x0, t, eps = self._batch()
        xt = q_sample(x0, t, eps, s)
        src_out = None
        if self.source is not None:
            with torch.no_grad():
                src_out = self.source(xt, t, generator=_generator_copy(self.generator))
        out = self.model(xt, t, generator=self.generator)
        terms = LossTerms(simple=loss_simple(eps, out.eps_pred))
        if self.model_config.learn_variance:
            terms.vlb = loss_vlb(x0, xt, t, out, s)
        if src_out is not None:
            ada_x0 = predict_x0_from_eps(xt, t, out.eps_pred, s)
            src_x0 = predict_x0_from_eps(xt, t, src_out.eps_pred, s)
            if x0.shape[0] >= 2:
                terms.img = pairwise_sim_loss(src_x0, ada_x0)
                terms.hf = hf_pairwise_loss(src_x0, ada_x0)
            terms.hfmse = hf_mse_loss(ada_x0, x0)
        try:
            total = total_loss(terms, self.weights)
        except FloatingPointError as exc:
            raise FloatingPointError(f"iteration {self.iteration + 1}: {exc}") from exc
        if not math.isfinite(total.item()):
            raise FloatingPointError(f"iteration {self.iteration + 1}: total loss is not finite")
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        self.iteration += 1

        def val(x):
            return 0.0 if x is None else float(x.detach())

        return {
            "iteration": self.iteration,
            "l_simple": val(terms.simple),
            "l_vlb": val(terms.vlb),
            "l_img": val(terms.img),
            "l_hf": val(terms.hf),
            "l_hfmse": val(terms.hfmse),
            "total": float(total.detach()),
        }

    def checkpoint(self) -> Checkpoint:
        meta = {"param_count": param_count(self.model_config), "mode": self.config.mode}
        if self.source_hash is not None:
            meta["source_hash"] = self.source_hash
        return Checkpoint(
            config=self.config.to_dict(),
            model_config=self.model_config,
            schedule=self.schedule,
            params={k: v.detach().clone() for k, v in self.model.state_dict().items()},
            optimizer=self.optimizer.state_dict(),
            iteration=self.iteration,
            rng_state=self.generator.get_state(),
            meta=meta,
        )

    def run(self, on_log: Optional[Callable[[dict], None]] = None) -> Iterator[Checkpoint]:
        """Train up to ``config.iterations``; yield periodic and final checkpoints."""
        every = self.config.checkpoint_every
        while self.iteration < self.config.iterations:
            row = self.step()
            if on_log is not None:
                on_log(row)
            if self.source is not None and params_hash(self.source) != self.source_hash:
                raise RuntimeError("source model changed during adaptation")
            done = self.iteration == self.config.iterations
            if done or (every and self.iteration % every == 0):
                yield self.checkpoint()


def train_scratch(
    config: TrainConfig,
    dataset: torch.Tensor,
    *,
    resume: Optional[Checkpoint] = None,
    on_log: Optional[Callable[[dict], None]] = None,
) -> Iterator[Checkpoint]:
    if config.mode != "scratch":
        raise ValueError("train_scratch needs mode='scratch'")
    return Trainer(config, dataset, resume=resume).run(on_log)


def adapt(
    config: TrainConfig,
    source_ckpt: Checkpoint,
    few_shot_dataset: torch.Tensor,
    *,
    resume: Optional[Checkpoint] = None,
    on_log: Optional[Callable[[dict], None]] = None,
) -> Iterator[Checkpoint]:
    """Adapt a source model; ``finetune`` mode is the same loop with zero pairwise weights."""
    if config.mode not in ("finetune", "pa"):
        raise ValueError("adapt needs mode='finetune' or mode='pa'")
    return Trainer(config, few_shot_dataset, source=source_ckpt, resume=resume).run(on_log)


def model_from_checkpoint(ckpt: Checkpoint) -> Denoiser:
    model = Denoiser(ckpt.model_config)
    model.load_state_dict(ckpt.params)
    model.eval()
    return model


class CsvLog:
    """Append-only training log with a fixed column order."""

    def __init__(self, path, append: bool = False):
        self.path = path
        exists = append and _nonempty(path)
        self._fh = open(path, "a" if append else "w", newline="")
        self._writer = csv.writer(self._fh)
        if not exists:
            self._writer.writerow(LOG_COLUMNS)

    def __call__(self, row: dict) -> None:
        self._writer.writerow([row["iteration"]] + [repr(row[c]) for c in LOG_COLUMNS[1:]])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _nonempty(path) -> bool:
    try:
        with open(path) as fh:
            return bool(fh.read(1))
    except FileNotFoundError:
        return False


def generate(
    model: Denoiser,
    schedule,
    count: int,
    seed: int = 0,
    *,
    batch_size: int = 100,
    variance: str = "learned",
) -> torch.Tensor:
    """Ancestral samples with per-image generators seeded ``seed + index``.

    Each image's random stream depends only on its own seed, never on the batch
    it shares; changing ``batch_size`` alters only floating-point rounding.
    """
    if count < 1:
        raise ValueError("count must be positive")
    cfg = model.config
    was_training = model.training
    model.eval()
    chunks = []
    try:
        for start in range(0, count, batch_size):
            n = min(batch_size, count - start)
            gens = [torch.Generator().manual_seed(seed + start + i) for i in range(n)]
            chunks.append(
                p_sample_loop(
                    model,
                    (n, cfg.channels, cfg.image_size, cfg.image_size),
                    schedule,
                    gens,
                    variance=variance,
                )
            )
    finally:
        model.train(was_training)
    return torch.cat(chunks)
