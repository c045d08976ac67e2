"""Command-line entry point: ``ddpm-pa <command>``.

Commands: ``pretrain``, ``adapt``, ``sample``, ``eval``, ``make-synthetic``,
``sweep``.  Exit codes: 0 success, 1 runtime failure, 2 validation failure.

Run configs are flat ``key = value`` files (``#`` starts a comment) using the
:class:`~ddpm_pa.training.TrainConfig` field names plus ``dataset``,
``source_checkpoint``, ``output_dir``, ``sample_count`` and ``sample_seed``.
Any key can be overridden on the command line as ``--key value``.  Relative
output directories are resolved against ``$DDPM_PA_OUTPUT_ROOT`` when it is
set.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from . import data
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .metrics import RandomConvBackend, evaluate
from .training import CsvLog, TrainConfig, Trainer, generate, model_from_checkpoint

log = logging.getLogger("ddpm_pa")

OUTPUT_ROOT_ENV = "DDPM_PA_OUTPUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class ValidationError(Exception):
    pass


@dataclass
class RunConfig:
    dataset: Optional[str] = None
    source_checkpoint: Optional[str] = None
    output_dir: str = "runs/default"
    sample_count: int = 9
    sample_seed: int = 0


_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_RUN_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    defaults = {**asdict(TrainConfig()), **asdict(RunConfig())}
    if key not in defaults:
        raise ValidationError(f"unknown config key {key!r}")
    text = raw.strip()
    field_type = str((_TRAIN_FIELDS.get(key) or _RUN_FIELDS[key]).type)
    if text.lower() in ("none", "null", "") and "Optional" in field_type:
        return None
    try:
        if "bool" in field_type:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "int" in field_type:
            return int(text)
        if "float" in field_type:
            return float(text)
    except ValueError:
        raise ValidationError(f"bad value for {key}: {raw!r} (expected {field_type})") from None
    return text


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = _coerce(key, value)
    return values


def dump_config(train: TrainConfig, run: RunConfig) -> str:
    lines = []
    for key, value in {**asdict(train), **asdict(run)}.items():
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


def resolve_config(args, mode: Optional[str] = None) -> tuple[TrainConfig, RunConfig]:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text()))
    for key in list(_TRAIN_FIELDS) + list(_RUN_FIELDS):
        raw = getattr(args, key, None)
        if raw is not None:
            values[key] = _coerce(key, raw)
    if mode is not None and "mode" not in values:
        values["mode"] = mode
    train_kwargs = {k: v for k, v in values.items() if k in _TRAIN_FIELDS}
    run_kwargs = {k: v for k, v in values.items() if k in _RUN_FIELDS}
    try:
        train = TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise ValidationError(f"invalid config: {exc}") from None
    run = RunConfig(**run_kwargs)
    run.output_dir = str(_output_path(run.output_dir))
    return train, run


def _output_path(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _check_writable(path: Path) -> None:
    probe = path
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir() or not os.access(probe, os.W_OK):
        raise ValidationError(f"output directory not writable: {path}")


def _validate_training(train: TrainConfig, run: RunConfig, need_source: bool):
    if not run.dataset:
        raise ValidationError("no dataset directory given (set 'dataset')")
    dataset = Path(run.dataset)
    if not dataset.is_dir():
        raise ValidationError(f"dataset directory not found: {dataset}")
    try:
        images = data.load_image_dir(dataset, train.image_size, train.channels)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    if train.mode == "pa" and len(images) < 2:
        raise ValidationError(f"pa mode needs at least 2 images, {dataset} has {len(images)}")
    source = None
    if need_source:
        if not run.source_checkpoint:
            raise ValidationError(f"{train.mode} mode needs 'source_checkpoint'")
        src_path = Path(run.source_checkpoint)
        if not src_path.is_file():
            raise ValidationError(f"source checkpoint not found: {src_path}")
        try:
            source = load_checkpoint(src_path, expect=train.model_config())
        except (CheckpointError, OSError) as exc:
            raise ValidationError(f"cannot use source checkpoint {src_path}: {exc}") from None
    _check_writable(Path(run.output_dir))
    return images, source


def _write_grid(model, schedule, run: RunConfig, path: Path) -> None:
    samples = generate(model, schedule, run.sample_count, run.sample_seed)
    data.save_png(data.make_grid(samples), path)


def _train(train: TrainConfig, run: RunConfig, images, source) -> int:
    out = Path(run.output_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(train, run))
    trainer = Trainer(train, images, source=source)

    def on_log(row):
        csv_log(row)
        if train.sample_every and row["iteration"] % train.sample_every == 0:
            _write_grid(trainer.model, trainer.schedule, run,
                        out / "samples" / f"grid_{row['iteration']:07d}.png")

    try:
        with CsvLog(out / "log.csv") as csv_log:
            for ckpt in trainer.run(on_log):
                save_checkpoint(ckpt, out / "checkpoints" / f"ckpt_{ckpt.iteration:07d}.ckpt")
                save_checkpoint(ckpt, out / "latest.ckpt")
                log.info("iteration %d: checkpoint written", ckpt.iteration)
    except Exception as exc:  # noqa: BLE001 - any mid-run failure aborts with a checkpoint
        log.error("training aborted at iteration %d: %s", trainer.iteration, exc)
        try:
            save_checkpoint(trainer.checkpoint(), out / "abort.ckpt")
        except Exception as save_exc:  # noqa: BLE001
            log.error("could not write abort checkpoint: %s", save_exc)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_pretrain(args) -> int:
    train, run = resolve_config(args, mode="scratch")
    if train.mode != "scratch":
        raise ValidationError("pretrain needs mode = scratch")
    if args.dump_config:
        print(dump_config(train, run), end="")
        return EXIT_OK
    images, _ = _validate_training(train, run, need_source=False)
    return _train(train, run, images, None)


def cmd_adapt(args) -> int:
    train, run = resolve_config(args, mode="pa")
    if train.mode not in ("pa", "finetune"):
        raise ValidationError("adapt needs mode = pa or finetune")
    if args.dump_config:
        print(dump_config(train, run), end="")
        return EXIT_OK
    images, source = _validate_training(train, run, need_source=True)
    return _train(train, run, images, source)


def cmd_sweep(args) -> int:
    train, run = resolve_config(args, mode="pa")
    if args.param not in _TRAIN_FIELDS:
        raise ValidationError(f"cannot sweep unknown key {args.param!r}")
    values = [_coerce(args.param, v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ValidationError("no sweep values given")
    runs = []
    for value in values:
        try:
            cfg = TrainConfig(**{**asdict(train), args.param: value})
        except ValueError as exc:
            raise ValidationError(f"invalid sweep value {args.param}={value}: {exc}") from None
        sub = RunConfig(**{**asdict(run), "output_dir": str(Path(run.output_dir) / f"{args.param}_{value}")})
        runs.append((cfg, sub))
    prepared = [
        (cfg, sub, *_validate_training(cfg, sub, need_source=cfg.mode != "scratch"))
        for cfg, sub in runs
    ]
    status = EXIT_OK
    for cfg, sub, images, source in prepared:
        log.info("sweep run %s", sub.output_dir)
        status = max(status, _train(cfg, sub, images, source))
    return status


def cmd_sample(args) -> int:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    if args.count < 1:
        raise ValidationError("count must be positive")
    out = _output_path(args.out)
    _check_writable(out)
    try:
        ckpt = load_checkpoint(path)
    except CheckpointError as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc}") from None
    model = model_from_checkpoint(ckpt)
    samples = generate(model, ckpt.schedule, args.count, args.seed, variance=args.variance)
    # individual images go in their own directory so it can be passed to eval
    (out / "images").mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(samples):
        data.save_png(img, out / "images" / f"sample_{i:05d}.png")
    data.save_png(data.make_grid(samples), out / "grid.png")
    return EXIT_OK


def cmd_eval(args) -> int:
    sets = []
    for label, directory in (("generated", args.generated), ("training", args.training)):
        p = Path(directory)
        if not p.is_dir():
            raise ValidationError(f"{label} directory not found: {p}")
        try:
            sets.append(data.load_image_dir(p))
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
    gen, train = sets
    if gen.shape[1:] != train.shape[1:]:
        raise ValidationError(
            f"generated images {tuple(gen.shape[1:])} and training images "
            f"{tuple(train.shape[1:])} differ in shape"
        )
    report = evaluate(
        gen.double(),
        train.double(),
        RandomConvBackend(seed=args.backend_seed),
        flip_augment_training=args.flip_augment_training,
        table_csv=args.distance_csv,
    )
    text = report.to_json()
    if args.out:
        out = _output_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    if args.count < 1:
        raise ValidationError("count must be positive")
    if args.size < 2 or args.size % 2:
        raise ValidationError("size must be an even number >= 2")
    if args.domain not in data.DOMAINS:
        raise ValidationError(f"unknown domain {args.domain!r}")
    out = _output_path(args.out)
    _check_writable(out)
    data.write_synthetic(out, args.count, args.size, args.domain, args.seed)
    return EXIT_OK


def _add_config_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    for key in list(_TRAIN_FIELDS) + list(_RUN_FIELDS):
        flags = [f"--{key}"]
        if "_" in key:
            flags.append(f"--{key.replace('_', '-')}")
        p.add_argument(*flags, dest=key, metavar="VALUE", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddpm-pa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a diffusion model from scratch")
    _add_config_options(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="adapt a source checkpoint (pa or finetune)")
    _add_config_options(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("sweep", help="one adaptation run per value of a config key")
    _add_config_options(p)
    p.add_argument("--param", required=True, help="config key to sweep, e.g. lambda4")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser(
        "sample", help="draw samples from a checkpoint into OUT/images plus OUT/grid.png"
    )
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variance", default="learned", choices=("learned", "posterior", "beta"))
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="Nearest-LPIPS, Intra-LPIPS and Frechet distance report")
    p.add_argument("--generated", required=True)
    p.add_argument("--training", required=True)
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--flip-augment-training", action="store_true")
    p.add_argument("--backend-seed", type=int, default=0)
    p.add_argument("--distance-csv", help="write the full distance table here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-synthetic", help="write a toy PNG dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--domain", default="shapes", choices=data.DOMAINS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
