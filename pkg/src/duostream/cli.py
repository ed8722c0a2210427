"""Command line interface.

Subcommands: synth, train, finetune, eval, diffuse, report. Every command
prints its fully resolved configuration before doing any work. Exit codes:
0 success, 2 configuration or usage error, 3 data loading error, 4 numeric
failure during training.

Seeds resolve as: --seed flag, then the config file value (train command),
then the DUOSTREAM_SEED environment variable, then 0.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import typing
from pathlib import Path

import numpy as np
import yaml

from .core import (SEED_ENV_VAR, DatasetManifest, ImageBuffer, RngState,
                   load_image, load_mask, read_manifest, save_image)
from .errors import ConfigError, DuostreamError, LoadError, NumericError
from .metrics import evaluate_dataset
from .model import DualStreamNet, ModelConfig
from .plots import plot_domain_bars, plot_loss_curves, plot_validation_curve
from .schedule import diffuse_closed, make_schedule, write_schedule_csv
from .synthgen import (DonorPair, SynthSpec, extract_objects,
                       generate_dataset, generate_toy_dataset)
from .trainer import TrainConfig, fine_tune, load_checkpoint, train

_DONOR_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


# ---------------------------------------------------------------------------
# config plumbing


def _load_config_data(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {p} must be a mapping at the top level")
    return data


def _apply_override(data: dict, spec: str) -> None:
    if "=" not in spec:
        raise ConfigError(f"override must look like key.path=value, got {spec!r}")
    key, raw = spec.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {key!r} crosses a non-mapping value")
    node[parts[-1]] = value


def _from_dict(cls, data, path: str):
    """Build a (possibly nested) config dataclass, rejecting unknown keys
    with the offending dotted path."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path} must be a mapping, "
                          f"got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key: {path}.{key}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _from_dict(hint, value, f"{path}.{f.name}")
        elif isinstance(value, list):
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid {path} config: {exc}") from exc


def _build_configs(data: dict) -> tuple[ModelConfig, TrainConfig]:
    for key in data:
        if key not in ("model", "train"):
            raise ConfigError(f"unknown config key: {key}")
    model_cfg = _from_dict(ModelConfig, data.get("model"), "model")
    train_cfg = _from_dict(TrainConfig, data.get("train"), "train")
    return model_cfg, train_cfg


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or raw == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None
    if value < 0:
        raise ConfigError(f"{SEED_ENV_VAR} must be >= 0, got {value}")
    return value


def _resolve_seed(flag: int | None, config_value=None) -> int:
    if flag is not None:
        return flag
    if config_value is not None:
        if not isinstance(config_value, int) or config_value < 0:
            raise ConfigError(f"config seed must be a non-negative int, "
                              f"got {config_value!r}")
        return config_value
    env = _env_seed()
    return 0 if env is None else env


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _echo(command: str, payload: dict) -> None:
    print(f"effective config ({command}):")
    text = yaml.safe_dump(_plain(payload), default_flow_style=False,
                          sort_keys=True)
    for line in text.rstrip().splitlines():
        print("  " + line)


def _read_manifest_arg(path) -> DatasetManifest:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"manifest not found: {p}")
    return read_manifest(p)


# ---------------------------------------------------------------------------
# synth


def _load_donors(root: Path) -> list[DonorPair]:
    images_dir = root / "images"
    masks_dir = root / "masks"
    if not images_dir.is_dir():
        raise ConfigError(f"donor directory {root} has no images/ subdirectory")
    files = sorted(p for p in images_dir.iterdir()
                   if p.suffix.lower() in _DONOR_SUFFIXES)
    if not files:
        raise LoadError(f"no donor images under {images_dir}")
    donors = []
    for img_path in files:
        mask_path = masks_dir / img_path.name
        if not mask_path.is_file():
            raise LoadError(f"donor {img_path.name} has no mask at {mask_path}")
        donors.append(extract_objects(load_image(img_path),
                                      load_mask(mask_path)))
    return donors


def cmd_synth(args) -> int:
    seed = _resolve_seed(args.seed)
    out = Path(args.out)
    _echo("synth", {
        "out": out, "count": args.count, "seed": seed, "toy": args.toy,
        "donors": args.donors, "canvas": args.canvas,
        "objects": list(args.objects), "scale": list(args.scale),
        "rotation": list(args.rotation), "background": args.background,
        "domain": args.domain, "split": args.split, "workers": args.workers,
    })
    rng = RngState(seed).child("synth")
    if args.toy:
        manifest = generate_toy_dataset(
            out, count=args.count, canvas_size=args.canvas,
            objects_range=tuple(args.objects), rng=rng,
            domain_tag=args.domain or "toy", split=args.split,
            workers=args.workers)
    else:
        if not args.donors:
            raise ConfigError("pass --donors DIR or --toy")
        donors = _load_donors(Path(args.donors))
        spec = SynthSpec(canvas_size=args.canvas, count=args.count,
                         objects_min=args.objects[0],
                         objects_max=args.objects[1],
                         scale_range=tuple(args.scale),
                         rotation_range=tuple(args.rotation),
                         background=args.background)
        manifest = generate_dataset(donors, spec, out, rng,
                                    domain_tags=args.domain, split=args.split,
                                    workers=args.workers)
    print(f"wrote {len(manifest)} records to {out / 'manifest.txt'}")
    return 0


# ---------------------------------------------------------------------------
# train / finetune


def _prepare_train(args) -> tuple[ModelConfig, TrainConfig, dict]:
    data = _load_config_data(args.config)
    for spec in args.override or []:
        _apply_override(data, spec)
    train_section = data.get("train")
    if train_section is None:
        train_section = {}
        data["train"] = train_section
    if not isinstance(train_section, dict):
        raise ConfigError("config section train must be a mapping")
    seed = _resolve_seed(args.seed, train_section.get("seed"))
    train_section["seed"] = seed
    if args.checkpoint_dir:
        train_section["checkpoint_dir"] = str(args.checkpoint_dir)
    model_cfg, train_cfg = _build_configs(data)
    payload = {
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(train_cfg),
        "seg_manifest": args.seg_manifest,
        "rec_manifest": args.rec_manifest,
        "val_manifest": args.val_manifest,
    }
    return model_cfg, train_cfg, payload


def _print_train_result(result) -> None:
    state = result.state
    print(f"completed {state.epoch} epoch(s), {state.global_step} step(s)")
    if state.best_epoch > 0:
        print(f"best val dice: {state.best_val_dice:.4f} at epoch {state.best_epoch}")
    print(f"last checkpoint: {result.last_checkpoint}")
    if result.best_checkpoint is not None:
        print(f"best checkpoint: {result.best_checkpoint}")


def cmd_train(args) -> int:
    model_cfg, train_cfg, payload = _prepare_train(args)
    _echo("train", payload)
    seg = _read_manifest_arg(args.seg_manifest)
    rec = _read_manifest_arg(args.rec_manifest)
    val = _read_manifest_arg(args.val_manifest)
    result = train(model_cfg, train_cfg, seg, rec, val)
    _print_train_result(result)
    return 0


def cmd_finetune(args) -> int:
    model_cfg, train_cfg, payload = _prepare_train(args)
    payload["init"] = args.init
    payload["fresh_start"] = bool(args.fresh)
    _echo("finetune", payload)
    init = Path(args.init)
    if not init.is_file():
        raise ConfigError(f"checkpoint not found: {init}")
    seg = _read_manifest_arg(args.seg_manifest)
    rec = _read_manifest_arg(args.rec_manifest)
    val = _read_manifest_arg(args.val_manifest)
    result = fine_tune(init, model_cfg, train_cfg, seg, rec, val,
                       fresh_start=bool(args.fresh))
    _print_train_result(result)
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    seed = _resolve_seed(args.seed)
    out = Path(args.out)
    _echo("eval", {"checkpoint": args.checkpoint, "manifest": args.manifest,
                   "out": out, "threshold": args.threshold, "seed": seed})
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    model = DualStreamNet(ckpt.model_config)
    try:
        model.load_state_dict(ckpt.model_state)
    except (RuntimeError, KeyError) as exc:
        raise LoadError(f"checkpoint weights do not fit their declared "
                        f"model config: {exc}") from exc
    manifest = _read_manifest_arg(args.manifest)
    report = evaluate_dataset(model, manifest, threshold=args.threshold)
    image_csv = report.to_image_csv(out / "per_image.csv")
    summary_csv = report.to_summary_csv(out / "summary.csv")
    overall = report.overall
    print(f"evaluated {overall.n} image(s), skipped {report.skipped}: "
          f"dice {overall.mean_dice:.4f}, iou {overall.mean_iou:.4f}")
    print(f"wrote {image_csv}")
    print(f"wrote {summary_csv}")
    return 0


# ---------------------------------------------------------------------------
# diffuse


def cmd_diffuse(args) -> int:
    seed = _resolve_seed(args.seed)
    steps = args.steps
    ts = []
    if args.t:
        try:
            ts = [int(x) for x in args.t.split(",") if x.strip() != ""]
        except ValueError:
            raise ConfigError(f"--t must be comma-separated ints, got {args.t!r}") from None
    if not ts:
        ts = [steps]
    out = Path(args.out)
    _echo("diffuse", {"image": args.image, "out": out, "t": ts,
                      "steps": steps, "scheduler": args.scheduler,
                      "beta_min": args.beta_min, "beta_max": args.beta_max,
                      "seed": seed})
    image_path = Path(args.image)
    if not image_path.is_file():
        raise ConfigError(f"image not found: {image_path}")
    image = load_image(image_path)
    schedule = make_schedule(args.scheduler, steps, beta_min=args.beta_min,
                             beta_max=args.beta_max)
    rng = RngState(seed).child("diffuse")
    panels = [image.data]
    separator = np.ones((image.height, 2, image.channels))
    for t in ts:
        noised = diffuse_closed(image, t, schedule, rng.child("step", t))
        observed_mean = float(noised.data.mean())
        observed_std = float(noised.data.std())
        print(f"t={t}: alpha_bar={schedule.alpha_bar(t):.6e} "
              f"mean={observed_mean:.4f} std={observed_std:.4f}")
        panels.extend([separator, np.clip(noised.data, 0.0, 1.0)])
    grid = ImageBuffer(np.concatenate(panels, axis=1))
    grid_path = save_image(grid, out / "grid.png")
    csv_path = write_schedule_csv(schedule, out / "schedule.csv")
    print(f"wrote {grid_path}")
    print(f"wrote {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    out = Path(args.out)
    _echo("report", {"loss_csv": args.loss_csv, "val_csv": args.val_csv,
                     "summary_csv": args.summary_csv, "out": out})
    if not (args.loss_csv or args.val_csv or args.summary_csv):
        raise ConfigError(
            "pass at least one of --loss-csv, --val-csv, --summary-csv")
    written = []
    if args.loss_csv:
        written.append(plot_loss_curves(args.loss_csv, out / "loss.png"))
    if args.val_csv:
        written.append(plot_validation_curve(args.val_csv, out / "validation.png"))
    if args.summary_csv:
        written.append(plot_domain_bars(args.summary_csv, out / "domains.png"))
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duostream",
        description="Dual-stream segmentation: synthesize data, train, "
                    "evaluate, inspect the diffusion, render reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--toy", action="store_true",
                   help="procedural toy scenes instead of donor compositing")
    p.add_argument("--donors", help="directory with images/ and masks/")
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--objects", nargs=2, type=int, default=[1, 3],
                   metavar=("MIN", "MAX"))
    p.add_argument("--scale", nargs=2, type=float, default=[0.7, 1.3],
                   metavar=("LO", "HI"))
    p.add_argument("--rotation", nargs=2, type=float, default=[0.0, 360.0],
                   metavar=("LO", "HI"))
    p.add_argument("--background", choices=("donor", "texture"), default="donor")
    p.add_argument("--domain", help="domain tag (default: per-donor tags or 'toy')")
    p.add_argument("--split", choices=("train", "val", "test"), default="train")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    for name, func in (("train", cmd_train), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} on dual-stream data")
        p.add_argument("--config", help="YAML config with model:/train: sections")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="dot-path config override, repeatable")
        p.add_argument("--seg-manifest", required=True)
        p.add_argument("--rec-manifest", required=True)
        p.add_argument("--val-manifest", required=True)
        p.add_argument("--checkpoint-dir")
        p.add_argument("--seed", type=int)
        if name == "finetune":
            p.add_argument("--init", required=True,
                           help="checkpoint to start from")
            p.add_argument("--fresh", action="store_true",
                           help="take weights only; restart epochs and optimizer")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diffuse", help="visualize the forward diffusion")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t", default="",
                   help="comma-separated steps (default: the final step)")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--scheduler", choices=("cosine", "linear"), default="cosine")
    p.add_argument("--beta-min", type=float, default=0.0001)
    p.add_argument("--beta-max", type=float, default=0.02)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_diffuse)

    p = sub.add_parser("report", help="render CSV logs to figures")
    p.add_argument("--loss-csv")
    p.add_argument("--val-csv")
    p.add_argument("--summary-csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except LoadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DuostreamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    raise SystemExit(main())
