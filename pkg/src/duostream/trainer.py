"""Dual-stream training.

Each optimizer step draws one batch from the synthesized segmentation
stream (image + mask, augmented) and one from the reconstruction stream
(image only, noised with the forward diffusion at a per-image random step).
The two stream losses are summed and backpropagated through the shared
encoder in a single pass. Loss branches whose weights are all zero are not
built at all, so parameters exclusive to a disabled branch receive no
gradient and the optimizer never touches them.

Every random draw comes from a named stream keyed by (seed, purpose, epoch,
step, slot), so reruns are deterministic and resuming from an epoch
boundary replays exactly the run that would have happened uninterrupted.
"""
from __future__ import annotations

import math
import pickle
from copy import deepcopy
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses as L
from .core import (DatasetManifest, ImageBuffer, ManifestRecord, MaskBuffer,
                   RngState, load_image, load_mask)
from .errors import ConfigError, LoadError, NumericError
from .losses import LossWeights, PerceptualExtractor
from .metrics import evaluate_dataset
from .model import (DualStreamNet, ModelConfig, build_model, image_batch,
                    mask_batch)
from .schedule import (DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, NoiseSchedule,
                       diffuse_closed, make_schedule)
from .synthgen import AugmentPolicy, augment

CHECKPOINT_FORMAT = "duostream-checkpoint"
CHECKPOINT_VERSION = 1
LOSS_CSV_HEADER = "step,epoch,bce,dice,seg,mse,ssim,perc,rec,total"
VAL_CSV_HEADER = "epoch,mean_dice,mean_iou,is_best"
LAST_CHECKPOINT = "last.ckpt"
BEST_CHECKPOINT = "best.ckpt"


@dataclass(frozen=True)
class DiffusionConfig:
    steps: int = 1000
    scheduler: str = "cosine"
    beta_min: float = DEFAULT_BETA_MIN
    beta_max: float = DEFAULT_BETA_MAX

    def build(self) -> NoiseSchedule:
        return make_schedule(self.scheduler, self.steps,
                             beta_min=self.beta_min, beta_max=self.beta_max)


@dataclass(frozen=True)
class TrainConfig:
    seg_batch: int = 32
    rec_batch: int = 32
    learning_rate: float = 0.0001
    epochs: int = 50
    seed: int = 0
    validation_interval: int = 1
    checkpoint_dir: str = "checkpoints"
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_threshold: float = 0.5
    perceptual_distance: str = "squared"
    stop_at_val_dice: float | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.seg_batch < 1 or self.rec_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.validation_interval < 1:
            raise ConfigError("validation_interval must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay must be >= 0")
        if self.perceptual_distance not in ("squared", "absolute"):
            raise ConfigError("perceptual_distance must be 'squared' or 'absolute'")
        if not 0.0 <= self.val_threshold < 1.0:
            raise ConfigError("val_threshold must lie in [0, 1)")


@dataclass
class TrainState:
    """Progress markers saved in every checkpoint. ``epoch`` counts
    completed epochs; resuming continues from there."""

    epoch: int = 0
    global_step: int = 0
    best_val_dice: float = -1.0
    best_epoch: int = 0


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    bce: float
    dice: float
    seg: float
    mse: float
    ssim: float
    perc: float
    rec: float
    total: float

    def csv_row(self) -> str:
        return ",".join([str(self.step), str(self.epoch)]
                        + [repr(v) for v in (self.bce, self.dice, self.seg,
                                             self.mse, self.ssim, self.perc,
                                             self.rec, self.total)])


@dataclass(frozen=True)
class ValRecord:
    epoch: int
    mean_dice: float
    mean_iou: float
    is_best: bool

    def csv_row(self) -> str:
        return (f"{self.epoch},{self.mean_dice!r},{self.mean_iou!r},"
                f"{int(self.is_best)}")


@dataclass(eq=False)
class TrainResult:
    model: DualStreamNet
    state: TrainState
    step_log: list[StepRecord]
    val_log: list[ValRecord]
    last_checkpoint: Path
    best_checkpoint: Path | None


# ---------------------------------------------------------------------------
# checkpoints


def save_weights(model: torch.nn.Module, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    return path


def load_weights(model: torch.nn.Module, path) -> None:
    try:
        sd = torch.load(Path(path), map_location="cpu", weights_only=True)
        model.load_state_dict(sd)
    except (OSError, RuntimeError, KeyError, ValueError,
            pickle.UnpicklingError) as exc:
        raise LoadError(f"cannot load weights from {path}: {exc}") from exc


@dataclass(eq=False)
class Checkpoint:
    model_config: ModelConfig
    train_config: dict
    state: TrainState
    model_state: dict
    optimizer_state: dict | None
    best_model_state: dict | None


def save_checkpoint(path, *, model_cfg: ModelConfig, train_cfg: TrainConfig,
                    model: torch.nn.Module, optimizer, state: TrainState,
                    best_model_state: dict | None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model_cfg),
        "train_config": asdict(train_cfg),
        "state": asdict(state),
        "model": model.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "best_model": best_model_state,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, ValueError, ModuleNotFoundError,
            pickle.UnpicklingError) as exc:
        raise LoadError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise LoadError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    missing = {"model_config", "state", "model"} - payload.keys()
    if missing:
        raise LoadError(f"checkpoint {path} lacks required keys: {sorted(missing)}")
    try:
        model_cfg = ModelConfig(**payload["model_config"])
        state = TrainState(**payload["state"])
    except (TypeError, ConfigError) as exc:
        raise LoadError(f"checkpoint {path} holds an invalid config: {exc}") from exc
    return Checkpoint(model_cfg, payload.get("train_config", {}), state,
                      payload["model"], payload.get("optimizer"),
                      payload.get("best_model"))


# ---------------------------------------------------------------------------
# data streams


class _Stream:
    """Records of one manifest with lazy pixel caching and deterministic
    per-epoch batch ordering (the shorter stream cycles through reshuffled
    permutations until the epoch's step budget is met)."""

    def __init__(self, manifest: DatasetManifest, *, need_masks: bool, name: str):
        self.name = name
        self.manifest = manifest
        if need_masks:
            self.records = manifest.with_masks()
        else:
            self.records = manifest.records
        if not self.records:
            raise ConfigError(f"{name} manifest has no usable records")
        self._cache: dict[int, tuple[ImageBuffer, MaskBuffer | None]] = {}

    def __len__(self) -> int:
        return len(self.records)

    def pair(self, i: int) -> tuple[ImageBuffer, MaskBuffer | None]:
        if i not in self._cache:
            rec = self.records[i]
            image = load_image(self.manifest.resolve(rec.image_path))
            mask = (load_mask(self.manifest.resolve(rec.mask_path))
                    if rec.mask_path is not None else None)
            self._cache[i] = (image, mask)
        return self._cache[i]

    def epoch_batches(self, rng: RngState, epoch: int, batch: int,
                      steps: int) -> list[list[int]]:
        order: list[int] = []
        piece = 0
        while len(order) < steps * batch:
            gen = rng.child("order", self.name, epoch, piece).generator()
            order.extend(int(i) for i in gen.permutation(len(self.records)))
            piece += 1
        return [order[s * batch:(s + 1) * batch] for s in range(steps)]


def _append_csv(path: Path, header: str, row: str) -> None:
    new = not path.exists()
    with path.open("a", encoding="utf-8") as fh:
        if new:
            fh.write(header + "\n")
        fh.write(row + "\n")


# ---------------------------------------------------------------------------
# the loop


def _make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                             betas=(cfg.adam_beta1, cfg.adam_beta2),
                             eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


def _apply_hyperparams(optimizer, cfg: TrainConfig) -> None:
    for group in optimizer.param_groups:
        group["lr"] = cfg.learning_rate
        group["betas"] = (cfg.adam_beta1, cfg.adam_beta2)
        group["eps"] = cfg.adam_eps
        group["weight_decay"] = cfg.weight_decay


def _clone_state_dict(model: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(model_cfg: ModelConfig, train_cfg: TrainConfig,
          seg_manifest: DatasetManifest, rec_manifest: DatasetManifest,
          val_manifest: DatasetManifest) -> TrainResult:
    """Train from a fresh initialization."""
    rng = RngState(train_cfg.seed)
    model = build_model(model_cfg, rng.child("init"))
    optimizer = _make_optimizer(model, train_cfg)
    ckpt_dir = Path(train_cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for name in ("loss.csv", "val.csv"):
        (ckpt_dir / name).unlink(missing_ok=True)
    return _fit(model, optimizer, TrainState(), None, model_cfg, train_cfg,
                seg_manifest, rec_manifest, val_manifest)


def fine_tune(checkpoint_path, model_cfg: ModelConfig, train_cfg: TrainConfig,
              seg_manifest: DatasetManifest, rec_manifest: DatasetManifest,
              val_manifest: DatasetManifest, *,
              fresh_start: bool = False) -> TrainResult:
    """Continue training from a checkpoint.

    With ``fresh_start`` the checkpoint contributes weights only (epoch
    counter and optimizer state reset); otherwise this resumes the run, and
    a target ``epochs`` at or below the checkpoint's completed count is a
    no-op that leaves the weights untouched.
    """
    ckpt = load_checkpoint(checkpoint_path)
    if ckpt.model_config != model_cfg:
        raise ConfigError(
            f"checkpoint was built with {ckpt.model_config}, which differs "
            f"from the requested {model_cfg}")
    model = DualStreamNet(model_cfg)
    model.load_state_dict(ckpt.model_state)
    optimizer = _make_optimizer(model, train_cfg)
    ckpt_dir = Path(train_cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if fresh_start:
        state = TrainState()
        best = None
        for name in ("loss.csv", "val.csv"):
            (ckpt_dir / name).unlink(missing_ok=True)
    else:
        state = TrainState(**asdict(ckpt.state))
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
            _apply_hyperparams(optimizer, train_cfg)
        best = ckpt.best_model_state
    return _fit(model, optimizer, state, best, model_cfg, train_cfg,
                seg_manifest, rec_manifest, val_manifest)


def _fit(model: DualStreamNet, optimizer, state: TrainState,
         best_model_state: dict | None, model_cfg: ModelConfig,
         train_cfg: TrainConfig, seg_manifest: DatasetManifest,
         rec_manifest: DatasetManifest,
         val_manifest: DatasetManifest) -> TrainResult:
    weights = train_cfg.loss_weights
    seg = _Stream(seg_manifest, need_masks=True, name="seg")
    rec = _Stream(rec_manifest, need_masks=False, name="rec")
    _Stream(val_manifest, need_masks=True, name="val")  # fail early if unusable

    rng = RngState(train_cfg.seed)
    schedule = train_cfg.diffusion.build()
    extractor = PerceptualExtractor.frozen_random(in_channels=3)
    ckpt_dir = Path(train_cfg.checkpoint_dir)
    steps_per_epoch = max(math.ceil(len(seg) / train_cfg.seg_batch),
                          math.ceil(len(rec) / train_cfg.rec_batch))
    step_log: list[StepRecord] = []
    val_log: list[ValRecord] = []
    best_path = ckpt_dir / BEST_CHECKPOINT if best_model_state is not None else None

    def save_last() -> Path:
        return save_checkpoint(ckpt_dir / LAST_CHECKPOINT, model_cfg=model_cfg,
                               train_cfg=train_cfg, model=model,
                               optimizer=optimizer, state=state,
                               best_model_state=best_model_state)

    for epoch in range(state.epoch, train_cfg.epochs):
        epoch_no = epoch + 1
        seg_batches = seg.epoch_batches(rng, epoch, train_cfg.seg_batch,
                                        steps_per_epoch)
        rec_batches = rec.epoch_batches(rng, epoch, train_cfg.rec_batch,
                                        steps_per_epoch)
        for step in range(steps_per_epoch):
            record = _train_step(model, optimizer, seg, rec,
                                 seg_batches[step], rec_batches[step],
                                 schedule, extractor, weights, train_cfg,
                                 rng, epoch, step, state)
            step_log.append(record)
            _append_csv(ckpt_dir / "loss.csv", LOSS_CSV_HEADER, record.csv_row())
        state.epoch = epoch_no

        if epoch_no % train_cfg.validation_interval == 0 or epoch_no == train_cfg.epochs:
            report = evaluate_dataset(model, val_manifest,
                                      threshold=train_cfg.val_threshold)
            mean_dice = report.overall.mean_dice
            is_best = mean_dice > state.best_val_dice
            if is_best:
                state.best_val_dice = mean_dice
                state.best_epoch = epoch_no
                best_model_state = _clone_state_dict(model)
                best_path = save_checkpoint(
                    ckpt_dir / BEST_CHECKPOINT, model_cfg=model_cfg,
                    train_cfg=train_cfg, model=model, optimizer=optimizer,
                    state=state, best_model_state=best_model_state)
            val_record = ValRecord(epoch_no, mean_dice,
                                   report.overall.mean_iou, is_best)
            val_log.append(val_record)
            _append_csv(ckpt_dir / "val.csv", VAL_CSV_HEADER, val_record.csv_row())
            if (train_cfg.stop_at_val_dice is not None
                    and state.best_val_dice >= train_cfg.stop_at_val_dice):
                save_last()
                break
        save_last()

    last_path = save_last()
    return TrainResult(model, state, step_log, val_log, last_path, best_path)


def _train_step(model, optimizer, seg: _Stream, rec: _Stream,
                seg_idx: Sequence[int], rec_idx: Sequence[int],
                schedule: NoiseSchedule, extractor: PerceptualExtractor,
                weights: LossWeights, train_cfg: TrainConfig, rng: RngState,
                epoch: int, step: int, state: TrainState) -> StepRecord:
    terms = []
    parts = {k: 0.0 for k in ("bce", "dice", "seg", "mse", "ssim", "perc", "rec")}
    batch_ids: list[str] = []

    if weights.any_seg:
        images, masks = [], []
        for slot, i in enumerate(seg_idx):
            image, mask = seg.pair(i)
            image, mask = augment(image, mask, train_cfg.augment,
                                  rng.child("aug", epoch, step, slot))
            images.append(image)
            masks.append(mask)
            batch_ids.append(seg.records[i].image_path)
        pred = model.forward_mask(image_batch(images))
        seg_parts = L.seg_loss(pred, mask_batch(masks), weights)
        parts.update(bce=seg_parts.bce.item(), dice=seg_parts.dice.item(),
                     seg=seg_parts.total.item())
        terms.append(seg_parts.total)

    if weights.any_rec:
        t_gen = rng.child("t", epoch, step).generator()
        draws = t_gen.integers(1, schedule.steps + 1, size=len(rec_idx))
        clean, noised = [], []
        for slot, (i, t) in enumerate(zip(rec_idx, draws)):
            image, _ = rec.pair(i)
            clean.append(image)
            noised.append(diffuse_closed(image, int(t), schedule,
                                         rng.child("noise", epoch, step, slot)))
            batch_ids.append(rec.records[i].image_path)
        recon = model.forward_image(image_batch(noised))
        rec_parts = L.rec_loss(recon, image_batch(clean), extractor, weights,
                               distance=train_cfg.perceptual_distance)
        parts.update(mse=rec_parts.mse.item(), ssim=rec_parts.ssim.item(),
                     perc=rec_parts.perceptual.item(), rec=rec_parts.total.item())
        terms.append(rec_parts.total)

    if terms:
        total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
        if not torch.isfinite(total):
            raise NumericError(
                f"non-finite loss at epoch {epoch + 1} step {step + 1}; "
                f"batch: {batch_ids}")
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
        total_value = total.item()
    else:
        # every weight is zero: the step is a no-op that leaves weights alone
        total_value = 0.0
    state.global_step += 1
    return StepRecord(state.global_step, epoch + 1, parts["bce"], parts["dice"],
                      parts["seg"], parts["mse"], parts["ssim"], parts["perc"],
                      parts["rec"], total_value)


# ---------------------------------------------------------------------------
# gradient checking

GRAD_CHECK_LOSSES = ("bce", "dice", "seg", "mse", "ssim", "perceptual",
                     "rec", "total")

_TINY_CFG = ModelConfig(in_channels=3, base_width=4, num_levels=2,
                        blocks_per_level=2, norm_groups=2, image_size=8)


def grad_check(loss: str = "total", *, model_cfg: ModelConfig = _TINY_CFG,
               n_params: int = 500, step_size: float = 1e-5,
               seed: int = 0) -> float:
    """Compare autograd against central finite differences in float64.

    Returns the maximum relative error over ``n_params`` parameters sampled
    from those the loss actually reaches, with the relative error floored at
    1e-4 in the denominator so near-zero gradients are judged absolutely.
    """
    if loss not in GRAD_CHECK_LOSSES:
        raise ConfigError(f"loss must be one of {GRAD_CHECK_LOSSES}, got {loss!r}")
    rng = RngState(seed).child("gradcheck")
    model = build_model(model_cfg, rng.child("init")).double()
    gen = rng.child("data").generator()
    b, s = 2, model_cfg.image_size
    cin = model_cfg.in_channels
    seg_x = torch.tensor(gen.uniform(size=(b, cin, s, s)), dtype=torch.float64)
    seg_y = torch.tensor((gen.uniform(size=(b, 1, s, s)) > 0.5).astype(np.float64))
    clean = torch.tensor(gen.uniform(size=(b, cin, s, s)), dtype=torch.float64)
    noised = torch.tensor(0.5 + 0.5 * gen.standard_normal((b, cin, s, s)))
    extractor = PerceptualExtractor.frozen_random(in_channels=3)
    weights = LossWeights()

    def compute() -> torch.Tensor:
        if loss in ("bce", "dice", "seg", "total"):
            pred = model.forward_mask(seg_x)
        if loss in ("mse", "ssim", "perceptual", "rec", "total"):
            recon = model.forward_image(noised)
        if loss == "bce":
            return L.bce_loss(pred, seg_y)
        if loss == "dice":
            return L.dice_loss(pred, seg_y)
        if loss == "seg":
            return L.seg_loss(pred, seg_y, weights).total
        if loss == "mse":
            return L.mse_loss(recon, clean)
        if loss == "ssim":
            return L.ssim_loss(recon, clean)
        if loss == "perceptual":
            return L.perceptual_loss(recon, clean, extractor)
        if loss == "rec":
            return L.rec_loss(recon, clean, extractor, weights).total
        return (L.seg_loss(pred, seg_y, weights).total
                + L.rec_loss(recon, clean, extractor, weights).total)

    model.zero_grad(set_to_none=True)
    compute().backward()
    reached = [p for p in model.parameters() if p.grad is not None]
    sizes = [p.numel() for p in reached]
    total_coords = int(sum(sizes))
    n = min(n_params, total_coords)
    chosen = np.sort(gen.choice(total_coords, size=n, replace=False))

    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    with torch.no_grad():
        for flat in chosen:
            pi = int(np.searchsorted(bounds, flat, side="right") - 1)
            j = int(flat - bounds[pi])
            param = reached[pi]
            view = param.data.view(-1)
            analytic = float(param.grad.view(-1)[j])
            orig = float(view[j])
            view[j] = orig + step_size
            hi = float(compute())
            view[j] = orig - step_size
            lo = float(compute())
            view[j] = orig
            fd = (hi - lo) / (2.0 * step_size)
            denom = max(abs(analytic), abs(fd), 1e-4)
            worst = max(worst, abs(fd - analytic) / denom)
    return worst
