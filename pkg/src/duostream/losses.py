"""Training losses for both streams.

Segmentation stream: weighted BCE + soft Dice on the mask head.
Reconstruction stream: weighted MSE + windowed SSIM + perceptual distance
between the reconstructed and the clean image.

All functions take (B, C, H, W) tensors and return scalar tensors, so every
term is differentiable end to end. Predictions are expected in [0, 1] (the
network ends in a sigmoid); BCE clamps away from exact 0/1 before the logs.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import RngState
from .errors import ConfigError, ShapeError

BCE_CLAMP = 1e-7
DICE_SMOOTH = 1.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2

PERCEPTUAL_SEED = 1405
PERCEPTUAL_WIDTHS = (8, 16, 32)


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the five loss terms; zero disables a term."""

    bce: float = 1.0
    dice: float = 1.0
    mse: float = 1.0
    ssim: float = 1.0
    perceptual: float = 1.0

    def __post_init__(self):
        for name in ("bce", "dice", "mse", "ssim", "perceptual"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0.0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {v}")

    @property
    def any_seg(self) -> bool:
        return self.bce > 0.0 or self.dice > 0.0

    @property
    def any_rec(self) -> bool:
        return self.mse > 0.0 or self.ssim > 0.0 or self.perceptual > 0.0


def _check_pair(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"{op} expects (B, C, H, W) tensors, got "
                         f"{tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape != b.shape:
        raise ShapeError(f"{op} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def bce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy averaged over batch and pixels."""
    _check_pair(pred, target, "bce_loss")
    p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor,
              smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """1 - soft Dice, per sample then batch-averaged.

    dice_j = (2 * |pred * target| + 2s) / (|pred| + |target| + 2s), which is
    exactly 1 when pred equals target, including the empty-empty case.
    """
    _check_pair(pred, target, "dice_loss")
    p = pred.reshape(pred.shape[0], -1)
    y = target.reshape(target.shape[0], -1)
    inter = (p * y).sum(dim=1)
    sums = p.sum(dim=1) + y.sum(dim=1)
    dice = (2.0 * inter + 2.0 * smooth) / (sums + 2.0 * smooth)
    return 1.0 - dice.mean()


def mse_loss(recon: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    _check_pair(recon, clean, "mse_loss")
    return F.mse_loss(recon, clean)


def _gaussian_window(size: int, sigma: float, dtype: torch.dtype,
                     device: torch.device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_loss(recon: torch.Tensor, clean: torch.Tensor,
              window_size: int = SSIM_WINDOW,
              sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """1 - SSIM with Gaussian-windowed local statistics.

    Windows slide without padding; inputs smaller than the window shrink it
    to fit. The SSIM map is averaged over windows, channels, and batch.
    """
    _check_pair(recon, clean, "ssim_loss")
    b, c, h, w = recon.shape
    size = min(window_size, h, w)
    win = _gaussian_window(size, sigma, recon.dtype, recon.device)
    win = win.expand(c, 1, size, size)

    mu_x = F.conv2d(recon, win, groups=c)
    mu_y = F.conv2d(clean, win, groups=c)
    var_x = F.conv2d(recon * recon, win, groups=c) - mu_x * mu_x
    var_y = F.conv2d(clean * clean, win, groups=c) - mu_y * mu_y
    cov = F.conv2d(recon * clean, win, groups=c) - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
    return 1.0 - (num / den).mean()


class PerceptualExtractor(nn.Module):
    """Fixed feature map for the perceptual distance.

    The default is a three-layer strided conv pyramid with frozen random
    weights drawn from a fixed seed; its sha256 weight hash identifies the
    exact feature space. Any pretrained feature module can be wrapped as a
    drop-in replacement via ``wrap``.
    """

    def __init__(self, descriptor: str, *, weights=None, module=None):
        super().__init__()
        if (weights is None) == (module is None):
            raise ConfigError("pass exactly one of weights or module")
        self.descriptor = descriptor
        self._wrapped = module
        self._n_layers = 0
        if isinstance(module, nn.Module):
            for p in module.parameters():
                p.requires_grad_(False)
        if weights is not None:
            self._n_layers = len(weights)
            for i, w in enumerate(weights):
                self.register_buffer(f"weight{i}",
                                     torch.tensor(w, dtype=torch.float64))

    @classmethod
    def frozen_random(cls, in_channels: int = 3,
                      widths: tuple[int, ...] = PERCEPTUAL_WIDTHS,
                      seed: int = PERCEPTUAL_SEED) -> "PerceptualExtractor":
        rng = RngState(seed).child("perceptual")
        weights = []
        prev = in_channels
        for i, width in enumerate(widths):
            gen = rng.child("layer", i).generator()
            fan_in = prev * 9
            weights.append(gen.standard_normal((width, prev, 3, 3))
                           / np.sqrt(fan_in))
            prev = width
        return cls("frozen-random", weights=weights)

    @classmethod
    def wrap(cls, module, descriptor: str = "wrapped") -> "PerceptualExtractor":
        return cls(descriptor, module=module)

    @property
    def weight_hash(self) -> str:
        """sha256 over the canonical float64 bytes of all conv weights."""
        if self._wrapped is not None:
            raise ConfigError("wrapped extractors have no canonical weight hash")
        digest = hashlib.sha256()
        for i in range(self._n_layers):
            w = getattr(self, f"weight{i}").cpu().numpy().astype(np.float64)
            digest.update(str(w.shape).encode())
            digest.update(np.ascontiguousarray(w).tobytes())
        return digest.hexdigest()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self._wrapped is not None:
            return self._wrapped(x)
        h = x
        for i in range(self._n_layers):
            w = getattr(self, f"weight{i}").to(dtype=h.dtype, device=h.device)
            h = F.silu(F.conv2d(h, w, stride=2, padding=1))
        return h


def perceptual_loss(recon: torch.Tensor, clean: torch.Tensor,
                    extractor: PerceptualExtractor,
                    distance: str = "squared") -> torch.Tensor:
    """Distance between feature maps of the two images, batch-averaged and
    normalized by feature size. ``distance`` picks squared L2 (default) or
    mean absolute error."""
    _check_pair(recon, clean, "perceptual_loss")
    diff = extractor(recon) - extractor(clean)
    if distance == "squared":
        return (diff * diff).mean()
    if distance == "absolute":
        return diff.abs().mean()
    raise ConfigError(f"distance must be 'squared' or 'absolute', got {distance!r}")


@dataclass(frozen=True, eq=False)
class SegLossParts:
    bce: torch.Tensor
    dice: torch.Tensor
    total: torch.Tensor


@dataclass(frozen=True, eq=False)
class RecLossParts:
    mse: torch.Tensor
    ssim: torch.Tensor
    perceptual: torch.Tensor
    total: torch.Tensor


def seg_loss(pred: torch.Tensor, target: torch.Tensor,
             weights: LossWeights = LossWeights()) -> SegLossParts:
    bce = bce_loss(pred, target)
    dice = dice_loss(pred, target)
    total = weights.bce * bce + weights.dice * dice
    return SegLossParts(bce, dice, total)


def rec_loss(recon: torch.Tensor, clean: torch.Tensor,
             extractor: PerceptualExtractor,
             weights: LossWeights = LossWeights(),
             distance: str = "squared") -> RecLossParts:
    mse = mse_loss(recon, clean)
    ssim = ssim_loss(recon, clean)
    perc = perceptual_loss(recon, clean, extractor, distance=distance)
    total = weights.mse * mse + weights.ssim * ssim + weights.perceptual * perc
    return RecLossParts(mse, ssim, perc, total)


def total_loss(seg_total: torch.Tensor | float,
               rec_total: torch.Tensor | float) -> torch.Tensor:
    """The training objective is the plain sum of the two stream totals."""
    out = seg_total + rec_total
    if not isinstance(out, torch.Tensor):
        out = torch.tensor(out)
    return out
