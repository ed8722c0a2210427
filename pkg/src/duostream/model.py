"""Shared-encoder, two-decoder segmentation network.

One convolutional encoder feeds two structurally identical decoders: a
1-channel mask head and a 3-channel image-reconstruction head, both ending
in a sigmoid. Residual blocks are conv3x3 -> GroupNorm -> swish, twice, plus
an identity (or 1x1-projected) skip. The encoder downsamples with a strided
conv after every level; decoders upsample with nearest-neighbor followed by
a conv and concatenate the matching encoder feature before their blocks.
Widths double per level, capped at 8x the base width. There is no timestep
conditioning anywhere: the reconstruction head sees only the noised image.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ImageBuffer, MaskBuffer, RngState
from .errors import ConfigError, ShapeError

_WIDTH_CAP = 8
_FINAL_CONV_SCALE = 0.01


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    base_width: int = 32
    num_levels: int = 6
    blocks_per_level: int = 2
    norm_groups: int = 8
    image_size: int = 256

    def __post_init__(self):
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")
        for name in ("base_width", "num_levels", "blocks_per_level", "norm_groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.base_width % self.norm_groups != 0:
            raise ConfigError(
                f"base_width ({self.base_width}) must be divisible by "
                f"norm_groups ({self.norm_groups})")
        factor = self.downsample_factor
        if self.image_size < factor or self.image_size % factor != 0:
            raise ConfigError(
                f"image_size ({self.image_size}) must be a positive multiple "
                f"of 2**num_levels ({factor})")

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.num_levels

    def level_widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * min(2 ** i, _WIDTH_CAP)
                     for i in range(self.num_levels))


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """Encoder features per level (before each downsample, shallow to deep)
    plus the bottleneck features after the last downsample."""

    levels: tuple[torch.Tensor, ...]
    bottleneck: torch.Tensor


def swish(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


class ResidualBlock(nn.Module):
    """x_proj + F(x) with F = [conv3x3 -> GroupNorm -> swish] twice."""

    def __init__(self, in_channels: int, out_channels: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, out_channels)
        if in_channels != out_channels:
            self.proj = nn.Conv2d(in_channels, out_channels, 1)
        else:
            self.proj = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = swish(self.norm1(self.conv1(x)))
        h = swish(self.norm2(self.conv2(h)))
        skip = x if self.proj is None else self.proj(x)
        return skip + h


class BottleneckBlock(nn.Module):
    """A residual block body without the skip connection."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = swish(self.norm1(self.conv1(x)))
        return swish(self.norm2(self.conv2(h)))


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return swish(self.conv(x))


class Upsample(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.level_widths()
        self.stem = nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1)
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = widths[0]
        for w in widths:
            blocks = [ResidualBlock(prev, w, cfg.norm_groups)]
            blocks += [ResidualBlock(w, w, cfg.norm_groups)
                       for _ in range(cfg.blocks_per_level - 1)]
            self.levels.append(nn.Sequential(*blocks))
            self.downs.append(Downsample(w))
            prev = w
        self.bottleneck = nn.Sequential(
            BottleneckBlock(widths[-1], cfg.norm_groups),
            BottleneckBlock(widths[-1], cfg.norm_groups))

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"expected input of shape (B, {self.cfg.in_channels}, H, W), "
                f"got {tuple(x.shape)}")
        factor = self.cfg.downsample_factor
        if x.shape[2] % factor != 0 or x.shape[3] % factor != 0:
            raise ShapeError(
                f"input height and width must be divisible by {factor} "
                f"for {self.cfg.num_levels} levels, got {tuple(x.shape[2:])}")
        h = self.stem(x)
        features = []
        for blocks, down in zip(self.levels, self.downs):
            h = blocks(h)
            features.append(h)
            h = down(h)
        return FeaturePyramid(tuple(features), self.bottleneck(h))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, out_channels: int):
        super().__init__()
        self.cfg = cfg
        widths = cfg.level_widths()
        self.ups = nn.ModuleList()
        self.levels = nn.ModuleList()
        prev = widths[-1]
        for w in reversed(widths):
            self.ups.append(Upsample(prev, w))
            blocks = [ResidualBlock(2 * w, w, cfg.norm_groups)]
            blocks += [ResidualBlock(w, w, cfg.norm_groups)
                       for _ in range(cfg.blocks_per_level - 1)]
            self.levels.append(nn.Sequential(*blocks))
            prev = w
        self.final = nn.Conv2d(widths[0], out_channels, 3, padding=1)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        if len(pyramid.levels) != self.cfg.num_levels:
            raise ShapeError(
                f"pyramid has {len(pyramid.levels)} levels, decoder expects "
                f"{self.cfg.num_levels}")
        h = pyramid.bottleneck
        for up, blocks, skip in zip(self.ups, self.levels,
                                    reversed(pyramid.levels)):
            h = up(h)
            h = blocks(torch.cat([h, skip], dim=1))
        return torch.sigmoid(self.final(h))


class DualStreamNet(nn.Module):
    """The full network: encode once, decode a mask and/or a reconstruction."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.mask_decoder = Decoder(cfg, out_channels=1)
        self.image_decoder = Decoder(cfg, out_channels=3)

    def encode(self, x: torch.Tensor) -> FeaturePyramid:
        return self.encoder(x)

    def decode_mask(self, pyramid: FeaturePyramid) -> torch.Tensor:
        return self.mask_decoder(pyramid)

    def decode_image(self, pyramid: FeaturePyramid) -> torch.Tensor:
        return self.image_decoder(pyramid)

    def forward_mask(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode_mask(self.encode(x))

    def forward_image(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode_image(self.encode(x))

    def forward_both(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        pyramid = self.encode(x)
        return self.decode_mask(pyramid), self.decode_image(pyramid)

    forward = forward_both


def init_weights(model: nn.Module, rng: RngState) -> None:
    """Deterministic init: conv weights ~ N(0, 1/fan_in), zero biases, unit
    GroupNorm scales. Decoder output convs are shrunk so both heads start
    near 0.5 after the sigmoid, with small but nonzero gradients."""
    gen = rng.generator()
    for name, module in model.named_modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            std = 1.0 / np.sqrt(fan_in)
            draw = gen.standard_normal(tuple(module.weight.shape)) * std
            if name.endswith("final"):
                draw = draw * _FINAL_CONV_SCALE
            with torch.no_grad():
                module.weight.copy_(torch.from_numpy(draw))
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.GroupNorm):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()


def build_model(cfg: ModelConfig, rng: RngState) -> DualStreamNet:
    model = DualStreamNet(cfg)
    init_weights(model, rng)
    return model


def _conv_params(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k + cout


def _block_params(cin: int, cout: int) -> int:
    n = _conv_params(cin, cout, 3) + 2 * cout
    n += _conv_params(cout, cout, 3) + 2 * cout
    if cin != cout:
        n += _conv_params(cin, cout, 1)
    return n


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for the full dual-decoder network."""
    widths = cfg.level_widths()
    extra = cfg.blocks_per_level - 1
    total = _conv_params(cfg.in_channels, widths[0], 3)
    prev = widths[0]
    for w in widths:
        total += _block_params(prev, w) + extra * _block_params(w, w)
        total += _conv_params(w, w, 3)
        prev = w
    # bottleneck blocks carry no projection, only two conv+norm pairs each
    total += 2 * (_conv_params(widths[-1], widths[-1], 3) + 2 * widths[-1]) * 2
    for out_channels in (1, 3):
        prev = widths[-1]
        for w in reversed(widths):
            total += _conv_params(prev, w, 3)
            total += _block_params(2 * w, w) + extra * _block_params(w, w)
            prev = w
        total += _conv_params(widths[0], out_channels, 3)
    return total


# ---------------------------------------------------------------------------
# buffer <-> tensor bridging


def image_batch(images: Sequence[ImageBuffer],
                dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if not images:
        raise ShapeError("cannot batch zero images")
    shape = images[0].data.shape
    if any(im.data.shape != shape for im in images):
        raise ShapeError("all images in a batch must share one shape")
    stack = np.stack([im.data for im in images]).transpose(0, 3, 1, 2)
    return torch.tensor(stack, dtype=dtype)


def mask_batch(masks: Sequence[MaskBuffer],
               dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if not masks:
        raise ShapeError("cannot batch zero masks")
    shape = masks[0].data.shape
    if any(m.data.shape != shape for m in masks):
        raise ShapeError("all masks in a batch must share one shape")
    stack = np.stack([m.data for m in masks])[:, None, :, :]
    return torch.tensor(stack, dtype=dtype)


def tensor_to_masks(t: torch.Tensor) -> list[MaskBuffer]:
    if t.ndim != 4 or t.shape[1] != 1:
        raise ShapeError(f"expected (B, 1, H, W), got {tuple(t.shape)}")
    arr = t.detach().cpu().numpy().astype(np.float64)
    arr = np.clip(arr, 0.0, 1.0)
    return [MaskBuffer(arr[i, 0]) for i in range(arr.shape[0])]


def tensor_to_images(t: torch.Tensor, *, noised: bool = False) -> list[ImageBuffer]:
    if t.ndim != 4 or t.shape[1] not in (1, 3):
        raise ShapeError(f"expected (B, C, H, W) with C in (1, 3), got {tuple(t.shape)}")
    arr = t.detach().cpu().numpy().astype(np.float64).transpose(0, 2, 3, 1)
    if not noised:
        arr = np.clip(arr, 0.0, 1.0)
    return [ImageBuffer(arr[i], noised=noised) for i in range(arr.shape[0])]
