"""Synthetic training data.

Three sources feed the segmentation stream:

* donor compositing: connected components are cut out of annotated donor
  frames and pasted onto backgrounds with random position, scale, and
  rotation. The output mask is the exact union of the pasted object masks;
  resampled (blended) edge pixels count as object where the blend weight
  exceeds 0.5.
* procedural toy scenes: textured ellipses on a smooth background, with
  exact analytic masks. These drive the desk-scale tests and experiments.
* augmentation: flips, right-angle rotation, crop-resize, brightness,
  contrast, and blur, applied jointly to an image and its mask where the
  transform is geometric.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from scipy import ndimage

from .core import (DatasetManifest, ImageBuffer, ManifestRecord, MaskBuffer,
                   RngState, save_image, save_mask, write_manifest)
from .errors import ConfigError, ShapeError, SynthesisError

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
_BLEND_THRESHOLD = 0.5


@dataclass(frozen=True, eq=False)
class DonorPair:
    """An annotated donor frame plus the object patches cut out of it."""

    image: ImageBuffer
    mask: MaskBuffer
    objects: tuple[tuple[ImageBuffer, MaskBuffer], ...]


def extract_objects(image: ImageBuffer, mask: MaskBuffer) -> DonorPair:
    """Cut every 8-connected mask component out of a donor frame."""
    if (image.height, image.width) != (mask.height, mask.width):
        raise ShapeError(
            f"donor image {image.data.shape[:2]} and mask {mask.data.shape} "
            f"sizes differ")
    if not mask.is_binary:
        raise ConfigError("donor mask must be binary")
    labels, count = ndimage.label(mask.data > 0.5, structure=_EIGHT_CONNECTED)
    if count == 0:
        raise SynthesisError("donor mask contains no objects")
    objects = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        patch = image.data[sl]
        patch_mask = (labels[sl] == idx).astype(np.float64)
        objects.append((ImageBuffer(patch), MaskBuffer(patch_mask)))
    return DonorPair(image, mask, tuple(objects))


@dataclass(frozen=True)
class SynthSpec:
    """What to composite: canvas, object count range, paste transforms."""

    canvas_size: int
    count: int = 1
    objects_min: int = 1
    objects_max: int = 4
    scale_range: tuple[float, float] = (0.7, 1.3)
    rotation_range: tuple[float, float] = (0.0, 360.0)
    background: str = "donor"

    def __post_init__(self):
        if self.canvas_size < 1:
            raise SynthesisError(f"canvas_size must be >= 1, got {self.canvas_size}")
        if self.count < 1:
            raise SynthesisError(f"count must be >= 1, got {self.count}")
        if not 0 <= self.objects_min <= self.objects_max:
            raise SynthesisError(
                f"need 0 <= objects_min <= objects_max, got "
                f"({self.objects_min}, {self.objects_max})")
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi:
            raise SynthesisError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        rlo, rhi = self.rotation_range
        if rlo > rhi:
            raise SynthesisError(f"rotation_range lo > hi: {self.rotation_range}")
        if self.background not in ("donor", "texture"):
            raise SynthesisError(
                f"background must be 'donor' or 'texture', got {self.background!r}")


@dataclass(frozen=True)
class PasteBox:
    top: int
    left: int
    height: int
    width: int


@dataclass(frozen=True, eq=False)
class SynthSample:
    image: ImageBuffer
    mask: MaskBuffer
    paste_boxes: tuple[PasteBox, ...]


def _resize(arr: np.ndarray, height: int, width: int, *, nearest: bool = False) -> np.ndarray:
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.resize(arr, (width, height), interpolation=interp)


def _transform_patch(patch: np.ndarray, alpha: np.ndarray, scale: float,
                     angle_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Scale then rotate (bilinear, expanding the footprint). A pure identity
    transform leaves the arrays untouched so hard-edged pastes stay exact."""
    if scale != 1.0:
        h = max(1, int(round(patch.shape[0] * scale)))
        w = max(1, int(round(patch.shape[1] * scale)))
        patch = _resize(patch, h, w)
        alpha = _resize(alpha, h, w)
    if angle_deg % 360.0 != 0.0:
        patch = ndimage.rotate(patch, angle_deg, axes=(0, 1), reshape=True,
                               order=1, mode="constant", cval=0.0)
        alpha = ndimage.rotate(alpha, angle_deg, axes=(0, 1), reshape=True,
                               order=1, mode="constant", cval=0.0)
    return np.clip(patch, 0.0, 1.0), np.clip(alpha, 0.0, 1.0)


def _fill_objects(image: ImageBuffer, mask: MaskBuffer) -> np.ndarray:
    """Donor frame with its objects painted over by the nearest background
    pixel, so reused backgrounds carry no unlabeled foreground."""
    hole = mask.data > 0.5
    if not hole.any():
        return image.data.copy()
    _, (iy, ix) = ndimage.distance_transform_edt(hole, return_indices=True)
    return image.data[iy, ix]


def _donor_background(donors: Sequence[DonorPair], size: int,
                      gen: np.random.Generator) -> np.ndarray:
    donor = donors[int(gen.integers(len(donors)))]
    bg = _fill_objects(donor.image, donor.mask)
    h, w = bg.shape[:2]
    if h < size or w < size:
        f = max(size / h, size / w)
        bg = _resize(bg, max(size, int(math.ceil(h * f))),
                     max(size, int(math.ceil(w * f))))
        h, w = bg.shape[:2]
    y0 = int(gen.integers(0, h - size + 1))
    x0 = int(gen.integers(0, w - size + 1))
    return np.clip(bg[y0:y0 + size, x0:x0 + size].copy(), 0.0, 1.0)


def composite_sample(donors: Sequence[DonorPair], spec: SynthSpec,
                     rng: RngState) -> SynthSample:
    """Paste k ~ U{objects_min..objects_max} donor objects onto a canvas."""
    if not donors:
        raise SynthesisError("composite_sample needs at least one donor")
    size = spec.canvas_size
    gen = rng.child("layout").generator()
    if spec.background == "texture":
        canvas = _texture_background(size, size, gen)
    else:
        canvas = _donor_background(donors, size, gen)
    mask = np.zeros((size, size), dtype=bool)
    boxes = []
    k = int(gen.integers(spec.objects_min, spec.objects_max + 1))
    for _ in range(k):
        donor = donors[int(gen.integers(len(donors)))]
        obj_img, obj_msk = donor.objects[int(gen.integers(len(donor.objects)))]
        scale = float(gen.uniform(spec.scale_range[0], spec.scale_range[1]))
        angle = float(gen.uniform(spec.rotation_range[0], spec.rotation_range[1]))
        patch, alpha = _transform_patch(obj_img.data, obj_msk.data, scale, angle)
        ph, pw = alpha.shape
        if ph > size or pw > size:
            raise SynthesisError(
                f"scaled patch {ph}x{pw} does not fit canvas {size}x{size}")
        y0 = int(gen.integers(0, size - ph + 1))
        x0 = int(gen.integers(0, size - pw + 1))
        region = canvas[y0:y0 + ph, x0:x0 + pw]
        a = alpha[:, :, None]
        canvas[y0:y0 + ph, x0:x0 + pw] = a * patch + (1.0 - a) * region
        mask[y0:y0 + ph, x0:x0 + pw] |= alpha > _BLEND_THRESHOLD
        boxes.append(PasteBox(y0, x0, ph, pw))
    return SynthSample(ImageBuffer(np.clip(canvas, 0.0, 1.0)),
                       MaskBuffer(mask.astype(np.float64)), tuple(boxes))


# ---------------------------------------------------------------------------
# procedural toy scenes


def _smooth_field(height: int, width: int, gen: np.random.Generator,
                  cells: int = 6) -> np.ndarray:
    coarse = gen.uniform(0.0, 1.0, size=(cells, cells))
    return np.clip(_resize(coarse, height, width), 0.0, 1.0)


def _texture_background(height: int, width: int,
                        gen: np.random.Generator) -> np.ndarray:
    base = 0.12 + 0.38 * _smooth_field(height, width, gen)
    tint = gen.uniform(0.75, 1.0, size=3)
    return np.clip(base[:, :, None] * tint[None, None, :], 0.0, 1.0)


def _object_texture(height: int, width: int,
                    gen: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    fy, fx = gen.uniform(0.15, 0.45, size=2)
    phase = gen.uniform(0.0, 2.0 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)
    base = gen.uniform(0.6, 0.8)
    amp = gen.uniform(0.1, 0.18)
    tint = gen.uniform(0.85, 1.0, size=3)
    gray = base + amp * (wave - 0.5)
    return np.clip(gray[:, :, None] * tint[None, None, :], 0.0, 1.0)


def ellipse_mask(height: int, width: int, center: tuple[float, float],
                 axes: tuple[float, float], angle: float = 0.0) -> np.ndarray:
    """Boolean raster of an ellipse: pixel centers inside or on the boundary.

    ``center`` is (row, col), ``axes`` the (a, b) semi-axes in pixels along
    the rotated x/y directions, ``angle`` in radians.
    """
    a, b = axes
    if a <= 0 or b <= 0:
        raise SynthesisError(f"ellipse semi-axes must be positive, got {axes}")
    cy, cx = center
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def procedural_toy_scene(canvas_size: int, n_objects: int,
                         rng: RngState) -> tuple[ImageBuffer, MaskBuffer]:
    """Textured ellipses on a smooth dim background, with exact masks."""
    if canvas_size < 8:
        raise SynthesisError(f"canvas_size must be >= 8, got {canvas_size}")
    if n_objects < 0:
        raise SynthesisError(f"n_objects must be >= 0, got {n_objects}")
    canvas = _texture_background(canvas_size, canvas_size,
                                 rng.child("background").generator())
    mask = np.zeros((canvas_size, canvas_size), dtype=bool)
    for i in range(n_objects):
        gen = rng.child("object", i).generator()
        lo, hi = canvas_size / 12.0, canvas_size / 6.0
        a = float(gen.uniform(max(2.0, lo), max(3.0, hi)))
        b = float(gen.uniform(max(2.0, lo), max(3.0, hi)))
        angle = float(gen.uniform(0.0, np.pi))
        margin = max(a, b)
        lo_c, hi_c = margin, canvas_size - 1 - margin
        if lo_c >= hi_c:
            cy = cx = (canvas_size - 1) / 2.0
        else:
            cy = float(gen.uniform(lo_c, hi_c))
            cx = float(gen.uniform(lo_c, hi_c))
        ell = ellipse_mask(canvas_size, canvas_size, (cy, cx), (a, b), angle)
        tex = _object_texture(canvas_size, canvas_size, gen)
        canvas = np.where(ell[:, :, None], tex, canvas)
        mask |= ell
    return ImageBuffer(canvas), MaskBuffer(mask.astype(np.float64))


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    """Per-transform application probabilities and parameter ranges.

    Geometric transforms apply jointly to image and mask; photometric ones
    touch the image only. The all-zero policy is a strict no-op.
    """

    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rot90: float = 0.5
    p_crop: float = 0.5
    crop_scale: tuple[float, float] = (0.7, 0.95)
    p_brightness: float = 0.5
    brightness_delta: float = 0.15
    p_contrast: float = 0.5
    contrast_range: tuple[float, float] = (0.7, 1.3)
    p_blur: float = 0.5
    blur_sigma: tuple[float, float] = (0.4, 1.2)

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_rot90", "p_crop",
                     "p_brightness", "p_contrast", "p_blur"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if not 0.0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0:
            raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi <= 1, "
                              f"got {self.crop_scale}")
        if self.brightness_delta < 0.0:
            raise ConfigError("brightness_delta must be >= 0")
        if not 0.0 < self.contrast_range[0] <= self.contrast_range[1]:
            raise ConfigError(f"contrast_range must satisfy 0 < lo <= hi, "
                              f"got {self.contrast_range}")
        if not 0.0 < self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ConfigError(f"blur_sigma must satisfy 0 < lo <= hi, "
                              f"got {self.blur_sigma}")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(p_hflip=0.0, p_vflip=0.0, p_rot90=0.0, p_crop=0.0,
                   p_brightness=0.0, p_contrast=0.0, p_blur=0.0)

    @property
    def is_identity(self) -> bool:
        return all(getattr(self, n) == 0.0 for n in
                   ("p_hflip", "p_vflip", "p_rot90", "p_crop",
                    "p_brightness", "p_contrast", "p_blur"))


def augment(image: ImageBuffer, mask: MaskBuffer | None, policy: AugmentPolicy,
            rng: RngState) -> tuple[ImageBuffer, MaskBuffer | None]:
    """Apply one random draw of the policy. Gate draws happen in a fixed
    order whether or not each transform fires, so streams stay aligned."""
    if policy.is_identity:
        return image, mask
    if mask is not None and (image.height, image.width) != (mask.height, mask.width):
        raise ShapeError("image and mask sizes differ")
    gen = rng.generator()
    img = image.data.copy()
    msk = None if mask is None else mask.data.copy()

    gates = gen.uniform(size=7)
    if gates[0] < policy.p_hflip:
        img = img[:, ::-1]
        msk = msk[:, ::-1] if msk is not None else None
    if gates[1] < policy.p_vflip:
        img = img[::-1]
        msk = msk[::-1] if msk is not None else None
    turns = int(gen.integers(1, 4))
    if gates[2] < policy.p_rot90:
        if img.shape[0] != img.shape[1]:
            turns = 2
        img = np.rot90(img, turns, axes=(0, 1))
        msk = np.rot90(msk, turns) if msk is not None else None
    crop_s = float(gen.uniform(policy.crop_scale[0], policy.crop_scale[1]))
    h, w = img.shape[:2]
    ch, cw = max(1, int(round(h * crop_s))), max(1, int(round(w * crop_s)))
    y0 = int(gen.integers(0, h - ch + 1))
    x0 = int(gen.integers(0, w - cw + 1))
    if gates[3] < policy.p_crop:
        img = _resize(np.ascontiguousarray(img[y0:y0 + ch, x0:x0 + cw]), h, w)
        if msk is not None:
            msk = _resize(np.ascontiguousarray(msk[y0:y0 + ch, x0:x0 + cw]),
                          h, w, nearest=True)

    delta = float(gen.uniform(-policy.brightness_delta, policy.brightness_delta))
    if gates[4] < policy.p_brightness:
        img = img + delta
    factor = float(gen.uniform(policy.contrast_range[0], policy.contrast_range[1]))
    if gates[5] < policy.p_contrast:
        m = img.mean()
        img = (img - m) * factor + m
    sigma = float(gen.uniform(policy.blur_sigma[0], policy.blur_sigma[1]))
    if gates[6] < policy.p_blur:
        img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0.0))

    img = np.clip(img, 0.0, 1.0)
    out_mask = None if msk is None else MaskBuffer(np.ascontiguousarray(msk))
    return ImageBuffer(np.ascontiguousarray(img)), out_mask


# ---------------------------------------------------------------------------
# dataset generation


def _write_dataset(build, count: int, out: Path, workers: int) -> DatasetManifest:
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(build, range(count)))
    else:
        records = [build(i) for i in range(count)]
    write_manifest(records, out / "manifest.txt")
    return DatasetManifest(tuple(records), root=out)


def generate_dataset(donors: Sequence[DonorPair], spec: SynthSpec, out_dir,
                     rng: RngState, *, domain_tags: Sequence[str] | str | None = None,
                     split: str = "train", workers: int = 1) -> DatasetManifest:
    """Composite ``spec.count`` samples and write the on-disk dataset tree:
    images/NNNNNN.png, masks/NNNNNN.png, and manifest.txt.

    Sample i draws everything from rng.child("sample", i) and uses donor
    i % len(donors), so output is reproducible for a given seed and donors
    rotate evenly through the dataset.
    """
    if not donors:
        raise SynthesisError("generate_dataset needs at least one donor")
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    if domain_tags is None:
        tags = [f"donor{j:02d}" for j in range(len(donors))]
    elif isinstance(domain_tags, str):
        tags = [domain_tags] * len(donors)
    else:
        tags = list(domain_tags)
        if len(tags) != len(donors):
            raise ConfigError(
                f"got {len(tags)} domain tags for {len(donors)} donors")
    out = Path(out_dir)

    def build(i: int) -> ManifestRecord:
        donor_idx = assign_donor(i, len(donors))
        sample = composite_sample((donors[donor_idx],), spec, rng.child("sample", i))
        name = f"{i:06d}.png"
        save_image(sample.image, out / "images" / name)
        save_mask(sample.mask, out / "masks" / name)
        return ManifestRecord(f"images/{name}", f"masks/{name}",
                              tags[donor_idx], split)

    return _write_dataset(build, spec.count, out, workers)


def generate_toy_dataset(out_dir, *, count: int, canvas_size: int,
                         objects_range: tuple[int, int] = (1, 3),
                         rng: RngState, domain_tag: str = "toy",
                         split: str = "train",
                         workers: int = 1) -> DatasetManifest:
    """Write a dataset of procedural toy scenes in the same tree layout as
    ``generate_dataset``."""
    if count < 1:
        raise SynthesisError(f"count must be >= 1, got {count}")
    lo, hi = objects_range
    if not 0 <= lo <= hi:
        raise SynthesisError(f"objects_range must satisfy 0 <= lo <= hi, "
                             f"got {objects_range}")
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    out = Path(out_dir)

    def build(i: int) -> ManifestRecord:
        sample_rng = rng.child("sample", i)
        n = int(sample_rng.child("count").generator().integers(lo, hi + 1))
        image, mask = procedural_toy_scene(canvas_size, n, sample_rng)
        name = f"{i:06d}.png"
        save_image(image, out / "images" / name)
        save_mask(mask, out / "masks" / name)
        return ManifestRecord(f"images/{name}", f"masks/{name}", domain_tag, split)

    return _write_dataset(build, count, out, workers)


def assign_donor(sample_index: int, n_donors: int) -> int:
    """Round-robin donor assignment; the tag split over a dataset follows
    directly (count samples over d donors puts count/d in each tag)."""
    return sample_index % n_donors
