"""Core data types: image and mask buffers, dataset manifests, RNG streams.

All pixel data lives in float64 numpy arrays scaled to [0, 1]. Buffers are
frozen dataclasses holding read-only arrays, so they can be shared freely
between the synthesis, training, and evaluation stages without defensive
copies.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, LoadError, ManifestError, ShapeError

SPLITS = ("train", "val", "test")
SEED_ENV_VAR = "DUOSTREAM_SEED"

_MASK_THRESHOLD = 0.5


def _owned_readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True, order="C")
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """One image, shape (H, W, C) with C in {1, 3}, values in [0, 1].

    ``noised`` marks diffusion outputs, which may leave the unit range;
    range validation is skipped for them but finiteness is still required.
    """

    data: np.ndarray
    noised: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeError(f"image must have shape (H, W, C), got {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise ShapeError(f"image must have 1 or 3 channels, got {arr.shape[2]}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"image must be at least 1x1, got {arr.shape}")
        arr = _owned_readonly(arr)
        if not np.isfinite(arr).all():
            raise ConfigError("image contains non-finite values")
        if not self.noised and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ConfigError(
                f"image values must lie in [0, 1], got range "
                f"[{arr.min():.6g}, {arr.max():.6g}]"
            )
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class MaskBuffer:
    """One segmentation mask, shape (H, W), values in [0, 1].

    Ground-truth masks are binary ({0, 1} exactly); predicted masks may hold
    probabilities anywhere in the unit interval.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ShapeError(f"mask must have shape (H, W), got {arr.shape}")
        arr = _owned_readonly(arr)
        if not np.isfinite(arr).all():
            raise ConfigError("mask contains non-finite values")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ConfigError(
                f"mask values must lie in [0, 1], got range "
                f"[{arr.min():.6g}, {arr.max():.6g}]"
            )
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def is_binary(self) -> bool:
        return bool(np.isin(self.data, (0.0, 1.0)).all())


def clip_to_unit(image: ImageBuffer) -> ImageBuffer:
    """Clamp a (possibly noised) image into [0, 1] for display or saving."""
    return ImageBuffer(np.clip(image.data, 0.0, 1.0), noised=False)


# ---------------------------------------------------------------------------
# image / mask file IO


def load_image(path) -> ImageBuffer:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode in ("P", "RGBA", "CMYK", "YCbCr"):
                im = im.convert("RGB")
            if im.mode not in ("L", "RGB"):
                raise LoadError(f"unsupported image mode {im.mode!r}: {path}")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except LoadError:
        raise
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot load image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return ImageBuffer(arr)


def save_image(image: ImageBuffer, path) -> Path:
    path = Path(path)
    arr = image.data
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ConfigError("cannot save an image with values outside [0, 1]; "
                          "clip_to_unit() it first")
    quant = np.rint(arr * 255.0).astype(np.uint8)
    if image.channels == 1:
        im = Image.fromarray(quant[:, :, 0], mode="L")
    else:
        im = Image.fromarray(quant, mode="RGB")
    path.parent.mkdir(parents=True, exist_ok=True)
    im.save(path, format="PNG")
    return path


def load_mask(path) -> MaskBuffer:
    """Load a single-channel mask and binarize it at half intensity."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "1", "I", "I;16"):
                raise LoadError(
                    f"mask must be single-channel, got mode {im.mode!r}: {path}")
            if im.mode == "1":
                arr = np.asarray(im, dtype=np.float64)
            else:
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except LoadError:
        raise
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot load mask {path}: {exc}") from exc
    return MaskBuffer((arr > _MASK_THRESHOLD).astype(np.float64))


def save_mask(mask: MaskBuffer, path) -> Path:
    path = Path(path)
    quant = np.where(mask.data > _MASK_THRESHOLD, 255, 0).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quant, mode="L").save(path, format="PNG")
    return path


# ---------------------------------------------------------------------------
# dataset manifests

_NO_MASK = "-"


@dataclass(frozen=True)
class ManifestRecord:
    """One dataset entry: an image, an optional mask, a domain tag, a split."""

    image_path: str
    mask_path: str | None
    domain_tag: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(
                f"split must be one of {SPLITS}, got {self.split!r}")
        for label, value in (("image path", self.image_path),
                             ("mask path", self.mask_path),
                             ("domain tag", self.domain_tag)):
            if value is None:
                continue
            if not value or any(c in value for c in "\t\n\r"):
                raise ConfigError(
                    f"{label} must be non-empty and free of tabs/newlines, "
                    f"got {value!r}")

    def to_line(self) -> str:
        mask = self.mask_path if self.mask_path is not None else _NO_MASK
        return (f"image={self.image_path}\tmask={mask}"
                f"\tdomain={self.domain_tag}\tsplit={self.split}")

    @classmethod
    def from_line(cls, line: str, lineno: int) -> "ManifestRecord":
        parts = line.split("\t")
        keys = ("image", "mask", "domain", "split")
        if len(parts) != 4 or any(not p.startswith(k + "=")
                                  for p, k in zip(parts, keys)):
            raise ManifestError(
                f"malformed manifest line {lineno}: expected "
                f"'image=...\\tmask=...\\tdomain=...\\tsplit=...', got {line!r}")
        values = [p.split("=", 1)[1] for p in parts]
        mask = None if values[1] == _NO_MASK else values[1]
        try:
            return cls(values[0], mask, values[2], values[3])
        except ConfigError as exc:
            raise ManifestError(f"invalid manifest line {lineno}: {exc}") from exc


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    """An ordered collection of records plus the directory paths resolve
    against. Equality compares records only, not the root."""

    records: tuple[ManifestRecord, ...]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "root", Path(self.root))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.records == other.records

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def with_masks(self) -> tuple[ManifestRecord, ...]:
        return tuple(r for r in self.records if r.mask_path is not None)

    def for_split(self, split: str) -> tuple[ManifestRecord, ...]:
        return tuple(r for r in self.records if r.split == split)

    def domains(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.domain_tag, None)
        return tuple(seen)


def write_manifest(records: Sequence[ManifestRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = "".join(r.to_line() + "\n" for r in records)
    path.write_text(body, encoding="utf-8")
    return path


def read_manifest(path, *, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        records.append(ManifestRecord.from_line(raw, lineno))
    manifest = DatasetManifest(tuple(records), root=path.parent)
    if check_files:
        missing = []
        for rec in manifest:
            for rel in (rec.image_path, rec.mask_path):
                if rel is not None and not manifest.resolve(rel).is_file():
                    missing.append(rel)
        if missing:
            raise ManifestError(
                f"manifest {path} references {len(missing)} missing file(s): "
                + ", ".join(missing[:10])
                + (", ..." if len(missing) > 10 else ""))
    return manifest


# ---------------------------------------------------------------------------
# seeded RNG streams


@dataclass(frozen=True)
class RngState:
    """A named, forkable random stream.

    The generator is a pure function of (seed, stream), so any consumer can
    re-derive its own randomness from scratch; nothing stateful needs to be
    checkpointed for runs to be reproducible or resumable.
    """

    seed: int
    stream: tuple[int, ...] = ()

    def __post_init__(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative int, got {self.seed!r}")
        stream = tuple(self.stream)
        for k in stream:
            if not isinstance(k, int) or not 0 <= k < 2**32:
                raise ConfigError(f"stream ids must be uint32, got {k!r}")
        object.__setattr__(self, "stream", stream)

    def child(self, *keys: int | str) -> "RngState":
        """Fork a sub-stream. String keys hash via crc32; ints pass through."""
        suffix = []
        for k in keys:
            if isinstance(k, str):
                suffix.append(zlib.crc32(k.encode("utf-8")))
            elif isinstance(k, int) and 0 <= k < 2**32:
                suffix.append(k)
            else:
                raise ConfigError(
                    f"stream key must be str or uint32 int, got {k!r}")
        return RngState(self.seed, self.stream + tuple(suffix))

    def generator(self) -> np.random.Generator:
        """A fresh generator; repeated calls restart the same sequence."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        return np.random.default_rng(ss)
