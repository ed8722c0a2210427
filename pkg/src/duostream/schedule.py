"""Forward diffusion: noise schedules and the two noising routes.

Steps are indexed t = 1..T. A schedule stores beta_t, alpha_t = 1 - beta_t,
and the running product alpha_bar_t. Noising can walk the chain one step at
a time (``diffuse_step``) or jump straight from the clean image
(``diffuse_closed``); both describe the same marginal distribution
N(sqrt(alpha_bar_t) * x0, (1 - alpha_bar_t) * I).

All schedule arithmetic is float64.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ImageBuffer, RngState
from .errors import ConfigError, StepRangeError

DEFAULT_BETA_MIN = 0.0001
DEFAULT_BETA_MAX = 0.02


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step noise coefficients for a T-step forward process."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        alphas = np.asarray(self.alphas, dtype=np.float64)
        alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigError("schedule needs at least one step")
        if not (betas.shape == alphas.shape == alpha_bars.shape):
            raise ConfigError("schedule arrays must share one length")
        if (betas <= 0.0).any() or (betas >= 1.0).any():
            raise ConfigError("every beta_t must lie strictly in (0, 1)")
        if not np.array_equal(alphas, 1.0 - betas):
            raise ConfigError("alpha_t must equal 1 - beta_t exactly")
        if (alpha_bars <= 0.0).any() or (np.diff(alpha_bars) > 0.0).any():
            raise ConfigError("alpha_bar_t must stay positive and non-increasing")
        if alpha_bars[0] != alphas[0]:
            raise ConfigError("alpha_bar_1 must equal alpha_1")
        for arr in (betas, alphas, alpha_bars):
            arr.flags.writeable = False
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def steps(self) -> int:
        return int(self.betas.size)

    def _index(self, t: int) -> int:
        if not isinstance(t, (int, np.integer)) or not 1 <= t <= self.steps:
            raise StepRangeError(
                f"step t must be an int in 1..{self.steps}, got {t!r}")
        return int(t) - 1

    def beta(self, t: int) -> float:
        return float(self.betas[self._index(t)])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._index(t)])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self._index(t)])


def _schedule_from_betas(betas: np.ndarray) -> NoiseSchedule:
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas, alphas, alpha_bars)


def make_cosine_schedule(steps: int,
                         beta_min: float = DEFAULT_BETA_MIN,
                         beta_max: float = DEFAULT_BETA_MAX) -> NoiseSchedule:
    """beta_t = beta_max - (beta_max - beta_min) * (1 + cos(t * pi / T)) / 2.

    Rises from near beta_min at t = 1 to exactly beta_max at t = T.
    """
    _check_beta_range(steps, beta_min, beta_max)
    t = np.arange(1, steps + 1, dtype=np.float64)
    betas = beta_max - 0.5 * (beta_max - beta_min) * (1.0 + np.cos(t * np.pi / steps))
    return _schedule_from_betas(betas)


def make_linear_schedule(steps: int,
                         beta_min: float = DEFAULT_BETA_MIN,
                         beta_max: float = DEFAULT_BETA_MAX) -> NoiseSchedule:
    """Evenly spaced betas from beta_min (t = 1) to beta_max (t = T)."""
    _check_beta_range(steps, beta_min, beta_max)
    if steps == 1:
        betas = np.array([beta_min], dtype=np.float64)
    else:
        betas = np.linspace(beta_min, beta_max, steps, dtype=np.float64)
    return _schedule_from_betas(betas)


SCHEDULERS = {"cosine": make_cosine_schedule, "linear": make_linear_schedule}


def make_schedule(name: str, steps: int,
                  beta_min: float = DEFAULT_BETA_MIN,
                  beta_max: float = DEFAULT_BETA_MAX) -> NoiseSchedule:
    try:
        builder = SCHEDULERS[name]
    except KeyError:
        raise ConfigError(
            f"unknown scheduler {name!r}, expected one of {sorted(SCHEDULERS)}")
    return builder(steps, beta_min=beta_min, beta_max=beta_max)


def _check_beta_range(steps, beta_min, beta_max):
    if not isinstance(steps, (int, np.integer)) or steps < 1:
        raise ConfigError(f"steps must be a positive int, got {steps!r}")
    if not 0.0 < beta_min < 1.0 or not 0.0 < beta_max < 1.0:
        raise ConfigError("beta bounds must lie strictly in (0, 1)")
    if beta_min > beta_max:
        raise ConfigError(
            f"beta_min must not exceed beta_max, got {beta_min} > {beta_max}")


def diffuse_step(x_prev: ImageBuffer, t: int, schedule: NoiseSchedule,
                 rng: RngState) -> ImageBuffer:
    """One chain step: sqrt(alpha_t) * x_prev + sqrt(1 - alpha_t) * eps."""
    alpha = schedule.alpha(t)
    eps = rng.generator().standard_normal(x_prev.data.shape)
    out = np.sqrt(alpha) * x_prev.data + np.sqrt(1.0 - alpha) * eps
    return ImageBuffer(out, noised=True)


def diffuse_closed(x0: ImageBuffer, t: int, schedule: NoiseSchedule,
                   rng: RngState) -> ImageBuffer:
    """Jump to step t: sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps."""
    alpha_bar = schedule.alpha_bar(t)
    eps = rng.generator().standard_normal(x0.data.shape)
    out = np.sqrt(alpha_bar) * x0.data + np.sqrt(1.0 - alpha_bar) * eps
    return ImageBuffer(out, noised=True)


def moments_at(x0: ImageBuffer, t: int,
               schedule: NoiseSchedule) -> tuple[ImageBuffer, float]:
    """Exact marginal moments at step t: mean image and scalar variance."""
    alpha_bar = schedule.alpha_bar(t)
    mean = ImageBuffer(np.sqrt(alpha_bar) * x0.data, noised=True)
    return mean, float(1.0 - alpha_bar)


def write_schedule_csv(schedule: NoiseSchedule, path) -> Path:
    """Dump the full table as CSV with columns t,beta,alpha,alpha_bar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "beta", "alpha", "alpha_bar"])
        for i in range(schedule.steps):
            writer.writerow([i + 1,
                             repr(float(schedule.betas[i])),
                             repr(float(schedule.alphas[i])),
                             repr(float(schedule.alpha_bars[i]))])
    return path
