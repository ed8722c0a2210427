"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration and usage problems exit
with 2, data loading problems with 3, and numeric failures during training
with 4.
"""


class DuostreamError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DuostreamError):
    """Invalid configuration value, option combination, or call contract."""


class ShapeError(ConfigError):
    """Array or tensor shapes that the operation cannot accept."""


class StepRangeError(ConfigError):
    """Diffusion step index outside 1..T."""


class SynthesisError(ConfigError):
    """Synthesis specification that cannot be satisfied (no objects,
    patch larger than canvas, and similar)."""


class LoadError(DuostreamError):
    """File could not be read, decoded, or fails validation on load."""


class ManifestError(LoadError):
    """Manifest file is malformed or references missing files."""


class NumericError(DuostreamError):
    """Non-finite values encountered where finite math is required."""
