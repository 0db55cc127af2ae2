"""Exception hierarchy. Exit codes: config 2, data 3, training/eval 4."""

from __future__ import annotations


class GlyphsegError(Exception):
    exit_code = 1


class ConfigError(GlyphsegError):
    exit_code = 2


class DataError(GlyphsegError):
    exit_code = 3


class RunError(GlyphsegError):
    exit_code = 4


# -- annotation / corpus -----------------------------------------------------

class MalformedDocument(DataError):
    """Annotation or manifest bytes that do not parse into the expected schema."""


class MissingField(DataError):
    """A required annotation key (imagePath, imageWidth, imageHeight, shapes) is absent."""


class NoPolygons(DataError):
    """Document contains zero usable polygon shapes."""


class DegeneratePolygon(DataError):
    """Fewer than 3 vertices, or zero area after clamping to the grid."""


class EmptyInput(DataError):
    """Empty image/mask or non-positive resize target."""


class TooFewRecords(DataError):
    """Dataset too small to split (n < 3)."""


# -- prompts -----------------------------------------------------------------

class EmptyForeground(DataError):
    """Mask has no foreground pixels to sample prompts from."""


class InvalidScale(ConfigError):
    """Box scale outside (0, 2]."""


# -- model zoo ---------------------------------------------------------------

class WeightsNotFound(DataError):
    """Pretrained weight file missing at the given path and in the cache."""


class ChecksumMismatch(DataError):
    """Weight file digest does not match the expected value."""


class UnsupportedVariant(ConfigError):
    """Unknown promptable-segmenter variant, or its backend is unavailable."""


class UnsupportedKind(ConfigError):
    """Unknown baseline kind."""


class EmptyPromptSet(RunError):
    """Promptable model invoked without any point or box prompt."""


class ShapeMismatch(RunError):
    """Prediction and target shapes differ."""


# -- training / evaluation ---------------------------------------------------

class EmptySplit(DataError):
    """A required train/val/test split has no records."""


class NonFiniteLoss(RunError):
    """Training loss became NaN/inf; aborted with diagnostics."""


# -- synthetic corpus --------------------------------------------------------

class GenerationFailure(RunError):
    """Rejection sampling exceeded its retry budget."""
