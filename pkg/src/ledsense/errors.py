"""Exception hierarchy; CLI maps these to exit codes."""


class LedSenseError(Exception):
    """Base class for all package errors."""


class ValidationError(LedSenseError):
    """An argument violates a documented precondition."""


class GeometryError(ValidationError):
    """Invalid LED-array or microscope geometry."""


class DimensionError(ValidationError):
    """Array shapes incompatible with the requested operation."""


class UnsupportedSizeError(ValidationError):
    """Grid size outside the supported square power-of-two family."""


class NumericError(LedSenseError):
    """Non-finite values encountered during computation."""


class CorruptDatasetError(LedSenseError):
    """On-disk dataset inconsistent with its manifest."""


class ConfigError(LedSenseError):
    """Malformed or contradictory run configuration."""


class TrainingDivergedError(LedSenseError):
    """Loss became non-finite during optimization."""

    def __init__(self, message, *, epoch=None, step=None, diagnostics=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.diagnostics = diagnostics or {}
