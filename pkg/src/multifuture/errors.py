"""Exception taxonomy shared across the package.

Error kinds map onto CLI exit codes: ConfigError -> 2,
TrainingDivergenceError -> 3, everything else -> 1.
"""


class MultifutureError(Exception):
    """Base class for all package errors."""


class ConfigError(MultifutureError):
    """Invalid or inconsistent configuration (bad keys, bad values)."""


class GridRangeError(MultifutureError, ValueError):
    """Point or cell index outside the grid."""


class ShapeError(MultifutureError, ValueError):
    """Array shape does not match the expected layout."""


class NumericError(MultifutureError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class GenerationError(MultifutureError):
    """Scenario generation failed after bounded retries."""


class ScenarioParseError(MultifutureError, ValueError):
    """Malformed scenario file; carries the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ScenarioVersionError(ScenarioParseError):
    """Scenario file schema version not supported."""


class CheckpointError(MultifutureError):
    """Base class for checkpoint container failures."""


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint format version newer than this reader supports."""


class CrcError(CheckpointError):
    """Checksum mismatch; the payload was corrupted."""


class CheckpointFormatError(CheckpointError):
    """Structurally invalid checkpoint (truncation, duplicate names, ...)."""


class ShapeMismatchError(CheckpointError):
    """Stored parameter shapes conflict with the target model."""


class TrainingDivergenceError(MultifutureError):
    """Loss became non-finite during training."""

    def __init__(self, epoch, last_finite_loss):
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"loss diverged at epoch {epoch}; last finite total loss was "
            f"{last_finite_loss!r}"
        )


class GradCheckError(MultifutureError):
    """Gradient check could not run (e.g. non-deterministic fragment)."""
