"""Exception hierarchy shared by every layer of the package.

Everything raised on purpose derives from GarmentGenError so callers (and
the CLI) can catch one base class and turn it into a diagnostic instead of
a traceback.
"""


class GarmentGenError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GarmentGenError):
    """Shape or extent mismatch between tensors / arrays."""


class NumericError(GarmentGenError):
    """A NaN or Inf showed up where only finite values are allowed."""


class ConfigError(GarmentGenError):
    """Invalid or inconsistent configuration values."""


class ContractError(GarmentGenError):
    """A component violated an interface contract (wrong output shape,
    mismatched reference-feature sites, weight mutation where none is
    allowed, ...)."""


class IntegrityError(GarmentGenError):
    """Parameter bookkeeping went wrong: a frozen weight received an
    update, or the trainable partition overlaps / misses parameters."""


class TrainingError(GarmentGenError):
    """Training aborted (non-finite gradient or loss, bad resume state)."""


class CheckpointFormatError(GarmentGenError):
    """Malformed checkpoint file.  Carries the byte offset of the first
    inconsistency when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MetricError(GarmentGenError):
    """Evaluation inputs unusable (empty mask, size mismatch, ...)."""


class EnrichmentError(GarmentGenError):
    """Prompt enrichment could not analyze its inputs."""
