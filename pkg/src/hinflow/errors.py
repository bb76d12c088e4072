"""Exception types shared across the package.

User/configuration mistakes raise :class:`ConfigError` (CLI exit code 2);
everything else maps to exit code 1.
"""


class HinflowError(Exception):
    """Base class for all package errors."""


class DimensionError(HinflowError):
    """Array shapes are incompatible with an operation."""


class TrainingError(HinflowError):
    """A training step or loop cannot proceed (bad data, non-finite grads)."""


class SimError(HinflowError):
    """Scene construction or rollout generation failed."""


class SamplingError(HinflowError):
    """Query-point sampling referenced a missing entity or produced no points."""


class RelabelError(HinflowError):
    """An episode cannot be turned into training transitions."""


class BufferError(HinflowError):
    """Replay buffer misuse (e.g. sampling more than stored)."""


class DataError(HinflowError):
    """A malformed record was encountered while assembling a batch."""


class DependencyError(HinflowError):
    """A required artifact (checkpoint, dataset) is missing."""


class ConfigError(HinflowError):
    """Invalid configuration or CLI usage; maps to exit code 2."""
