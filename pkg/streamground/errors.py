"""
Exception hierarchy for streamground.

Every error carries the process exit code the CLI reports for it.
"""


class StreamGroundError(Exception):
    """Base class for all streamground errors."""

    exit_code = 1


class ShapeError(StreamGroundError):
    """Tensor or feature dimensions do not line up."""


class StreamOrderError(StreamGroundError):
    """Frames or events arrived out of stream order."""

    exit_code = 2


class DomainError(StreamGroundError):
    """An argument is outside the domain an operation is defined on."""


class CapacityError(StreamGroundError):
    """Memory capacity cannot satisfy the per-scale minimum."""

    exit_code = 3


class VocabularyError(StreamGroundError):
    """A query token is not part of the vocabulary."""

    exit_code = 2


class OptimizerStateError(StreamGroundError):
    """Optimizer invoked on parameters without populated gradients."""


class EvaluationError(StreamGroundError):
    """A metric or a checked function produced an invalid value."""


class SpecError(StreamGroundError):
    """A synthetic stream specification is invalid or infeasible."""

    exit_code = 3


class GenerationError(StreamGroundError):
    """Synthetic queries could not be generated from the planted events."""


class ConfigError(StreamGroundError):
    """Run configuration is invalid."""

    exit_code = 3


class CheckpointError(StreamGroundError):
    """A checkpoint container does not match what the caller expects."""

    exit_code = 4


class MalformedInputError(StreamGroundError):
    """Input records could not be parsed."""

    exit_code = 2


class TrainingError(StreamGroundError):
    """Training hit a non-finite loss."""
