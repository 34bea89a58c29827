"""Exception types raised across the package."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class ShapeError(ValueError):
    """Tensor dimensions do not agree."""


class IngestionError(ValueError):
    """A knowledge-base or template file could not be parsed."""


class AdaptationError(ValueError):
    """A vanilla checkpoint does not fit the target model configuration."""


class TrainingError(RuntimeError):
    """Training hit an unrecoverable numeric condition."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or structurally incompatible."""
