"""Exception types shared across the package."""


class DatError(Exception):
    """Base class for all package errors."""


class DomainError(DatError):
    """Input violates a documented precondition (shape, range, labels)."""


class ConfigError(DatError):
    """Bad or inconsistent configuration. CLI exit code 2."""


class PlanError(DatError):
    """A stage plan violates a structural invariant."""


class NormModeError(DatError):
    """A training step would run with the wrong normalization mode."""


class TrainingDivergence(DatError):
    """Loss became non-finite during training. CLI exit code 3."""


class UnsupportedOperation(DatError):
    """Requested operation is not differentiable or not available."""


class CheckpointError(DatError):
    """Checkpoint file is missing fields or has an unknown version."""
