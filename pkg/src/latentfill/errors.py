"""Exception types shared across the package."""


class LatentFillError(Exception):
    """Base class for all package errors."""


class InvalidInput(LatentFillError, ValueError):
    """An argument violates a documented precondition."""


class SpecValidationError(InvalidInput):
    """A guidance spec failed validation; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class CheckpointError(LatentFillError):
    """Base for checkpoint persistence failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint file uses an unsupported format version."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint file is truncated or structurally damaged."""


class SamplingError(LatentFillError):
    """Sampling aborted mid-run; carries per-step diagnostics."""

    def __init__(self, message: str, step: int | None = None, timestep: int | None = None):
        if step is not None:
            message = f"{message} (step={step}, t={timestep})"
        super().__init__(message)
        self.step = step
        self.timestep = timestep
