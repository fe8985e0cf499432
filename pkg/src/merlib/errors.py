"""Exception types shared across the package.

ValidationError subclasses cover everything that is the caller's fault
(bad shapes, bad configs, bad files) and map to CLI exit code 1.
Runtime failures (non-finite numbers, diverged training) map to exit 2.
"""


class ValidationError(ValueError):
    """Rejected input or configuration."""


class ShapeError(ValidationError):
    """Tensor arguments whose shapes violate an operation's contract."""


class ConfigError(ValidationError):
    """Structurally valid values that combine into an unusable setup."""


class ManifestError(ValidationError):
    """Malformed or inconsistent dataset manifest."""


class CheckpointError(ValidationError):
    """Base class for checkpoint load failures."""


class CheckpointCorrupt(CheckpointError):
    """File is not a checkpoint, or is truncated or internally inconsistent."""


class CheckpointVersionMismatch(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class CheckpointSpecMismatch(CheckpointError):
    """Checkpoint holds weights for a different network than requested."""


class NumericalError(RuntimeError):
    """Non-finite values appeared where finite ones are required."""


class TrainingError(NumericalError):
    """Training aborted: exploded loss or non-finite gradients."""
