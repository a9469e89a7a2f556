"""Exception types shared across the package."""


class MdaggrError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MdaggrError):
    """A config value is missing, malformed, or out of range."""


class DataError(MdaggrError):
    """A dataset, manifest, or raster file violates its contract."""


class ContractViolation(MdaggrError):
    """An in-memory value breaks a documented precondition (e.g. a score
    outside [0, 1] before clamping)."""


class CompositionError(MdaggrError):
    """A composite loss was asked to combine an incomplete set of terms."""


class UndefinedLossError(MdaggrError):
    """The loss has no defined value (e.g. every pixel is ignored)."""


class InferenceError(MdaggrError):
    """Network input does not match the network's expected shape or kind."""


class CheckpointError(MdaggrError):
    """A checkpoint is unreadable or does not match the requested config."""


class StageOrderError(MdaggrError):
    """A training stage was invoked before its prerequisite stage."""


class TrainingDivergence(MdaggrError):
    """A loss or gradient became non-finite during training."""


class EvalError(MdaggrError):
    """Evaluation was asked for something it cannot compute."""


class OracleSizeError(MdaggrError):
    """A reference oracle was handed an input too large for loop-based code."""
