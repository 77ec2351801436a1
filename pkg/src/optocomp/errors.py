"""Exception hierarchy shared by every module."""


class OptocompError(Exception):
    """Base class for all package errors."""


class ContractError(OptocompError, ValueError):
    """An operation was called with inputs that violate its contract (shapes, lengths)."""


class ConfigurationError(OptocompError, ValueError):
    """Invalid configuration value (dimensions, FFT size, unknown tags or keys)."""


class StabilityError(OptocompError, ValueError):
    """A state-space layer would be unstable with the given parameters."""


class ControlError(OptocompError, ValueError):
    """Control values do not match the device or fall outside its range."""


class ZeroEnergyError(OptocompError, ValueError):
    """A normalizing target signal has zero energy."""


class SignalTooShortError(OptocompError, ValueError):
    """Signal shorter than the analysis window a metric needs."""


class WeightFileError(OptocompError):
    """Base class for weight-file problems."""


class WeightVersionError(WeightFileError):
    pass


class MissingTensorError(WeightFileError):
    pass


class TensorShapeError(WeightFileError):
    pass


class DataError(OptocompError):
    """Unreadable or inconsistent audio / manifest data."""


class NumericalError(OptocompError, FloatingPointError):
    """Training diverged (NaN or inf loss)."""
