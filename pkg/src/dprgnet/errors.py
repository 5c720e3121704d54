"""Exception hierarchy shared by every module."""


class DPRGNetError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(DPRGNetError, ValueError):
    """An input violates an operation's precondition."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible for the requested operation."""


class StateError(DPRGNetError, RuntimeError):
    """An object is used in a state that does not allow the call."""


class DeterminismError(DPRGNetError, RuntimeError):
    """A function expected to be deterministic returned different values."""


class ConfigurationError(DPRGNetError, ValueError):
    """Model or training configuration is inconsistent."""


class ParameterError(ContractError):
    """A numeric parameter is outside its admissible range."""


class NoEventsError(DPRGNetError, ValueError):
    """Gait event detection found no usable threshold crossings."""


class SegmentTooShortError(ContractError):
    """A stance segment has too few frames to resample."""


class SizeError(ContractError):
    """Data does not fit inside a fixed-size canvas."""


class DegenerateHistogramError(ContractError):
    """A histogram has a single occupied value, so no threshold exists."""


class UndefinedMetricError(DPRGNetError, ValueError):
    """A metric is undefined for the supplied data (e.g. zero target range)."""


class DivergenceError(DPRGNetError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class FormatError(DPRGNetError, ValueError):
    """Base class for container/checkpoint file problems."""


class IntegrityError(FormatError):
    """File is truncated or its checksum does not match."""


class UnsupportedVersionError(FormatError):
    """File was written with a format version this reader does not handle."""
