"""Exception hierarchy shared by every subsystem.

CLI exit codes are attached to the classes so that `mrmf` maps failures to
stable process statuses without a lookup table scattered around the code.
"""


class MRMFError(Exception):
    exit_code = 1


class ConfigError(MRMFError):
    exit_code = 3


class DataError(MRMFError):
    """Invalid dataset contents or an impossible resolution reduction."""

    exit_code = 4


class DivisibilityError(DataError):
    def __init__(self, axis, extent, factor):
        self.axis = axis
        self.extent = extent
        self.factor = factor
        super().__init__(
            f"spatial axis {axis}: extent {extent} is not divisible by factor {factor}"
        )


class ShapeError(MRMFError):
    """Shape propagation failed; ``layer`` is the index of the offending layer."""

    exit_code = 4

    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class CacheError(MRMFError):
    pass


class NonFiniteGradientError(MRMFError):
    exit_code = 5


class TrainingAborted(MRMFError):
    exit_code = 5

    def __init__(self, message, diagnostic=None, records=()):
        super().__init__(message)
        self.diagnostic = dict(diagnostic or {})
        self.records = list(records)


class ReplicaDivergenceError(TrainingAborted):
    pass


class FusionMismatchError(MRMFError):
    exit_code = 6

    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class FileIOError(MRMFError):
    """Missing or unreadable file."""

    exit_code = 7


class FormatError(MRMFError):
    exit_code = 8


class BadMagicError(FormatError):
    exit_code = 8


class TruncatedFileError(FormatError):
    exit_code = 9


class ExtentOverflowError(FormatError):
    exit_code = 10


class TrailingDataError(FormatError):
    exit_code = 11
