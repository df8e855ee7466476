"""Exception hierarchy shared by the library, the CLI and the report server."""


class SpikeFlowError(Exception):
    """Base class for every error raised by spikeflow."""

    exit_code = 1


class UsageError(SpikeFlowError):
    """Bad command-line usage."""

    exit_code = 2


class ConfigError(UsageError):
    """Malformed or unknown configuration key."""


class DataError(SpikeFlowError):
    """Input data is missing, malformed or inconsistent."""

    exit_code = 3


class EventFormatError(DataError):
    """EVT1 file could not be decoded.

    ``code`` is one of ``bad_magic``, ``truncated``, ``unsorted`` or
    ``out_of_bounds``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class FlowFormatError(DataError):
    """FLO1 file could not be decoded."""


class SnapshotError(DataError):
    """Tensor snapshot or checkpoint could not be decoded."""


class ShapeError(DataError):
    """Array shapes are incompatible."""


class SceneError(DataError):
    """Synthetic scene parameters are invalid or produce no events."""


class NumericError(SpikeFlowError):
    """Non-finite values appeared during a forward or backward pass."""

    exit_code = 4

    def __init__(self, message: str, diagnostics: dict = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
