"""Exception hierarchy. Each top-level class maps to a CLI exit code."""


class ProtoReconError(Exception):
    exit_code = 1


class ConfigError(ProtoReconError, ValueError):
    exit_code = 2


class DataError(ProtoReconError):
    exit_code = 3


class FormatError(DataError, ValueError):
    """Malformed file header; ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LengthError(DataError, ValueError):
    pass


class ShapeError(DataError, ValueError):
    pass


class InsufficientDataError(DataError):
    pass


class StageOrderError(ProtoReconError, RuntimeError):
    exit_code = 2


class DivergenceError(ProtoReconError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)
        self.step = step
