"""Custom exceptions for the JAKET desk trainer."""


class JaketError(Exception):
    """Base error for the trainer and its tools."""


class ConfigError(JaketError, ValueError):
    """Configuration file or value is invalid."""


class DataFormatError(JaketError, ValueError):
    """A data file line could not be parsed."""

    def __init__(self, message: str, path: str = None, line_number: int = None):
        self.path = path
        self.line_number = line_number
        location = ""
        if path is not None:
            location = f"{path}:{line_number}: " if line_number is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class GraphValidationError(JaketError, ValueError):
    """Graph ids, triplets or sampling arguments are inconsistent."""


class ShapeError(JaketError, ValueError):
    """Tensor or module shapes do not agree."""


class GradientError(JaketError, RuntimeError):
    """Backward pass was requested in an invalid state."""


class NonFiniteLossError(JaketError, FloatingPointError):
    """A training loss became NaN or infinite."""

    def __init__(self, step: int, components: dict):
        self.step = step
        self.components = dict(components)
        detail = ", ".join(f"{k}={v!r}" for k, v in sorted(self.components.items()))
        super().__init__(f"Non-finite loss at step {step}: {detail}")


class CheckpointError(JaketError):
    """Checkpoint cannot be written, read or applied."""


class InsufficientDataError(JaketError, ValueError):
    """Not enough instances to build the requested split or episodes."""


class SignalCheckError(JaketError):
    """Generated world does not carry the planted category signal."""


class LabelAccessError(JaketError):
    """A held-out label was read before evaluation."""
