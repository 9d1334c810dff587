"""
Exception hierarchy shared by the library, the CLI and the dashboard
"""


class STTError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(STTError, ValueError):
    """Bad input: shape mismatch, out-of-range value, bad configuration."""


class FormatError(ValidationError):
    """A file on disk does not follow its declared format."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(f"{where}{message}")


class NonFiniteError(STTError):
    """NaN or Inf reached a tensor or a loss value."""

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class FrozenParameterError(STTError):
    """A gradient exists for a tensor that the freeze schedule marks frozen."""


class GraphError(STTError):
    """The computation graph cannot be differentiated (non-scalar root, cycle)."""
