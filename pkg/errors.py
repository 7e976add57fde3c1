"""
Error hierarchy for the attribution toolkit

Every rejected input, malformed config or numeric failure raises one of these.
The CLI maps them onto process exit codes:
- ConfigError  -> 2 (malformed config, invalid parameters, spec mismatch)
- DataError    -> 3 (missing files, corrupt blobs, shape mismatches)
- NumericError -> 4 (non-finite values, divergent training, failed checks)
"""


class GamerError(Exception):
    """Base class for all toolkit errors"""

    code = "GAMER_ERROR"
    exit_status = 1

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.message = message
        self.context = context

    def one_line(self) -> str:
        """Machine-parsable single line for stderr"""
        text = self.message.replace("\n", " ")
        return f"error code={self.code} exit={self.exit_status} message={text}"


class ConfigError(GamerError, ValueError):
    """Raised when a configuration or parameter value is invalid"""

    code = "CONFIG_ERROR"
    exit_status = 2


class DataError(GamerError, ValueError):
    """Raised when input data is missing, corrupt or inconsistent"""

    code = "DATA_ERROR"
    exit_status = 3


class ShapeError(DataError):
    """Raised when tensor or volume extents do not line up"""

    code = "SHAPE_ERROR"


class NumericError(GamerError, ArithmeticError):
    """Raised when a computation produces non-finite values"""

    code = "NUMERIC_ERROR"
    exit_status = 4
