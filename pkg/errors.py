"""
Exception hierarchy for the superpixel engine.

Every error carries the CLI exit code it maps to, so the entry point can turn
any failure into a one-line stderr record without a lookup table.
"""


class BiospixError(Exception):
    """Base class for all engine errors"""

    exit_code = 1

    def record(self) -> str:
        """Render the error as a machine-parseable key=value line"""
        message = str(self).replace('"', "'")
        return f'error={type(self).__name__} code={self.exit_code} message="{message}"'


class UsageError(BiospixError):
    """Invalid invocation: bad flags, unknown config keys, misuse of the tape"""

    exit_code = 1


class ParameterError(UsageError):
    """A numeric parameter is outside its valid range"""


class DataError(BiospixError):
    """Input data is missing, unreadable or inconsistent"""

    exit_code = 2


class UnreadableFileError(DataError):
    pass


class ExtentMismatchError(DataError):
    pass


class CategoryOverflowError(DataError):
    pass


class ManifestError(DataError):
    pass


class DimensionError(DataError):
    """Tensor extents do not agree (channel counts, elementwise shapes)"""


class GeometryError(DataError):
    """Spatial geometry cannot be realized (non-positive output, indivisible extents)"""


class NumericError(BiospixError):
    """Non-finite values in a loss or gradient"""

    exit_code = 3
