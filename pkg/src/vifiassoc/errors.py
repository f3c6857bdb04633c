"""Exception types shared across the pipeline.

The CLI maps ``ConfigError`` to exit code 2 and ``DataError`` to exit code 3.
"""


class ConfigError(ValueError):
    """Invalid configuration or argument values."""


class DataError(ValueError):
    """Input data that cannot be used as given."""


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GeometryError(DataError):
    """Band image geometry does not match what a model was trained for."""
