"""Exception hierarchy shared across the toolkit.

The CLI maps ConfigError (and bad usage) to exit code 1 and every other
ToolkitError to exit code 2.
"""


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ToolkitError):
    """Invalid configuration, geometry, or phantom specification."""


class ShapeError(ToolkitError):
    """Dimension mismatch between arrays that must be conformable."""


class NumericError(ToolkitError):
    """Numerical failure: non-finite values, indefinite Hessians,
    internal-consistency violations."""


class CalibrationError(ToolkitError):
    """Mixing-matrix calibration could not be performed."""


class FileFormatError(ToolkitError):
    """A data file is malformed or carries an unsupported version."""
