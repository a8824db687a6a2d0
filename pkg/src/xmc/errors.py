"""Exception taxonomy shared across the package."""


class XmcError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(XmcError, ValueError):
    """Tensor or matrix shapes are incompatible for the requested operation."""


class ConfigError(XmcError, ValueError):
    """A configuration value is outside its legal range."""


class ContractError(XmcError, ValueError):
    """An operation precondition was violated by the caller."""


class ParseError(XmcError, ValueError):
    """A data file does not conform to its declared format."""


class TrainingStateError(XmcError, RuntimeError):
    """Optimizer or bundle state is inconsistent (e.g. a missing gradient)."""


class TrainingError(XmcError, RuntimeError):
    """Training aborted, typically on a non-finite loss."""


class NumericError(XmcError, FloatingPointError):
    """A tensor contained NaN/Inf while numeric checking was enabled."""


class UsageError(XmcError):
    """Command-line usage problem: missing files or bad arguments."""
