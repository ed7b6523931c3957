"""Exception hierarchy shared by every module."""


class WMSError(Exception):
    """Base class for all errors raised by wmscore."""


class ValidationError(WMSError, ValueError):
    """Input does not satisfy a documented precondition."""


class DimensionError(ValidationError):
    """Feature count out of range or mismatched between operands."""


class MissingSubset(ValidationError):
    """A dense set function is missing a subset and no default was given."""


class DuplicateSubset(ValidationError):
    """The same subset was supplied twice."""


class NonFiniteValue(ValidationError):
    """NaN or infinity where a finite real is required."""


class TargetOutsideFamily(ValidationError):
    """A target subset is not scored by the requested method."""


class OracleError(WMSError):
    """The black-box backend failed to produce a value."""


class OracleTimeout(OracleError):
    pass


class ProtocolError(OracleError):
    """Backend replied with something other than a single finite real."""


class BudgetExhausted(WMSError):
    """The oracle evaluation budget does not cover the request."""
