"""Exception types shared across the package."""


class RouteflowError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(RouteflowError, ValueError):
    """Invalid argument value or range."""


class ParseError(RouteflowError, ValueError):
    """Malformed instance file."""


class UnsupportedFormatError(ParseError):
    """Instance file uses a format feature outside the supported subset."""


class ConsistencyError(RouteflowError, ValueError):
    """Data structures that must agree do not (mismatched instance/graph, broken invariants)."""


class InfeasibilityError(RouteflowError, RuntimeError):
    """A decoder reached a state with no feasible action."""


class NumericError(RouteflowError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class CapacityError(RouteflowError, ValueError):
    """A size guard on an exhaustive computation was exceeded."""


class ShapeError(RouteflowError, ValueError):
    """Tensor shapes in a checkpoint do not match the receiving network."""


class UnsupportedModeError(RouteflowError, ValueError):
    """Operation invoked on a problem kind it does not support."""
