"""Exception hierarchy shared by all fluoroseg modules."""


class FluoroSegError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(FluoroSegError, ValueError):
    pass


class DomainError(FluoroSegError, ValueError):
    pass


class StateError(FluoroSegError, RuntimeError):
    pass


class BehindSourceError(FluoroSegError, ValueError):
    """A point lies at or behind the X-ray source plane (z <= 0)."""


class PoseError(FluoroSegError, ValueError):
    pass


class ConfigError(FluoroSegError, ValueError):
    pass


class CodecError(FluoroSegError, ValueError):
    pass


class ValidationError(FluoroSegError, ValueError):
    pass


class ParseError(FluoroSegError, ValueError):
    pass


class ContractError(FluoroSegError, ValueError):
    pass


class RunError(FluoroSegError, RuntimeError):
    pass


class NonFiniteError(FluoroSegError, ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""
