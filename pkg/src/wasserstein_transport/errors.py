"""Exception taxonomy shared by the library and the CLI."""


class WTransportError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(WTransportError, ValueError):
    """Invalid experiment configuration (CLI exit code 1)."""


class NumericalBreakdown(WTransportError, ArithmeticError):
    """A computation left the regime where its result means anything (exit code 2)."""


class DiffeomorphismError(NumericalBreakdown):
    """Jacobian underflow, sign change, or a non-monotone lift."""


class IllConditionedDensityError(NumericalBreakdown):
    """A density touched its floor where the computation divides by it."""


class CheckFailure(WTransportError):
    """A verification check did not pass (exit code 3)."""
