"""Exception hierarchy shared by every dasolab module."""


class DasoError(Exception):
    """Base class for all library errors."""


class ConfigError(DasoError, ValueError):
    """Invalid configuration. ``key`` carries the dotted path when known."""

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ShapeError(DasoError, ValueError):
    pass


class ContractError(DasoError, ValueError):
    """A caller broke a documented precondition (e.g. unnormalized target)."""


class InputError(DasoError, ValueError):
    pass


class InfeasibleSpecError(ConfigError):
    """Dataset spec whose class counts round to zero."""


class NumericError(DasoError, ArithmeticError):
    def __init__(self, message, term=None, step=None):
        super().__init__(message)
        self.message = message
        self.term = term
        self.step = step

    def __str__(self):
        where = [f"{k}={v}" for k, v in (("term", self.term), ("step", self.step)) if v is not None]
        return f"{self.message} ({', '.join(where)})" if where else self.message


class WarmupIncomplete(DasoError):
    """Some class queue is still empty, so prototypes are not available."""


class DegenerateFeatureError(DasoError, ValueError):
    """Cosine similarity requested for a zero-norm vector."""
