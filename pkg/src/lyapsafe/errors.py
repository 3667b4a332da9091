"""Exception types raised across the package."""


class LyapsafeError(Exception):
    """Base class for all package errors."""


class DimensionError(LyapsafeError, ValueError):
    pass


class ParameterError(LyapsafeError, ValueError):
    pass


class NumericError(LyapsafeError, FloatingPointError):
    pass


class UsageError(LyapsafeError, RuntimeError):
    pass


class DivergenceError(LyapsafeError, ArithmeticError):
    """A policy does not reach the terminal set, or a linear system is singular."""


class FeasibilityError(LyapsafeError, ValueError):
    pass


class SizeError(LyapsafeError, ValueError):
    pass


class GenerationError(LyapsafeError, ValueError):
    pass


class UnsupportedError(LyapsafeError, NotImplementedError):
    pass


class CausalityError(LyapsafeError, ValueError):
    pass


class DegenerateSpanError(LyapsafeError, ValueError):
    pass


class DegenerateStoppingTimeError(LyapsafeError, ZeroDivisionError):
    pass


class ConfigError(LyapsafeError, ValueError):
    """Invalid experiment configuration; ``problems`` lists every violated field."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
