"""Exception hierarchy shared by all modules."""


class UnmixError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(UnmixError, ValueError):
    pass


class InvalidStateError(UnmixError, RuntimeError):
    pass


class IllConditionedError(UnmixError, ValueError):
    pass


class ConvergenceError(UnmixError, RuntimeError):
    pass


class EmptyClassError(InvalidStateError):
    pass


class InfeasibleMomentsError(UnmixError, ValueError):
    pass


class GenerationError(UnmixError, RuntimeError):
    pass


class NumericError(UnmixError, FloatingPointError):
    """A non-finite value appeared inside the sampler."""


class ParseError(UnmixError, ValueError):
    pass
