"""Exception hierarchy shared by all testbed modules."""


class RasError(Exception):
    """Base class for testbed errors."""


class InvalidArgumentError(RasError, ValueError):
    """Inputs violate an operation's preconditions (shape, range, ...)."""


class NotSPDError(RasError, ValueError):
    """A matrix expected to be symmetric positive definite is not.

    ``subdomain`` is set when the failure occurred while factoring a local
    subdomain matrix.
    """

    def __init__(self, message, subdomain=None):
        super().__init__(message)
        self.subdomain = subdomain


class IterationLimitError(RasError):
    """An iterative method ran out of iterations; ``iterate`` is the last one."""

    def __init__(self, message, iterate=None, residual_norm=None):
        super().__init__(message)
        self.iterate = iterate
        self.residual_norm = residual_norm


class FormatError(RasError, ValueError):
    """Malformed input file. ``line`` is 1-based, or None if not line specific."""

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.line = line
        self.path = path


class BrokenRendezvousError(RasError):
    """A peer aborted or terminated while a lock-step exchange was pending."""


class DeadlockSuspectedError(RasError):
    """A lock-step exchange did not complete within its timeout."""


class TagMismatchError(RasError):
    """A lock-step exchange received a message tagged for another iteration."""


class NoConvergenceError(RasError):
    """The solver hit ``max_iter`` before termination was detected."""

    def __init__(self, message, solution=None, metrics=None):
        super().__init__(message)
        self.solution = solution
        self.metrics = metrics


class VerificationFailedError(RasError):
    """Termination was detected but the global residual check failed."""

    def __init__(self, message, residual_norm=None, solution=None, metrics=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.solution = solution
        self.metrics = metrics
