"""Exception hierarchy shared by every module."""

from __future__ import annotations


class DegasError(Exception):
    """Base class for all errors raised by the package."""


class ParseError(DegasError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{line}:{column}: {message}")
        self.message = message
        self.line = line
        self.column = column


class ValidationError(DegasError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


class DomainError(DegasError, ArithmeticError):
    """A scalar operation was applied outside its mathematical domain."""


class StaleTape(DegasError):
    """A tape handle was used after the tape was reset."""


class NonFiniteGradient(DegasError):
    pass


class SingularCovariance(DegasError, ArithmeticError):
    pass


class DegenerateVariance(DegasError, ArithmeticError):
    """Truncation or conditioning on a coordinate with zero variance."""


class NumericallyVanishing(DegasError, ArithmeticError):
    """Probability mass of a truncation underflowed the configured floor."""


class PathBudgetExceeded(DegasError):
    def __init__(self, count: int, budget: int):
        super().__init__(f"{count} paths exceed the budget of {budget}")
        self.count = count
        self.budget = budget


class NotOnPath(DegasError):
    pass


class AllPathsVanished(DegasError):
    def __init__(self, message: str, posterior=None):
        super().__init__(message)
        # partially evaluated result, useful for reporting (0, D)
        self.posterior = posterior


class NonFiniteLoss(DegasError):
    def __init__(self, message: str, step: int | None = None, row: int | None = None):
        super().__init__(message)
        self.step = step
        self.row = row


class MalformedLoss(DegasError):
    pass


class NoAcceptedSamples(DegasError):
    pass


class UnsupportedProgram(DegasError):
    """The program uses a construct the Monte Carlo oracle cannot weight."""


class MaxSubdivisions(DegasError):
    pass
