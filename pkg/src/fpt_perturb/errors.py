from __future__ import annotations


class FptPerturbError(Exception):
    """Base error; ``exit_code`` is what the CLI returns for it."""

    exit_code = 4


class UsageError(FptPerturbError):
    exit_code = 2


class InvalidDataError(FptPerturbError, ValueError):
    exit_code = 3


class OutOfHorizonError(InvalidDataError):
    def __init__(self, P: int, horizon: int) -> None:
        super().__init__(f"P={P} is outside the horizon 1..{horizon}")
        self.P = P
        self.horizon = horizon


class IncompatiblePerturbationError(InvalidDataError):
    pass


class InvalidComparisonError(InvalidDataError):
    pass


class RuntimeIOError(FptPerturbError):
    exit_code = 4


class StatisticalPreconditionError(FptPerturbError):
    exit_code = 5


class EmptyConditionalError(StatisticalPreconditionError):
    pass


class CensoredBaselineError(StatisticalPreconditionError):
    def __init__(self, n_censored: int, what: str = "mean first-passage time") -> None:
        super().__init__(f"{what} is undefined: {n_censored} censored trajectories")
        self.n_censored = n_censored


class NonAbsorbingError(StatisticalPreconditionError):
    pass


class TruncationError(StatisticalPreconditionError):
    def __init__(self, message: str, bound: float) -> None:
        super().__init__(f"{message} (tail bound {bound:.3e})")
        self.bound = bound
