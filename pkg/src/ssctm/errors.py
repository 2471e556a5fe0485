"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class SSCTMError(Exception):
    """Base class for package errors."""


class ValidationError(SSCTMError, ValueError):
    """A configuration field violates a model invariant."""

    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


class ParseError(SSCTMError, ValueError):
    """A configuration file could not be parsed."""


class SingularChain(SSCTMError, ValueError):
    """The mode chain's balance system has an unexpected kernel."""


class NoRoot(SSCTMError, ValueError):
    """A one-dimensional density equation has no root in [0, n_jam]."""


class DivisionByZeroRatio(SSCTMError, ZeroDivisionError):
    """An interior cell has a zero mainline ratio."""


class Unsupported(SSCTMError):
    """The inner maximization exceeds the exact solver and no fallback is set."""


class TooLarge(SSCTMError):
    """The requested design exceeds the supported desk-scale size."""


class SubproblemInfeasible(SSCTMError):
    """A stage of the sequential partially coordinated design has no stable point."""

    def __init__(self, stage: int, best_drift: float, best=None):
        self.stage = stage
        self.best_drift = best_drift
        self.best = best
        super().__init__(
            f"partial-coordination stage for ramp {stage + 1} is infeasible "
            f"(best mean drift {best_drift:.6g})"
        )
