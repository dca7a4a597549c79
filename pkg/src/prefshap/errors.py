"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class PrefShapError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(PrefShapError, ValueError):
    """Malformed input: non-finite values, bad shapes, invalid settings."""


class DomainError(PrefShapError, ValueError):
    """A mathematical precondition on supports does not hold."""


class DegenerateSupportError(DomainError):
    """Every response of some prompt ended up with zero probability."""


class UnknownIdentifierError(PrefShapError, KeyError):
    """A prompt, response or source identifier is not part of the world."""


class RankDeficiencyError(PrefShapError, ValueError):
    """The regression design does not determine the Shapley values."""


class ConvergenceError(PrefShapError, RuntimeError):
    """An optimizer stopped before the gradient norm reached tolerance."""

    def __init__(self, message: str, grad_norm: float, iterations: int, step: int | None = None):
        self.grad_norm = grad_norm
        self.iterations = iterations
        self.step = step
        super().__init__(message)

    def at_step(self, step: int) -> "ConvergenceError":
        return ConvergenceError(
            f"step {step}: {self}", self.grad_norm, self.iterations, step=step
        )


class OracleError(PrefShapError, RuntimeError):
    """A utility oracle failed; carries the coalition that was being evaluated."""

    def __init__(self, coalition, cause: BaseException):
        self.coalition = coalition
        super().__init__(f"utility oracle failed on coalition {sorted(coalition)}: {cause!r}")
