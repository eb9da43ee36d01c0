"""Exception taxonomy shared across the package.

Every failure mode that callers are expected to branch on gets its own class;
anything else raises ValueError close to the offending input.
"""

from __future__ import annotations


class FoliakitError(Exception):
    """Base class for package-specific failures."""


class MetricEvaluationError(FoliakitError):
    """A metric returned a non-finite value; carries the offending sample."""

    def __init__(self, message: str, sample_index: int | None = None):
        super().__init__(message)
        self.sample_index = sample_index


class DegenerateMetricError(FoliakitError):
    """A metric evaluated to zero (or below) on a nonzero tangent vector."""


class InvalidDimensionError(FoliakitError):
    """Ambient complex dimension outside the supported range."""


class InvalidLabyrinthError(FoliakitError):
    """Structural violation: overlapping pieces, pieces outside the shell, ..."""


class CapacityError(FoliakitError):
    """Builder could not reach the requested enlargement within the piece cap.

    ``achieved`` carries the certified bound that was reached before giving up.
    """

    def __init__(self, message: str, achieved: float, pieces: int):
        super().__init__(message)
        self.achieved = achieved
        self.pieces = pieces


class DegreeExhaustedError(FoliakitError):
    """Polynomial fit failed at the degree cap; carries the best attempt."""

    def __init__(self, message: str, deviation: float, floor: float, margin: float):
        super().__init__(message)
        self.deviation = deviation
        self.floor = floor
        self.margin = margin


class NonFiniteResultError(FoliakitError):
    """Automorphism evaluation overflowed to a non-finite value."""


class NoFreeSpaceError(FoliakitError):
    """Rejection sampling found no admissible target region at the budget."""


class InfeasibleAtBudgetError(FoliakitError):
    """Isotopy fitting hit the word/refinement budget; carries best residuals."""

    def __init__(self, message: str, best_word=None, residuals=None):
        super().__init__(message)
        self.best_word = best_word
        self.residuals = residuals


class ImproperFoliationError(FoliakitError):
    """The foliation failed (or could not pass) the properness check."""


class SingularStartError(FoliakitError):
    """Leaf tracing rejected: generator rank-deficient at the start point."""

    def __init__(self, message: str, margin: float | None = None):
        super().__init__(message)
        self.margin = margin


class TraceFailureError(FoliakitError):
    """Leaf tracing could not take even one step from an admissible start."""


class StageFailureError(FoliakitError):
    """A twisting stage failed; partial state has been serialized if possible."""

    def __init__(self, message: str, stage: int, state_path: str | None = None):
        super().__init__(message)
        self.stage = stage
        self.state_path = state_path
