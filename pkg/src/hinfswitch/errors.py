"""Exception types raised by the solver, simulator and evaluators."""


class HinfError(Exception):
    """Base class for all package errors."""


class ScenarioError(HinfError):
    """Malformed scenario document or inconsistent dimensions."""


class ValidationError(HinfError):
    """A model failed its standing assumptions."""

    def __init__(self, report):
        self.report = report
        failed = [c for c in report.checks if not c.passed]
        lines = "; ".join(f"{c.name}: {c.detail}" for c in failed)
        super().__init__(f"model validation failed: {lines}")


class ConditionViolation(HinfError):
    """A definiteness condition of the Riccati system failed at a grid node.

    Attributes
    ----------
    node : int
        Grid node index.
    time : float
        Grid time of the node.
    regime : int
        Zero-based regime index.
    condition : str
        Name of the failing block (``"Rbar2"``, ``"Rhat11"``, ``"Rhat22"``,
        ``"schur1"`` or ``"schur2"``).
    margin : float
        Signed eigenvalue margin; negative or below the threshold means
        violated.
    """

    def __init__(self, node, time, regime, condition, margin):
        self.node = node
        self.time = time
        self.regime = regime
        self.condition = condition
        self.margin = margin
        super().__init__(
            f"{condition} definiteness lost at s={time:.6g} (node {node}), "
            f"regime {regime + 1}: margin {margin:.3e}"
        )


class NonFiniteValue(HinfError):
    """Integration produced inf or nan."""


class UnresolvedStep(NonFiniteValue):
    """A step stayed under-resolved after the maximum number of halvings."""


class SingularRhat(HinfError):
    """A linear solve against a block of R-hat failed."""


class UnsupportedDisturbance(HinfError):
    """The disturbance policy has no closed-form filtered component."""


class NoBracket(HinfError):
    """Bisection could not find a solvable upper end point."""
