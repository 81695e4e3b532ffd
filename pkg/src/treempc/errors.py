"""Exception types shared across the package."""


class TreeMpcError(Exception):
    """Base class for all treempc errors."""


class ValidationError(TreeMpcError):
    """Inputs violate a documented precondition or schema."""


class NonConvergent(TreeMpcError):
    """An iterative solve failed to contract (e.g. unstable dynamics)."""


class QpInfeasible(TreeMpcError):
    """The constraint set of a QP is empty for the given state."""


class QpMaxIterations(TreeMpcError):
    """The active-set loop hit its iteration cap before optimality."""


class TooLarge(TreeMpcError):
    """A combinatorial enumeration would exceed its configured cap."""


class TooManyPoints(TreeMpcError):
    """A grid request would materialize more points than the cap allows."""


class AllInfeasible(TreeMpcError):
    """No sampled state produced a solvable QP."""


class NotCovered(TreeMpcError):
    """A query point lies outside every stored region."""


class NotSeparable(TreeMpcError):
    """No stored hyperplane strictly reduces a region set on both sides."""


class Diverged(TreeMpcError):
    """Training loss became non-finite."""


class ControllerFailure(TreeMpcError):
    """A controller raised or returned non-finite input during simulation."""


class TooShort(TreeMpcError):
    """A trajectory is too short for the requested metric window."""
