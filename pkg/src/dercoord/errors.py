"""Exception hierarchy shared by all modules.

Every error carries enough structure (attributes, not just a message) for the
CLI to map it onto an exit code and for tests to inspect what went wrong.
"""


class DercoordError(Exception):
    """Base class for all package errors."""

    exit_code = 5


class DimensionError(DercoordError, ValueError):
    """Array shapes disagree with the model they are combined with."""

    exit_code = 2


class InvalidNodeError(DercoordError, ValueError):
    def __init__(self, device, node, node_count):
        self.device = device
        self.node = node
        self.node_count = node_count
        super().__init__(
            f"device {device!r} references node {node}, valid nodes are 1..{node_count}"
        )

    exit_code = 2


class WindowError(DercoordError, ValueError):
    """A propagation horizon exceeds the data available in the window."""

    exit_code = 2


class InfeasibleError(DercoordError):
    """Base for infeasibility reports."""

    exit_code = 3


class InfeasibleBandError(InfeasibleError):
    """A device state band cannot be reached from the current state."""

    def __init__(self, device, step, band, reachable):
        self.device = device
        self.step = step
        self.band = tuple(band)
        self.reachable = tuple(reachable)
        super().__init__(
            f"device {device!r}: state band [{band[0]:.6g}, {band[1]:.6g}] at step {step} "
            f"is unreachable (reachable interval [{reachable[0]:.6g}, {reachable[1]:.6g}])"
        )


class SlaterError(InfeasibleError):
    """The relaxed problem has no strictly feasible point."""

    def __init__(self, min_slack, binding_rows):
        self.min_slack = float(min_slack)
        self.binding_rows = list(binding_rows)
        super().__init__(
            f"no strictly feasible point: best achievable slack {self.min_slack:.3e}, "
            f"binding constraint rows {self.binding_rows[:10]}"
        )


class InfeasibleTighteningError(InfeasibleError):
    def __init__(self, delta, lower, upper):
        self.delta = delta
        super().__init__(
            f"tightening by {delta:.4g} leaves an empty band (lower {lower:.4g} >= upper {upper:.4g})"
        )


class ConvergenceError(DercoordError):
    """An iterative solver hit its iteration cap."""

    exit_code = 4

    def __init__(self, what, iterations, residual):
        self.what = what
        self.iterations = iterations
        self.residual = float(residual)
        super().__init__(f"{what} did not converge in {iterations} iterations (residual {residual:.3e})")


class StepsizeError(DercoordError, ValueError):
    exit_code = 2

    def __init__(self, epsilon, limit):
        self.epsilon = epsilon
        self.limit = limit
        super().__init__(f"stepsize {epsilon:.4g} is not below the admissible limit {limit:.4g}")


class RandomizationError(DercoordError, ValueError):
    exit_code = 2


class ScenarioError(DercoordError):
    """Scenario files failed validation."""

    exit_code = 2

    def __init__(self, message, source=None, location=None):
        self.source = source
        self.location = location
        where = ""
        if source is not None:
            where = f"{source}"
            if location is not None:
                where += f":{location}"
            where += ": "
        super().__init__(where + message)


class SchemaError(ScenarioError):
    pass


class HorizonMismatchError(ScenarioError):
    pass


class ScenarioInfeasibleError(ScenarioError):
    exit_code = 3
