"""Exceptions raised across the delta package.

The CLI maps each family onto an exit code: ConfigError -> 2,
SolverUnavailableError -> 3, InfeasibleError -> 4.
"""


class DeltaError(Exception):
    """Base class for every error delta raises on purpose."""


class ConfigError(DeltaError):
    """A workload, experiment or tool configuration is not valid."""


class DegenerateWorkloadError(ConfigError):
    """Placement leaves no inter-pod communication to optimize."""


class UnknownAlgorithmError(ConfigError):
    """Algorithm name is not one delta knows."""


class CycleError(DeltaError):
    """Dependency graph contains a cycle."""


class SolverUnavailableError(DeltaError):
    """No external MILP solver could be found or started."""


class InfeasibleError(DeltaError):
    """Problem instance admits no feasible answer."""


class UnroutableTaskError(InfeasibleError):
    """A task's pod pair has no circuit."""


class InfeasibleHorizonError(InfeasibleError):
    """Time horizon is shorter than the dependency chain requires."""


class OverTightAnchorError(InfeasibleError):
    """Index pruning emptied a task's interval range."""


class InitInfeasibleError(InfeasibleError):
    """Pod ports cannot host one circuit on every active pair."""


class UndefinedMetricError(DeltaError):
    """Metric is undefined for the given traces."""


class ModelError(DeltaError):
    """MILP model is malformed or was refused at build time."""


class WidenAnchorError(ModelError):
    """A hot-start trace uses an interval the pruning removed."""


class SolverError(DeltaError):
    """Solver ran but its answer could not be used."""


class SolutionParseError(SolverError):
    """Solution file could not be parsed."""

    def __init__(self, message: str, raw_output: str = ""):
        super().__init__(message)
        self.raw_output = raw_output


class SolverToleranceError(SolverError):
    """Integer variable came back outside rounding tolerance."""
