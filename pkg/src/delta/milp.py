"""
MILP models of the topology problem.

Two builders share one small in-memory model representation: the
variable-length-interval model, whose interval durations are decision
variables, and the fixed-time-step model kept for cross-checking on tiny
instances. Times are in ms and volumes in Gb; bandwidth B is in Gb/s, so
capacity rows use B/1000 Gb per ms.
"""

import enum
import logging
import math
import re

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from delta.dag import ReducedDag
from delta.des import LogicalTopology, SimTrace, derive_anchors
from delta.errors import (
    InfeasibleHorizonError,
    ModelError,
    SolverToleranceError,
    WidenAnchorError,
)
from delta.pruning import CircuitUpperBounds, IndexBounds

logger = logging.getLogger(__name__)

INTEGRALITY_TOL = 1e-6
X_NAME = re.compile(r"^x_(\d+)_(\d+)$")


###########
# CLASSES #
###########
class VarKind(str, enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"
    INTEGER = "integer"


class Sense(str, enum.Enum):
    LE = "<="
    GE = ">="
    EQ = "="


class SolveStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"
    TIMEOUT = "timeout"
    ERROR = "error"


@dataclass(frozen=True)
class Variable:
    name: str
    kind: VarKind = VarKind.CONTINUOUS
    lower: float = 0.0
    upper: Optional[float] = None


@dataclass(frozen=True)
class Constraint:
    name: str
    tag: str
    terms: tuple[tuple[str, float], ...]
    sense: Sense
    rhs: float

    def lhs(self, values: Mapping[str, float]) -> float:
        return sum(coef * values.get(var, 0.0) for var, coef in self.terms)

    def violation(self, values: Mapping[str, float]) -> float:
        lhs = self.lhs(values)
        if self.sense == Sense.LE:
            return max(lhs - self.rhs, 0.0)
        if self.sense == Sense.GE:
            return max(self.rhs - lhs, 0.0)
        return abs(lhs - self.rhs)


@dataclass
class MilpModel:
    """Variables, named constraints and a linear objective."""

    name: str = "delta"
    variables: dict[str, Variable] = field(default_factory=dict)
    constraints: dict[str, Constraint] = field(default_factory=dict)
    objective: dict[str, float] = field(default_factory=dict)
    minimize: bool = True
    metadata: dict = field(default_factory=dict)
    dag: Optional[ReducedDag] = None

    def add_var(
        self,
        name: str,
        kind: VarKind = VarKind.CONTINUOUS,
        lower: float = 0.0,
        upper: Optional[float] = None,
    ) -> str:
        if name in self.variables:
            raise ModelError(f"variable '{name}' declared twice")
        if kind == VarKind.BINARY:
            lower, upper = 0.0, 1.0
        if upper is not None and upper < lower:
            raise ModelError(f"variable '{name}' has empty bounds [{lower}, {upper}]")
        self.variables[name] = Variable(name, kind, float(lower), upper)
        return name

    def add_constraint(
        self,
        tag: str,
        indices: Sequence,
        terms: Mapping[str, float],
        sense: Sense,
        rhs: float = 0.0,
    ) -> str:
        name = "_".join([tag, *(str(index) for index in indices)])
        if name in self.constraints:
            raise ModelError(f"constraint '{name}' declared twice")
        unknown = [var for var in terms if var not in self.variables]
        if unknown:
            raise ModelError(f"constraint '{name}' uses undeclared {unknown[:3]}")
        kept = tuple((var, float(coef)) for var, coef in terms.items() if coef != 0)
        if not kept:
            raise ModelError(f"constraint '{name}' has no terms")
        self.constraints[name] = Constraint(name, tag, kept, Sense(sense), float(rhs))
        return name

    def set_objective(self, terms: Mapping[str, float], minimize: bool = True) -> None:
        unknown = [var for var in terms if var not in self.variables]
        if unknown:
            raise ModelError(f"objective uses undeclared {unknown[:3]}")
        self.objective = dict(terms)
        self.minimize = minimize

    def copy(self) -> "MilpModel":
        return MilpModel(
            name=self.name,
            variables=dict(self.variables),
            constraints=dict(self.constraints),
            objective=dict(self.objective),
            minimize=self.minimize,
            metadata=dict(self.metadata),
            dag=self.dag,
        )

    def var_count(self, kind: Optional[VarKind] = None) -> int:
        if kind is None:
            return len(self.variables)
        return sum(1 for var in self.variables.values() if var.kind == kind)

    def tag_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for constraint in self.constraints.values():
            counts[constraint.tag] = counts.get(constraint.tag, 0) + 1
        return dict(sorted(counts.items()))

    def x_names(self) -> list[str]:
        return [name for name in self.variables if X_NAME.match(name)]

    def stats(self) -> dict:
        return {
            "variables": self.var_count(),
            "binary": self.var_count(VarKind.BINARY),
            "integer": self.var_count(VarKind.INTEGER),
            "continuous": self.var_count(VarKind.CONTINUOUS),
            "constraints": len(self.constraints),
            "tags": self.tag_counts(),
        }

    def check_assignment(
        self, values: Mapping[str, float], tol: float = INTEGRALITY_TOL
    ) -> list[str]:
        """Names of every bound, integrality or constraint the assignment breaks.

        Missing variables count as zero. Tolerances scale with the magnitude
        of the right-hand side.
        """
        violations = []
        for var in self.variables.values():
            value = values.get(var.name, 0.0)
            if value < var.lower - tol * max(1.0, abs(var.lower)):
                violations.append(f"{var.name}:lower")
            upper = var.upper
            if upper is not None and value > upper + tol * max(1.0, abs(upper)):
                violations.append(f"{var.name}:upper")
            if var.kind != VarKind.CONTINUOUS and abs(value - round(value)) > tol:
                violations.append(f"{var.name}:integrality")
        for constraint in self.constraints.values():
            largest = max(
                (abs(coef * values.get(v, 0.0)) for v, coef in constraint.terms),
                default=0,
            )
            scale = max(1.0, abs(constraint.rhs), largest)
            if constraint.violation(values) > tol * scale:
                violations.append(constraint.name)
        return violations


@dataclass
class Solution:
    status: SolveStatus
    objective: Optional[float] = None
    values: dict[str, float] = field(default_factory=dict)
    solve_time_s: float = 0.0
    raw_output: str = ""
    non_optimal_baseline: bool = False

    @property
    def has_values(self) -> bool:
        return self.status in (SolveStatus.OPTIMAL, SolveStatus.FEASIBLE) and bool(
            self.values
        )

    def value(self, name: str) -> float:
        return self.values.get(name, 0.0)


####################
# PUBLIC FUNCTIONS #
####################
def build_var_interval_model(
    dag: ReducedDag,
    port_caps: Sequence[int],
    bandwidth: float,
    K: int,
    t_up: float,
    bounds: Optional[IndexBounds] = None,
    x_upper: Optional[CircuitUpperBounds] = None,
    fairness: bool = False,
    min_intervals: Optional[int] = None,
    force: bool = False,
) -> MilpModel:
    """Variable-length-interval model; ``fairness`` adds per-link equal sharing.

    Without fairness the model is the joint topology and rate model. Only
    the (task, interval) cells kept by ``bounds`` get variables; every other
    cell is fixed at zero by omission.
    """
    if K < 1:
        raise ModelError(f"K must be at least 1, got {K}")
    if min_intervals is not None and K < min_intervals:
        message = (
            f"K={K} is below the {min_intervals} intervals of the baseline simulation"
        )
        logger.warning(f"{message}; optimality is no longer guaranteed")
        if not force:
            raise ModelError(f"{message}; pass force to build it anyway")
    bounds = bounds or IndexBounds.unpruned(dag, K)
    if bounds.K != K:
        raise ModelError(f"index bounds were computed for K={bounds.K}, not {K}")

    big_m = float(t_up)
    rate = bandwidth / 1000.0
    model = MilpModel(name="delta_topo" if fairness else "delta_joint", dag=dag)
    caps = _add_topology(model, dag, port_caps, x_upper)

    bit_widths: dict[str, int] = {}
    pairs = dag.pairs()
    for (i, j) in pairs:
        width = max(1, int(caps[(i, j)]).bit_length())
        bit_widths[f"{i}_{j}"] = width
        terms = {f"x_{i}_{j}": 1.0}
        for b in range(width):
            terms[model.add_var(f"beta_{i}_{j}_{b}", VarKind.BINARY)] = -float(2**b)
        model.add_constraint("bin", (i, j), terms, Sense.EQ, 0.0)

    model.add_var("t_1", lower=0.0, upper=0.0)
    for k in range(2, K + 2):
        model.add_var(f"t_{k}", upper=big_m)
    for k in range(1, K + 1):
        model.add_var(f"D_{k}", upper=big_m)
        span = {f"D_{k}": 1.0, f"t_{k + 1}": -1.0, f"t_{k}": 1.0}
        model.add_constraint("interval", (k,), span, Sense.EQ)

    pair_intervals: dict[tuple[int, int], set[int]] = {pair: set() for pair in pairs}
    for task in dag.tasks:
        m = task.id
        model.add_var(f"S_{m}", upper=big_m)
        model.add_var(f"C_{m}", upper=big_m)
        if m not in bounds.k_min:
            model.add_constraint(
                "zero_dur", (m,), {f"C_{m}": 1.0, f"S_{m}": -1.0}, Sense.EQ
            )
            continue
        cells = list(bounds.retained(m))
        pair_intervals[task.pair].update(cells)
        for k in cells:
            model.add_var(f"w_{m}_{k}", upper=task.volume_Gb)
            model.add_var(f"y_{m}_{k}", VarKind.BINARY)
            model.add_var(f"s_{m}_{k}", VarKind.BINARY)
        flow = {f"w_{m}_{k}": 1.0 for k in cells}
        model.add_constraint("conserve", (m,), flow, Sense.EQ, task.volume_Gb)
        starts = {f"s_{m}_{k}": 1.0 for k in cells}
        model.add_constraint("once", (m,), starts, Sense.EQ, 1.0)
        for k in cells:
            gate = {f"w_{m}_{k}": 1.0, f"y_{m}_{k}": -task.volume_Gb}
            model.add_constraint("active", (m, k), gate, Sense.LE)
            rise = {f"s_{m}_{k}": 1.0, f"y_{m}_{k}": -1.0}
            if k - 1 in bounds.retained(m):
                rise[f"y_{m}_{k - 1}"] = 1.0
            model.add_constraint("rise", (m, k), rise, Sense.GE)
            model.add_constraint(
                "start",
                (m, k),
                {f"S_{m}": 1.0, f"t_{k}": -1.0, f"y_{m}_{k}": big_m},
                Sense.LE,
                big_m,
            )
            model.add_constraint(
                "finish",
                (m, k),
                {f"C_{m}": 1.0, f"t_{k + 1}": -1.0, f"y_{m}_{k}": -big_m},
                Sense.GE,
                -big_m,
            )

    for (i, j), members in pairs.items():
        for k in sorted(pair_intervals[(i, j)]):
            terms = {
                f"w_{m}_{k}": 1.0 for m in members if f"w_{m}_{k}" in model.variables
            }
            for b in range(bit_widths[f"{i}_{j}"]):
                rho = model.add_var(f"rho_{i}_{j}_{b}_{k}", upper=big_m)
                beta = f"beta_{i}_{j}_{b}"
                model.add_constraint(
                    "rho_ub_beta", (i, j, b, k), {rho: 1.0, beta: -big_m}, Sense.LE
                )
                model.add_constraint(
                    "rho_ub_delta", (i, j, b, k), {rho: 1.0, f"D_{k}": -1.0}, Sense.LE
                )
                model.add_constraint(
                    "rho_lb",
                    (i, j, b, k),
                    {rho: 1.0, f"D_{k}": -1.0, beta: -big_m},
                    Sense.GE,
                    -big_m,
                )
                terms[rho] = -rate * 2**b
            model.add_constraint("link_cap", (i, j, k), terms, Sense.LE)

    for tag, index in (("nic_tx", dag.src_index), ("nic_rx", dag.dst_index)):
        for gpu, members in sorted(index.items()):
            for k in range(1, K + 1):
                terms = {
                    f"w_{m}_{k}": 1.0 / dag.tasks[m].flows
                    for m in sorted(members)
                    if f"w_{m}_{k}" in model.variables
                }
                if terms:
                    terms[f"D_{k}"] = -rate
                    model.add_constraint(tag, (gpu, k), terms, Sense.LE)

    for dep in dag.deps:
        model.add_constraint(
            "dag",
            (dep.pre, dep.succ),
            {f"S_{dep.succ}": 1.0, f"C_{dep.pre}": -1.0},
            Sense.GE,
            dep.delta_ms,
        )

    if fairness:
        _add_fairness(model, dag, pairs, pair_intervals, "w", "y")

    model.add_var("C", upper=big_m)
    for task in dag.tasks:
        model.add_constraint(
            "makespan", (task.id,), {"C": 1.0, f"C_{task.id}": -1.0}, Sense.GE
        )
    model.set_objective({"C": 1.0})
    model.metadata.update(
        kind="var_interval",
        K=K,
        big_m=big_m,
        bandwidth=bandwidth,
        fairness=fairness,
        num_pods=dag.num_pods,
        port_caps=[int(cap) for cap in port_caps],
        bit_widths=bit_widths,
        retained_cells=bounds.retained_cells(),
    )
    logger.debug(f"built {model.name}: {model.stats()}")
    return model


def dependency_gap_slices(delta_ms: float, dt: float) -> int:
    """Whole slices a successor waits after its predecessor frees up."""
    return max(0, math.ceil(delta_ms / dt - 1e-9))


def build_fixed_step_model(
    dag: ReducedDag,
    port_caps: Sequence[int],
    bandwidth: float,
    dt: float,
    T: int,
    fairness: bool = False,
    x_upper: Optional[CircuitUpperBounds] = None,
) -> MilpModel:
    """Fixed-time-step model over slices 1..T of ``dt`` ms each.

    A task active over slices a..b has its start flag at a and its
    completion flag at b+1; successors start no earlier than b+1 plus the
    dependency gap in whole slices. The objective C counts slices.
    """
    if dt <= 0 or T < 1:
        raise ModelError(f"need dt > 0 and T >= 1, got dt={dt}, T={T}")
    _check_slice_horizon(dag, bandwidth, dt, T)

    model = MilpModel(name="delta_fixed_step", dag=dag)
    _add_topology(model, dag, port_caps, x_upper)
    pairs = dag.pairs()
    slices = range(1, T + 1)

    for task in dag.tasks:
        m = task.id
        if task.volume_Gb <= 0:
            model.add_var(f"p_{m}", VarKind.INTEGER, lower=1, upper=T + 1)
            continue
        peak = task.flows * bandwidth
        for t in slices:
            model.add_var(f"r_{m}_{t}", upper=peak)
            model.add_var(f"y_{m}_{t}", VarKind.BINARY)
            model.add_var(f"Sf_{m}_{t}", VarKind.BINARY)
            model.add_var(f"Cf_{m}_{t + 1}", VarKind.BINARY)
            model.add_constraint(
                "rate", (m, t), {f"r_{m}_{t}": 1.0, f"y_{m}_{t}": -peak}, Sense.LE
            )
        model.add_constraint(
            "start_once", (m,), {f"Sf_{m}_{t}": 1.0 for t in slices}, Sense.EQ, 1.0
        )
        model.add_constraint(
            "finish_once", (m,), {f"Cf_{m}_{t + 1}": 1.0 for t in slices}, Sense.EQ, 1.0
        )
        for t in range(1, T + 2):
            terms: dict[str, float] = {}
            if t <= T:
                terms[f"y_{m}_{t}"] = 1.0
                terms[f"Sf_{m}_{t}"] = -1.0
            if t > 1:
                terms[f"y_{m}_{t - 1}"] = -1.0
                terms[f"Cf_{m}_{t}"] = 1.0
            model.add_constraint("state", (m, t), terms, Sense.EQ)
        model.add_constraint(
            "conserve",
            (m,),
            {f"r_{m}_{t}": dt / 1000.0 for t in slices},
            Sense.GE,
            task.volume_Gb,
        )

    for (i, j), members in pairs.items():
        for t in slices:
            terms = {f"r_{m}_{t}": 1.0 for m in members}
            terms[f"x_{i}_{j}"] = -bandwidth
            model.add_constraint("link_cap", (i, j, t), terms, Sense.LE)

    for tag, index in (("nic_tx", dag.src_index), ("nic_rx", dag.dst_index)):
        for gpu, members in sorted(index.items()):
            for t in slices:
                terms = {
                    f"r_{m}_{t}": 1.0 / dag.tasks[m].flows for m in sorted(members)
                }
                model.add_constraint(tag, (gpu, t), terms, Sense.LE, bandwidth)

    for dep in dag.deps:
        terms = dict(_slice_index(dag, dep.succ, "Sf", T))
        for var, coef in _slice_index(dag, dep.pre, "Cf", T).items():
            terms[var] = terms.get(var, 0.0) - coef
        gap = dependency_gap_slices(dep.delta_ms, dt)
        model.add_constraint("dag", (dep.pre, dep.succ), terms, Sense.GE, gap)

    if fairness:
        slice_sets = {pair: set(slices) for pair in pairs}
        _add_fairness(model, dag, pairs, slice_sets, "r", "y", big_m=bandwidth)

    model.add_var("C", upper=float(T))
    for task in dag.tasks:
        terms = {"C": 1.0}
        for var, coef in _slice_index(dag, task.id, "Cf", T).items():
            terms[var] = -coef
        model.add_constraint("makespan", (task.id,), terms, Sense.GE, -1.0)
    model.set_objective({"C": 1.0})
    model.metadata.update(
        kind="fixed_step",
        T=T,
        dt=dt,
        bandwidth=bandwidth,
        fairness=fairness,
        num_pods=dag.num_pods,
        port_caps=[int(cap) for cap in port_caps],
    )
    return model


def hot_start_from_trace(
    trace: SimTrace, topo: LogicalTopology, model: MilpModel
) -> dict[str, float]:
    """Map a simulated schedule onto a complete assignment of a joint model."""
    if model.metadata.get("kind") != "var_interval" or model.dag is None:
        raise ModelError("hot start needs a variable-interval model built from a DAG")
    dag = model.dag
    K = model.metadata["K"]
    events = list(trace.events)
    if len(events) - 1 > K:
        raise ModelError(
            f"trace has {len(events) - 1} intervals but the model only has K={K}"
        )
    values: dict[str, float] = {name: 0.0 for name in model.variables}

    times = events + [events[-1]] * (K + 1 - len(events))
    for k in range(1, K + 2):
        values[f"t_{k}"] = float(times[k - 1])
    for k in range(1, K + 1):
        values[f"D_{k}"] = times[k] - times[k - 1]

    for name in model.x_names():
        i, j = (int(part) for part in X_NAME.match(name).groups())
        values[name] = float(topo.x[i, j])
    for pair, width in model.metadata["bit_widths"].items():
        i, j = (int(part) for part in pair.split("_"))
        count = int(topo.x[i, j])
        for b in range(width):
            bit = float((count >> b) & 1)
            values[f"beta_{i}_{j}_{b}"] = bit
            for k in range(1, K + 1):
                rho = f"rho_{i}_{j}_{b}_{k}"
                if rho in values:
                    values[rho] = bit * values[f"D_{k}"]

    anchors = derive_anchors(trace, dag)
    for task in dag.tasks:
        m = task.id
        values[f"S_{m}"] = float(trace.start[m])
        values[f"C_{m}"] = float(trace.completion[m])
        if m not in anchors.bounds:
            continue
        first, last = anchors.bounds[m]
        for k in range(first, last + 1):
            if f"y_{m}_{k}" not in model.variables:
                raise WidenAnchorError(
                    f"task {m} is active in interval {k}, which the index pruning"
                    " removed; widen the anchors"
                )
            values[f"y_{m}_{k}"] = 1.0
        values[f"s_{m}_{first}"] = 1.0
        for k, amount in trace.interval_volumes.get(m, {}).items():
            if f"w_{m}_{k}" not in model.variables:
                raise WidenAnchorError(f"task {m} sends in pruned interval {k}")
            values[f"w_{m}_{k}"] = amount

    if model.metadata.get("fairness"):
        for name in values:
            if name.startswith("u_"):
                i, j, k = (int(part) for part in name.split("_")[1:])
                shares = [
                    values[f"w_{m}_{k}"] / dag.tasks[m].flows
                    for m in dag.pairs().get((i, j), [])
                    if values.get(f"y_{m}_{k}", 0.0) > 0.5
                ]
                values[name] = shares[0] if shares else 0.0

    values["C"] = float(trace.makespan)
    return values


def extract_topology(sol: Solution, port_caps: Sequence[int]) -> LogicalTopology:
    """Round the solver's circuit counts into a validated topology."""
    size = len(port_caps)
    x = np.zeros((size, size), dtype=int)
    for name, value in sol.values.items():
        match = X_NAME.match(name)
        if not match:
            continue
        rounded = round(value)
        if abs(value - rounded) > INTEGRALITY_TOL:
            raise SolverToleranceError(f"{name}={value} is not integral")
        i, j = (int(part) for part in match.groups())
        x[i, j] = max(int(rounded), 0)
    return LogicalTopology(x, np.asarray(port_caps))


#####################
# PRIVATE FUNCTIONS #
#####################
def _add_topology(
    model: MilpModel,
    dag: ReducedDag,
    port_caps: Sequence[int],
    x_upper: Optional[CircuitUpperBounds],
) -> dict[tuple[int, int], int]:
    if len(port_caps) != dag.num_pods:
        raise ModelError(f"{len(port_caps)} port caps for {dag.num_pods} pods")
    caps: dict[tuple[int, int], int] = {}
    for i, j in dag.active_pairs():
        cap = int(min(port_caps[i], port_caps[j]))
        if x_upper is not None:
            cap = min(cap, x_upper.pair_bound(i, j))
        for a, b in ((i, j), (j, i)):
            model.add_var(f"x_{a}_{b}", VarKind.INTEGER, lower=0, upper=cap)
            caps[(a, b)] = cap
        model.add_constraint(
            "sym", (i, j), {f"x_{i}_{j}": 1.0, f"x_{j}_{i}": -1.0}, Sense.EQ
        )
    for pod in range(dag.num_pods):
        outgoing = {f"x_{a}_{b}": 1.0 for a, b in caps if a == pod}
        if outgoing:
            model.add_constraint("tx_limit", (pod,), outgoing, Sense.LE, port_caps[pod])
        incoming = {f"x_{a}_{b}": 1.0 for a, b in caps if b == pod}
        if incoming:
            model.add_constraint("rx_limit", (pod,), incoming, Sense.LE, port_caps[pod])
    return caps


def _add_fairness(
    model: MilpModel,
    dag: ReducedDag,
    pairs: dict[tuple[int, int], list[int]],
    periods: dict[tuple[int, int], set[int]],
    amount: str,
    active: str,
    big_m: Optional[float] = None,
) -> None:
    if big_m is None:
        big_m = max(
            (dag.tasks[m].volume_Gb / dag.tasks[m].flows for m in dag.positive_tasks()),
            default=0.0,
        )
    for (i, j), members in pairs.items():
        for k in sorted(periods[(i, j)]):
            sharing = [m for m in members if f"{amount}_{m}_{k}" in model.variables]
            if not sharing:
                continue
            share = model.add_var(f"u_{i}_{j}_{k}", upper=big_m)
            for m in sharing:
                per_flow = 1.0 / dag.tasks[m].flows
                flag = f"{active}_{m}_{k}"
                model.add_constraint(
                    "fair_ub",
                    (m, k),
                    {f"{amount}_{m}_{k}": per_flow, share: -1.0, flag: big_m},
                    Sense.LE,
                    big_m,
                )
                model.add_constraint(
                    "fair_lb",
                    (m, k),
                    {share: 1.0, f"{amount}_{m}_{k}": -per_flow, flag: big_m},
                    Sense.LE,
                    big_m,
                )


def _slice_index(dag: ReducedDag, task_id: int, flag: str, T: int) -> dict[str, float]:
    """Linear expression for a task's start (Sf) or free (Cf) slice index."""
    if dag.tasks[task_id].volume_Gb <= 0:
        return {f"p_{task_id}": 1.0}
    if flag == "Sf":
        return {f"Sf_{task_id}_{t}": float(t) for t in range(1, T + 1)}
    return {f"Cf_{task_id}_{t}": float(t) for t in range(2, T + 2)}


def _check_slice_horizon(dag: ReducedDag, bandwidth: float, dt: float, T: int) -> None:
    tau = dag.task_durations(bandwidth)
    free = np.ones(len(dag))
    for task_id in dag.topological_order():
        start = max(
            (
                free[pre] + dependency_gap_slices(delta, dt)
                for pre, delta in dag.predecessors(task_id)
            ),
            default=1.0,
        )
        busy = math.ceil(tau[task_id] / dt - 1e-9) if tau[task_id] > 0 else 0
        free[task_id] = start + busy
    needed = int(free.max(initial=1.0)) - 1
    if needed > T:
        raise InfeasibleHorizonError(
            f"the dependency chain needs {needed} slices of {dt} ms but T={T}"
        )
