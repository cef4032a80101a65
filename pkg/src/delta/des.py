"""
Discrete-event simulation of a reduced DAG over a logical topology.

Tasks start the moment their dependencies allow; between events every
active task gets its max-min fair share of the circuits on its pod pair
and of the NICs of its GPUs. Time is in ms, volume in Gb, rates in Gb/s.
"""

import heapq
import logging

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from delta.dag import ReducedDag
from delta.errors import (
    ConfigError,
    InfeasibleError,
    UndefinedMetricError,
    UnroutableTaskError,
)

logger = logging.getLogger(__name__)

# relative tolerance used for event coincidence and saturation tests
TIME_TOL = 1e-9

# (capacity, {task: coefficient}) for cap >= sum(coef * rate)
CapacityRow = tuple[float, Mapping[int, float]]


###########
# CLASSES #
###########
@dataclass
class LogicalTopology:
    """Symmetric circuit counts per pod pair plus per-pod port budgets."""

    x: np.ndarray
    port_caps: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=int)
        self.port_caps = np.asarray(self.port_caps, dtype=int)
        self.validate()

    @property
    def num_pods(self) -> int:
        return len(self.port_caps)

    @property
    def total_ports(self) -> int:
        return int(self.x.sum())

    @property
    def port_ratio(self) -> float:
        budget = int(self.port_caps.sum())
        return self.total_ports / budget if budget else 0.0

    def port_usage(self) -> np.ndarray:
        return self.x.sum(axis=1)

    def validate(self) -> None:
        size = len(self.port_caps)
        if self.x.shape != (size, size):
            raise ConfigError(f"x has shape {self.x.shape}, expected {(size, size)}")
        if (self.x < 0).any():
            raise InfeasibleError("negative circuit count")
        if not np.array_equal(self.x, self.x.T):
            raise InfeasibleError("circuit matrix is not symmetric")
        if np.diagonal(self.x).any():
            raise InfeasibleError("a pod cannot hold circuits to itself")
        over = np.nonzero(self.x.sum(axis=1) > self.port_caps)[0]
        if len(over):
            raise InfeasibleError(f"pods {over.tolist()} exceed their port budget")

    def to_dict(self) -> dict:
        return {"x": self.x.tolist(), "port_caps": self.port_caps.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "LogicalTopology":
        try:
            return cls(np.array(data["x"]), np.array(data["port_caps"]))
        except KeyError as err:
            raise ConfigError(f"Malformed topology document, missing {err}") from err

    @classmethod
    def from_pairs(
        cls, port_caps: Sequence[int], circuits: Mapping[tuple[int, int], int]
    ) -> "LogicalTopology":
        size = len(port_caps)
        x = np.zeros((size, size), dtype=int)
        for (i, j), count in circuits.items():
            x[i, j] = x[j, i] = count
        return cls(x, np.asarray(port_caps))

    def with_caps(self, port_caps: Sequence[int]) -> "LogicalTopology":
        return LogicalTopology(self.x.copy(), np.asarray(port_caps))


@dataclass
class SimTrace:
    start: np.ndarray
    completion: np.ndarray
    events: tuple[float, ...]
    interval_volumes: dict[int, dict[int, float]] = field(default_factory=dict)
    makespan: float = 0.0
    ideal: bool = False

    def event_index(self, time: float) -> int:
        """0-based position of an event timestamp."""
        index = int(np.searchsorted(self.events, time))
        if index < len(self.events) and self.events[index] == time:
            return index
        raise ValueError(f"{time} is not an event of this trace")

    def to_dict(self) -> dict:
        return {
            "tasks": [
                {"id": task_id, "S": float(s), "C": float(c)}
                for task_id, (s, c) in enumerate(zip(self.start, self.completion))
            ],
            "events": list(self.events),
            "makespan": self.makespan,
            "ideal": self.ideal,
            "interval_volumes": {
                str(m): {str(k): v for k, v in cells.items()}
                for m, cells in self.interval_volumes.items()
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SimTrace":
        try:
            tasks = sorted(data["tasks"], key=lambda t: t["id"])
            return cls(
                start=np.array([t["S"] for t in tasks], dtype=float),
                completion=np.array([t["C"] for t in tasks], dtype=float),
                events=tuple(float(e) for e in data["events"]),
                interval_volumes={
                    int(m): {int(k): float(v) for k, v in cells.items()}
                    for m, cells in data.get("interval_volumes", {}).items()
                },
                makespan=float(data["makespan"]),
                ideal=bool(data.get("ideal", False)),
            )
        except (KeyError, TypeError) as err:
            raise ConfigError(f"Malformed trace document: {err}") from err


@dataclass(frozen=True)
class Anchors:
    """Interval count K and the interval range each task occupied."""

    K: int
    bounds: dict[int, tuple[int, int]]

    def max_width(self) -> int:
        return max((end - start + 1 for start, end in self.bounds.values()), default=0)


####################
# PUBLIC FUNCTIONS #
####################
def water_fill(constraints: Sequence[CapacityRow]) -> dict[int, float]:
    """Progressive filling over capacity rows ``cap >= sum(coef * rate)``.

    All unfrozen rates rise together; members of the first row to saturate
    are frozen. Returns the max-min fair rate of every member.
    """
    rate: dict[int, float] = {}
    for _, coefs in constraints:
        for member in coefs:
            rate.setdefault(member, 0.0)
    frozen: set[int] = set()
    while len(frozen) < len(rate):
        step = float("inf")
        for cap, coefs in constraints:
            free = sum(coef for member, coef in coefs.items() if member not in frozen)
            if free <= 0:
                continue
            used = sum(coef * rate[member] for member, coef in coefs.items())
            step = min(step, (cap - used) / free)
        if step == float("inf"):
            break
        step = max(step, 0.0)
        for member in rate:
            if member not in frozen:
                rate[member] += step
        for cap, coefs in constraints:
            unfrozen = [member for member in coefs if member not in frozen]
            if not unfrozen:
                continue
            used = sum(coef * rate[member] for member, coef in coefs.items())
            if cap - used <= TIME_TOL * max(cap, 1.0):
                frozen.update(unfrozen)
    return rate


def max_min_share(
    active: Sequence[int],
    dag: ReducedDag,
    topo: Optional[LogicalTopology],
    bandwidth: float,
    ideal: bool = False,
) -> dict[int, float]:
    """Per-flow rate of every active task under link and NIC limits."""
    constraints: list[tuple[float, dict[int, float]]] = []
    if not ideal:
        by_pair: dict[tuple[int, int], list[int]] = {}
        for task_id in active:
            by_pair.setdefault(dag.tasks[task_id].pair, []).append(task_id)
        for (i, j), members in sorted(by_pair.items()):
            circuits = int(topo.x[i, j])
            if circuits <= 0:
                raise UnroutableTaskError(
                    f"tasks {members} need circuits on pods ({i}, {j})"
                )
            constraints.append(
                (circuits * bandwidth, {m: float(dag.tasks[m].flows) for m in members})
            )
    nic_groups: dict[str, dict[int, set[int]]] = {"tx": {}, "rx": {}}
    for task_id in active:
        task = dag.tasks[task_id]
        for gpu in task.src_gpus:
            nic_groups["tx"].setdefault(gpu, set()).add(task_id)
        for gpu in task.dst_gpus:
            nic_groups["rx"].setdefault(gpu, set()).add(task_id)
    seen: set[frozenset[int]] = set()
    for direction in ("tx", "rx"):
        for _, members in sorted(nic_groups[direction].items()):
            key = frozenset(members)
            if key in seen:
                continue
            seen.add(key)
            constraints.append((bandwidth, {m: 1.0 for m in sorted(members)}))
    return water_fill(constraints)


def simulate(
    topo: Optional[LogicalTopology],
    dag: ReducedDag,
    bandwidth: float,
    ideal: bool = False,
) -> SimTrace:
    """Run the DAG to completion and record when every task ran."""
    if not ideal:
        if topo is None:
            raise ConfigError(
                "a topology is required unless simulating the ideal network"
            )
        _check_routable(topo, dag)
    size = len(dag)
    start = np.full(size, np.nan)
    completion = np.full(size, np.nan)
    remaining = np.array([task.volume_Gb for task in dag.tasks], dtype=float)
    flows = [task.flows for task in dag.tasks]
    waiting = [len(dag.predecessors(task_id)) for task_id in range(size)]
    ready_at = np.zeros(size)
    pending = [(0.0, task_id) for task_id in range(size) if waiting[task_id] == 0]
    heapq.heapify(pending)
    active: list[int] = []
    segments: list[tuple[float, dict[int, float]]] = []
    now = 0.0

    def finish(task_id: int, when: float) -> None:
        completion[task_id] = when
        for succ, delta in dag.successors(task_id):
            ready_at[succ] = max(ready_at[succ], when + delta)
            waiting[succ] -= 1
            if waiting[succ] == 0:
                heapq.heappush(pending, (ready_at[succ], succ))

    while pending or active:
        while pending and pending[0][0] <= now + TIME_TOL * max(now, 1.0):
            _, task_id = heapq.heappop(pending)
            start[task_id] = now
            if remaining[task_id] <= 0:
                finish(task_id, now)
            else:
                active.append(task_id)
        if not active:
            if pending:
                now = pending[0][0]
                continue
            break

        active.sort()
        per_flow = max_min_share(active, dag, topo, bandwidth, ideal)
        rates = {m: per_flow[m] * flows[m] for m in active}
        eta = {m: now + 1000.0 * remaining[m] / rates[m] for m in active}
        t_next = min(eta.values())
        if pending and pending[0][0] < t_next:
            t_next = pending[0][0]
        span = t_next - now
        sent: dict[int, float] = {}
        finished, still_active = [], []
        for task_id in active:
            if eta[task_id] <= t_next + TIME_TOL * max(t_next, 1.0):
                sent[task_id] = remaining[task_id]
                remaining[task_id] = 0.0
                finished.append(task_id)
            else:
                amount = rates[task_id] * span / 1000.0
                sent[task_id] = amount
                remaining[task_id] -= amount
                still_active.append(task_id)
        segments.append((now, sent))
        now = t_next
        active = still_active
        for task_id in finished:
            finish(task_id, now)

    if np.isnan(completion).any():  # pragma: no cover
        raise InfeasibleError("simulation stalled before every task completed")
    events = tuple(sorted(set(start.tolist()) | set(completion.tolist())))
    position = {time: index for index, time in enumerate(events)}
    interval_volumes: dict[int, dict[int, float]] = {}
    for seg_start, sent in segments:
        k = position[seg_start] + 1
        for task_id, amount in sent.items():
            cells = interval_volumes.setdefault(task_id, {})
            cells[k] = cells.get(k, 0.0) + amount
    return SimTrace(
        start=start,
        completion=completion,
        events=events,
        interval_volumes=interval_volumes,
        makespan=float(completion.max(initial=0.0)),
        ideal=ideal,
    )


def critical_path(trace: SimTrace, dag: ReducedDag) -> list[int]:
    """Tasks on the executed critical path, first to last.

    Walks back from the last task to finish through the predecessor whose
    completion plus delta set each start; ties go to the smallest id.
    """
    current = int(np.argmax(trace.completion))
    path = [current]
    while dag.predecessors(current):
        preds = sorted(dag.predecessors(current))
        best_id = preds[0][0]
        best_time = trace.completion[best_id] + preds[0][1]
        for pre, delta in preds[1:]:
            release = trace.completion[pre] + delta
            if release > best_time + TIME_TOL * max(abs(best_time), 1.0):
                best_id, best_time = pre, release
        current = best_id
        path.append(current)
    return path[::-1]


def critical_path_comm_time(trace: SimTrace, dag: ReducedDag) -> float:
    path = critical_path(trace, dag)
    return float(sum(trace.completion[m] - trace.start[m] for m in path))


def nct(trace_ocs: SimTrace, trace_ideal: SimTrace, dag: ReducedDag) -> float:
    """Normalized communication time of a topology against the ideal network."""
    ideal_time = critical_path_comm_time(trace_ideal, dag)
    if ideal_time <= 0:
        raise UndefinedMetricError("ideal critical path carries no communication time")
    return critical_path_comm_time(trace_ocs, dag) / ideal_time


def derive_anchors(trace: SimTrace, dag: Optional[ReducedDag] = None) -> Anchors:
    """Interval indices (1-based, interval k = [t_k, t_k+1)) each task occupied."""
    position = {time: index for index, time in enumerate(trace.events)}
    bounds = {}
    for task_id, (s, c) in enumerate(zip(trace.start, trace.completion)):
        if dag is not None and dag.tasks[task_id].volume_Gb <= 0:
            continue
        if c <= s:
            continue
        bounds[task_id] = (position[s] + 1, position[c])
    return Anchors(K=max(len(trace.events) - 1, 0), bounds=bounds)


def full_port_topology(dag: ReducedDag) -> LogicalTopology:
    """Enough circuits on every active pair that no link ever binds."""
    x = np.zeros((dag.num_pods, dag.num_pods), dtype=int)
    for (i, j), members in dag.pairs().items():
        demand = sum(dag.tasks[m].flows for m in members)
        x[i, j] = x[j, i] = max(x[i, j], demand)
    return LogicalTopology(x, x.sum(axis=1))


#####################
# PRIVATE FUNCTIONS #
#####################
def _check_routable(topo: LogicalTopology, dag: ReducedDag) -> None:
    if topo.num_pods != dag.num_pods:
        raise ConfigError(
            f"topology has {topo.num_pods} pods, DAG has {dag.num_pods}"
        )
    for (i, j), members in dag.pairs().items():
        if topo.x[i, j] <= 0:
            raise UnroutableTaskError(
                f"tasks {members} need circuits on pods ({i}, {j})"
            )
