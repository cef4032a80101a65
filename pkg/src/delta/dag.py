"""
Reduced inter-pod communication DAG.

Intra-pod work between two inter-pod transfers collapses into a weighted
edge; what is left is the substrate every optimizer in delta works on.
"""

import heapq
import logging

from dataclasses import dataclass, replace
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence, TypeVar

import numpy as np

from delta.errors import ConfigError, CycleError
from delta.workload import CommTask, FullDag, TaskKind, topological_nodes

logger = logging.getLogger(__name__)

T = TypeVar("T")


###########
# CLASSES #
###########
class Dependency(NamedTuple):
    pre: int
    succ: int
    delta_ms: float


class ReducedDag:
    """Inter-pod tasks plus precedence edges weighted by intra-pod time.

    Task ids must equal their list position. Parallel edges are merged
    keeping the largest delta.
    """

    def __init__(
        self,
        tasks: Sequence[CommTask],
        deps: Iterable[tuple[int, int, float]],
        num_pods: int,
    ):
        self.tasks: tuple[CommTask, ...] = tuple(tasks)
        self.num_pods = num_pods
        for index, task in enumerate(self.tasks):
            if task.id != index:
                raise ConfigError(f"task at position {index} has id {task.id}")
            if not task.kind.is_virtual and not (
                0 <= task.src_pod < num_pods and 0 <= task.dst_pod < num_pods
            ):
                raise ConfigError(
                    f"task {task.id} uses a pod outside 0..{num_pods - 1}"
                )

        merged: dict[tuple[int, int], float] = {}
        for pre, succ, delta in deps:
            if not (0 <= pre < len(self.tasks) and 0 <= succ < len(self.tasks)):
                raise ConfigError(f"dependency ({pre}, {succ}) names an unknown task")
            if delta < 0:
                raise ConfigError(f"dependency ({pre}, {succ}) has negative delta")
            if pre == succ:
                raise CycleError(f"task {pre} depends on itself")
            key = (pre, succ)
            merged[key] = max(merged.get(key, delta), delta)
        self.deps: tuple[Dependency, ...] = tuple(
            Dependency(pre, succ, delta)
            for (pre, succ), delta in sorted(merged.items())
        )

        self._preds: list[list[tuple[int, float]]] = [[] for _ in self.tasks]
        self._succs: list[list[tuple[int, float]]] = [[] for _ in self.tasks]
        for dep in self.deps:
            self._preds[dep.succ].append((dep.pre, dep.delta_ms))
            self._succs[dep.pre].append((dep.succ, dep.delta_ms))

        self.src_index: dict[int, frozenset[int]] = _gpu_index(self.tasks, "src_gpus")
        self.dst_index: dict[int, frozenset[int]] = _gpu_index(self.tasks, "dst_gpus")
        self._order = self._kahn()

    def __len__(self) -> int:
        return len(self.tasks)

    def __repr__(self) -> str:
        return (
            f"ReducedDag({len(self.tasks)} tasks, {len(self.deps)} deps,"
            f" {self.num_pods} pods)"
        )

    def predecessors(self, task_id: int) -> list[tuple[int, float]]:
        return self._preds[task_id]

    def successors(self, task_id: int) -> list[tuple[int, float]]:
        return self._succs[task_id]

    def topological_order(self) -> list[int]:
        return list(self._order)

    def positive_tasks(self) -> list[int]:
        return [task.id for task in self.tasks if task.volume_Gb > 0]

    def sink_ids(self) -> list[int]:
        return [task.id for task in self.tasks if not self._succs[task.id]]

    def pairs(self) -> dict[tuple[int, int], list[int]]:
        """Ordered pod pair -> ids of the tasks that use it."""
        by_pair: dict[tuple[int, int], list[int]] = {}
        for task in self.tasks:
            if task.volume_Gb > 0:
                by_pair.setdefault(task.pair, []).append(task.id)
        return dict(sorted(by_pair.items()))

    def active_pairs(self) -> list[tuple[int, int]]:
        """Unordered pairs (i < j) carrying traffic in either direction."""
        return sorted({(min(i, j), max(i, j)) for i, j in self.pairs()})

    def task_durations(self, bandwidth: float) -> np.ndarray:
        """Shortest possible duration in ms: every flow at full NIC rate."""
        tau = np.zeros(len(self.tasks))
        for task in self.tasks:
            if task.volume_Gb > 0:
                tau[task.id] = 1000.0 * task.volume_Gb / (task.flows * bandwidth)
        return tau

    def longest_path(self, tau: np.ndarray) -> tuple[float, np.ndarray]:
        """Makespan of the dependency-only schedule and each task's finish."""
        finish = np.zeros(len(self.tasks))
        for task_id in self._order:
            preds = self._preds[task_id]
            start = max((finish[pre] + delta for pre, delta in preds), default=0.0)
            finish[task_id] = start + tau[task_id]
        return float(finish.max(initial=0.0)), finish

    def to_dict(self) -> dict:
        return {
            "num_pods": self.num_pods,
            "tasks": [task.to_dict() for task in self.tasks],
            "deps": [[dep.pre, dep.succ, dep.delta_ms] for dep in self.deps],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ReducedDag":
        try:
            tasks = [CommTask.from_dict(task) for task in data["tasks"]]
            deps = [
                (int(pre), int(succ), float(delta)) for pre, succ, delta in data["deps"]
            ]
            return cls(tasks, deps, int(data["num_pods"]))
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"Malformed DAG document: {err}") from err

    def _kahn(self) -> list[int]:
        indegree = [len(preds) for preds in self._preds]
        ready = [task_id for task_id, degree in enumerate(indegree) if degree == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            task_id = heapq.heappop(ready)
            order.append(task_id)
            for succ, _ in self._succs[task_id]:
                indegree[succ] -= 1
                if indegree[succ] == 0:
                    heapq.heappush(ready, succ)
        if len(order) != len(self.tasks):
            raise CycleError("reduced DAG contains a cycle")
        return order


@dataclass(frozen=True)
class Reachability:
    matrix: np.ndarray

    def reaches(self, u: int, v: int) -> bool:
        return bool(self.matrix[u, v])

    def related(self, u: int, v: int) -> bool:
        """True when one task must finish before the other starts."""
        return u != v and bool(self.matrix[u, v] or self.matrix[v, u])


@dataclass(frozen=True)
class ReplicaMap:
    """Reference task id -> the ids of its isomorphic copies in every replica."""

    fanout: dict[int, tuple[int, ...]]

    def broadcast(self, values: Mapping[int, T]) -> dict[int, T]:
        return {
            original: value
            for ref_id, value in values.items()
            for original in self.fanout[ref_id]
        }

    def covered(self) -> list[int]:
        return sorted(original for ids in self.fanout.values() for original in ids)


@dataclass(frozen=True)
class BarrierAlignment:
    """Per stage: the replica whose gradient is ready last, and when."""

    stages: dict[int, tuple[int, float]]


@dataclass(frozen=True)
class Projection:
    mode: str  # "homogeneous" or "decomposed"
    reference: Optional[ReducedDag] = None
    replica_map: Optional[ReplicaMap] = None
    sub_dags: tuple[ReducedDag, ...] = ()
    barrier: Optional[BarrierAlignment] = None


####################
# PUBLIC FUNCTIONS #
####################
def reduce_dag(full: FullDag) -> ReducedDag:
    """Collapse intra-pod nodes into weighted edges between CommTasks."""
    graph = full.graph
    reach: dict[tuple, dict[int, float]] = {}
    deps: dict[tuple[int, int], float] = {}
    for node in topological_nodes(graph):
        attrs = graph.nodes[node]
        incoming = reach.pop(node, {})
        if "task_id" in attrs:
            task_id = attrs["task_id"]
            for pre, delta in incoming.items():
                deps[(pre, task_id)] = max(deps.get((pre, task_id), delta), delta)
            carry = {task_id: 0.0}
        else:
            duration = attrs["duration"]
            carry = {pre: delta + duration for pre, delta in incoming.items()}
        for succ in graph.successors(node):
            target = reach.setdefault(succ, {})
            for pre, delta in carry.items():
                if delta > target.get(pre, -1.0):
                    target[pre] = delta
    edges = ((u, v, d) for (u, v), d in deps.items())
    dag = ReducedDag(full.tasks, edges, full.num_pods)
    unrooted = [task.id for task in dag.tasks[1:] if not dag.predecessors(task.id)]
    if unrooted:  # pragma: no cover
        raise ConfigError(f"tasks {unrooted} are not reachable from the virtual source")
    return dag


def transitive_closure(dag: ReducedDag) -> Reachability:
    """Reflexive-transitive closure by repeated boolean squaring."""
    size = len(dag)
    matrix = np.eye(size, dtype=bool)
    for dep in dag.deps:
        matrix[dep.pre, dep.succ] = True
    while True:
        dense = matrix.astype(np.float32)
        squared = (dense @ dense) > 0
        if np.array_equal(squared, matrix):
            return Reachability(matrix)
        matrix = squared


def project_single_replica(
    dag: ReducedDag,
    replicas: int,
    heterogeneous: bool = False,
    bandwidth: Optional[float] = None,
) -> Projection:
    """Shrink a data-parallel problem to its reference replica.

    Homogeneous replicas run in lockstep, so replica 0 stands in for all of
    them; dependencies on other replicas are redirected to the matching
    replica-0 task. Heterogeneous replicas are split into one sub-DAG each,
    with every DP task held back to a per-stage barrier set by the slowest
    replica under full NIC rate (``bandwidth`` required).
    """
    if replicas <= 1:
        identity = ReplicaMap({task.id: (task.id,) for task in dag.tasks})
        return Projection("homogeneous", reference=dag, replica_map=identity)
    if heterogeneous:
        if bandwidth is None:
            raise ConfigError("decomposition needs a bandwidth to place barriers")
        return _decompose(dag, replicas, bandwidth)

    signatures = _signature_index(dag, replicas)
    reference_sigs = signatures[0]
    for replica in range(1, replicas):
        if set(signatures[replica]) != set(reference_sigs):
            raise ConfigError(
                f"replica {replica} is not isomorphic to replica 0;"
                " use decomposition mode"
            )
    keep = [task.id for task in dag.tasks if task.kind.is_virtual or task.replica == 0]
    new_id = {old: new for new, old in enumerate(keep)}
    tasks = [replace(dag.tasks[old], id=new) for old, new in new_id.items()]

    def to_reference(task_id: int) -> int:
        task = dag.tasks[task_id]
        if task_id in new_id:
            return new_id[task_id]
        return new_id[reference_sigs[task.signature]]

    deps = []
    for dep in dag.deps:
        if dep.succ not in new_id:
            continue
        deps.append((to_reference(dep.pre), new_id[dep.succ], dep.delta_ms))
    reference = ReducedDag(tasks, deps, dag.num_pods)

    fanout = {}
    for old, new in new_id.items():
        task = dag.tasks[old]
        if task.kind.is_virtual:
            fanout[new] = (old,)
        else:
            fanout[new] = tuple(signatures[r][task.signature] for r in range(replicas))
    logger.debug(
        f"projected {len(dag)} tasks onto {len(reference)} for {replicas} replicas"
    )
    return Projection(
        "homogeneous", reference=reference, replica_map=ReplicaMap(fanout)
    )


def replica_pod_maps(
    dag: ReducedDag, projection: Projection
) -> Optional[list[np.ndarray]]:
    """Pod permutation carrying the reference replica onto each replica.

    Entry r maps a reference pod to the pod replica r uses in its place.
    Returns None when some replica's traffic is not a relabelling of the
    reference's pods. Pods the reference never touches are paired up in
    sorted order.
    """
    if projection.mode != "homogeneous" or projection.reference is None:
        return None
    fanout = projection.replica_map.fanout
    copies = [
        ids
        for ref_id, ids in fanout.items()
        if not projection.reference.tasks[ref_id].kind.is_virtual
    ]
    replicas = max((len(ids) for ids in copies), default=1)
    images: list[dict[int, int]] = [{} for _ in range(replicas)]
    for ref_id, ids in fanout.items():
        ref = projection.reference.tasks[ref_id]
        if ref.kind.is_virtual:
            continue
        for replica, original in enumerate(ids):
            task = dag.tasks[original]
            ends = ((ref.src_pod, task.src_pod), (ref.dst_pod, task.dst_pod))
            for pod, image in ends:
                if images[replica].setdefault(pod, image) != image:
                    return None

    maps = []
    for mapping in images:
        if len(set(mapping.values())) != len(mapping):
            return None
        perm = np.arange(dag.num_pods)
        free_src = [pod for pod in range(dag.num_pods) if pod not in mapping]
        used = set(mapping.values())
        free_dst = [pod for pod in range(dag.num_pods) if pod not in used]
        for pod, image in [*mapping.items(), *zip(free_src, free_dst)]:
            perm[pod] = image
        maps.append(perm)
    return maps


#####################
# PRIVATE FUNCTIONS #
#####################
def _gpu_index(tasks: Sequence[CommTask], attr: str) -> dict[int, frozenset[int]]:
    index: dict[int, set[int]] = {}
    for task in tasks:
        for gpu in getattr(task, attr):
            index.setdefault(gpu, set()).add(task.id)
    return {gpu: frozenset(ids) for gpu, ids in sorted(index.items())}


def _signature_index(dag: ReducedDag, replicas: int) -> list[dict[tuple, int]]:
    index: list[dict[tuple, int]] = [{} for _ in range(replicas)]
    for task in dag.tasks:
        if task.kind.is_virtual:
            continue
        if not 0 <= task.replica < replicas:
            raise ConfigError(f"task {task.id} belongs to replica {task.replica}")
        index[task.replica][task.signature] = task.id
    return index


def _decompose(dag: ReducedDag, replicas: int, bandwidth: float) -> Projection:
    _, finish = dag.longest_path(dag.task_durations(bandwidth))
    stages: dict[int, tuple[int, float]] = {}
    for task in dag.tasks:
        if task.kind != TaskKind.DP:
            continue
        preds = dag.predecessors(task.id)
        ready = max((finish[pre] + delta for pre, delta in preds), default=0.0)
        current = stages.get(task.stage)
        if current is None or ready > current[1] or (
            ready == current[1] and task.replica < current[0]
        ):
            stages[task.stage] = (task.replica, float(ready))

    source = next(task.id for task in dag.tasks if task.kind == TaskKind.VIRTUAL_SOURCE)
    sub_dags = []
    for replica in range(replicas):
        keep = [t.id for t in dag.tasks if t.kind.is_virtual or t.replica == replica]
        new_id = {old: new for new, old in enumerate(keep)}
        tasks = [replace(dag.tasks[old], id=new) for old, new in new_id.items()]
        deps = [
            (new_id[dep.pre], new_id[dep.succ], dep.delta_ms)
            for dep in dag.deps
            if dep.pre in new_id and dep.succ in new_id
        ]
        for old, new in new_id.items():
            task = dag.tasks[old]
            if task.kind == TaskKind.DP:
                deps.append((new_id[source], new, stages[task.stage][1]))
        sub_dags.append(ReducedDag(tasks, deps, dag.num_pods))
    return Projection(
        "decomposed", sub_dags=tuple(sub_dags), barrier=BarrierAlignment(stages)
    )
