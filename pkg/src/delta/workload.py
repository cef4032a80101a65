"""
Workload synthesis.

Turns a parallelism/placement description of one hybrid-parallel training
iteration into the full computation-communication DAG under 1F1B scheduling,
plus the list of inter-pod communication tasks it contains.
"""

import enum
import logging
import math

from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple, Optional

import networkx as nx
import numpy as np

from delta import BASE_SEQ_LEN, DEFAULT_BANDWIDTH
from delta.errors import ConfigError, CycleError, DegenerateWorkloadError
from delta.helper import read_json

logger = logging.getLogger(__name__)

PLACEMENT_MODES = ("round-robin", "reversed", "explicit")

SOURCE_NODE = ("source",)
SINK_NODE = ("sink",)


###########
# CLASSES #
###########
class TaskKind(str, enum.Enum):
    PP_FWD = "PP-fwd"
    PP_BWD = "PP-bwd"
    DP = "DP"
    VIRTUAL_SOURCE = "virtual-source"
    VIRTUAL_SINK = "virtual-sink"

    @property
    def is_virtual(self) -> bool:
        return self in (TaskKind.VIRTUAL_SOURCE, TaskKind.VIRTUAL_SINK)


@dataclass(frozen=True)
class ParallelConfig:
    """Parallelism, cluster shape and per-kind costs of one training job."""

    tp: int
    pp: int
    dp: int
    num_micro_batches: int
    num_pods: int
    gpus_per_pod_per_replica: int
    fwd_compute_ms: float
    bwd_compute_ms: float
    pp_volume_Gb: float
    dp_volume_Gb: float
    nic_bandwidth_B: float = DEFAULT_BANDWIDTH
    ep: int = 0
    seq_len: int = BASE_SEQ_LEN
    base_seq_len: int = BASE_SEQ_LEN
    tp_comm_ms: float = 0.0
    intra_pod_comm_ms: float = 0.0
    name: str = "workload"

    @property
    def stages_per_pod(self) -> int:
        return self.gpus_per_pod_per_replica // self.tp

    @property
    def pods_per_replica(self) -> int:
        return math.ceil(self.pp / self.stages_per_pod)

    @property
    def effective_pp_volume_Gb(self) -> float:
        return self.pp_volume_Gb * self.seq_len / self.base_seq_len

    @property
    def total_gpus(self) -> int:
        return self.tp * self.pp * self.dp

    def validate(self) -> None:
        for name in (
            "tp",
            "pp",
            "dp",
            "num_micro_batches",
            "num_pods",
            "gpus_per_pod_per_replica",
            "seq_len",
            "base_seq_len",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.ep < 0:
            raise ConfigError(f"ep must be >= 0, got {self.ep}")
        if self.num_micro_batches < self.pp:
            raise ConfigError(
                f"num_micro_batches ({self.num_micro_batches}) < pp ({self.pp}):"
                " the pipeline can never fill"
            )
        for name in (
            "fwd_compute_ms",
            "bwd_compute_ms",
            "pp_volume_Gb",
            "dp_volume_Gb",
            "nic_bandwidth_B",
        ):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.tp_comm_ms < 0 or self.intra_pod_comm_ms < 0:
            raise ConfigError("intra-pod durations must be >= 0")
        if self.gpus_per_pod_per_replica % self.tp:
            raise ConfigError(
                f"gpus_per_pod_per_replica ({self.gpus_per_pod_per_replica}) is not"
                f" a multiple of tp ({self.tp}); a stage would straddle pods"
            )
        if self.pods_per_replica > self.num_pods:
            raise ConfigError(
                f"one replica needs {self.pods_per_replica} pods, only"
                f" {self.num_pods} available"
            )


@dataclass(frozen=True)
class Placement:
    stage_to_pod: dict[tuple[int, int], int]
    gpu_assignment: dict[tuple[int, int], tuple[int, ...]]
    mode: str = "round-robin"

    def pod_of(self, replica: int, stage: int) -> int:
        return self.stage_to_pod[(replica, stage)]

    def validate(self, cfg: ParallelConfig) -> None:
        seen: set[int] = set()
        per_pod_replica: dict[tuple[int, int], int] = {}
        for replica in range(cfg.dp):
            for stage in range(cfg.pp):
                key = (replica, stage)
                if key not in self.stage_to_pod or key not in self.gpu_assignment:
                    raise ConfigError(f"stage {stage} of replica {replica} not placed")
                pod = self.stage_to_pod[key]
                if not 0 <= pod < cfg.num_pods:
                    raise ConfigError(f"pod {pod} out of range for {key}")
                gpus = self.gpu_assignment[key]
                if len(gpus) != cfg.tp:
                    raise ConfigError(
                        f"stage {key} holds {len(gpus)} GPUs, tp={cfg.tp}"
                    )
                if seen.intersection(gpus):
                    raise ConfigError(f"GPU ids reused at {key}")
                seen.update(gpus)
                slot = (pod, replica)
                per_pod_replica[slot] = per_pod_replica.get(slot, 0) + len(gpus)
        for (pod, replica), count in per_pod_replica.items():
            if count > cfg.gpus_per_pod_per_replica:
                raise ConfigError(
                    f"pod {pod} hosts {count} GPUs of replica {replica}, limit"
                    f" {cfg.gpus_per_pod_per_replica}"
                )

    def port_caps(self, cfg: ParallelConfig) -> np.ndarray:
        """Ports per pod: the number of the job's GPUs living there."""
        caps = np.zeros(cfg.num_pods, dtype=int)
        for key, pod in self.stage_to_pod.items():
            caps[pod] += len(self.gpu_assignment[key])
        return caps

    def replica_port_caps(self, cfg: ParallelConfig, replica: int) -> np.ndarray:
        caps = np.zeros(cfg.num_pods, dtype=int)
        for stage in range(cfg.pp):
            key = (replica, stage)
            caps[self.stage_to_pod[key]] += len(self.gpu_assignment[key])
        return caps

    def to_dict(self, cfg: ParallelConfig) -> dict:
        return {
            "mode": self.mode,
            "stage_to_pod": [
                [self.stage_to_pod[(r, s)] for s in range(cfg.pp)]
                for r in range(cfg.dp)
            ],
        }


@dataclass(frozen=True)
class CommTask:
    """One aggregated inter-pod communication task."""

    id: int
    kind: TaskKind
    src_pod: int
    dst_pod: int
    flows: int
    volume_Gb: float
    src_gpus: frozenset[int] = field(default_factory=frozenset)
    dst_gpus: frozenset[int] = field(default_factory=frozenset)
    replica: int = -1
    stage: int = -1
    micro_batch: int = 0

    def __post_init__(self):
        if self.kind.is_virtual:
            if self.volume_Gb != 0:
                raise ConfigError(f"virtual task {self.id} must carry no volume")
            return
        if self.src_pod == self.dst_pod:
            raise ConfigError(f"task {self.id} does not cross pods")
        if not self.volume_Gb > 0:
            raise ConfigError(f"task {self.id} has non-positive volume")
        if not self.flows == len(self.src_gpus) == len(self.dst_gpus):
            raise ConfigError(f"task {self.id} flow count does not match its GPUs")

    @property
    def pair(self) -> tuple[int, int]:
        return (self.src_pod, self.dst_pod)

    @property
    def signature(self) -> tuple:
        """Identity of the task inside its replica."""
        return (self.kind.value, self.stage, self.micro_batch)

    def to_dict(self) -> dict:
        task = asdict(self)
        task["kind"] = self.kind.value
        task["src_gpus"] = sorted(self.src_gpus)
        task["dst_gpus"] = sorted(self.dst_gpus)
        return task

    @classmethod
    def from_dict(cls, data: dict) -> "CommTask":
        data = dict(data)
        data["kind"] = TaskKind(data["kind"])
        data["src_gpus"] = frozenset(data.get("src_gpus", ()))
        data["dst_gpus"] = frozenset(data.get("dst_gpus", ()))
        return cls(**data)


class Slot(NamedTuple):
    kind: str  # "fwd" or "bwd"
    micro_batch: int


@dataclass
class FullDag:
    """Computation and communication nodes of one iteration.

    Node attributes: ``kind`` (compute, intra-comm, inter-comm, virtual),
    ``duration`` in ms (None for inter-pod communication, which depends on
    the topology) and ``task_id`` for nodes that are CommTasks. Edge
    attribute ``category``: data, scheduling, gradient or virtual.
    """

    graph: nx.DiGraph
    tasks: list[CommTask]
    num_pods: int

    def task_nodes(self) -> dict[int, tuple]:
        return {
            attrs["task_id"]: node
            for node, attrs in self.graph.nodes(data=True)
            if "task_id" in attrs
        }

    def is_acyclic(self) -> bool:
        return nx.is_directed_acyclic_graph(self.graph)

    def critical_path_length(self, bandwidth: float) -> float:
        """Longest path with communication running at full NIC rate."""
        tau = {
            task.id: 1000.0 * task.volume_Gb / (task.flows * bandwidth)
            if task.flows
            else 0.0
            for task in self.tasks
        }
        finish: dict[tuple, float] = {}
        for node in topological_nodes(self.graph):
            attrs = self.graph.nodes[node]
            duration = attrs["duration"]
            if duration is None:
                duration = tau[attrs["task_id"]]
            preds = self.graph.predecessors(node)
            ready = max((finish[pred] for pred in preds), default=0.0)
            finish[node] = ready + duration
        return max(finish.values(), default=0.0)


####################
# PUBLIC FUNCTIONS #
####################
def round_robin_placement(cfg: ParallelConfig) -> Placement:
    """Pack consecutive stages into pod-sized blocks, rotate blocks per replica."""
    stage_to_pod = {}
    for replica in range(cfg.dp):
        for stage in range(cfg.pp):
            block = stage // cfg.stages_per_pod
            stage_to_pod[(replica, stage)] = (block + replica) % cfg.num_pods
    return Placement(stage_to_pod, _gpu_assignment(cfg), "round-robin")


def reversed_placement(
    cfg: ParallelConfig, base: Optional[Placement] = None
) -> Placement:
    """The Model^T layout: stage s sits where stage pp-1-s sat."""
    base = base or round_robin_placement(cfg)
    stage_to_pod = {
        (replica, stage): base.stage_to_pod[(replica, cfg.pp - 1 - stage)]
        for replica in range(cfg.dp)
        for stage in range(cfg.pp)
    }
    return Placement(stage_to_pod, _gpu_assignment(cfg), "reversed")


def explicit_placement(cfg: ParallelConfig, stage_to_pod: list[list[int]]) -> Placement:
    if len(stage_to_pod) != cfg.dp or any(len(row) != cfg.pp for row in stage_to_pod):
        raise ConfigError("stage_to_pod must list pp pods for each of dp replicas")
    mapping = {
        (replica, stage): int(pod)
        for replica, row in enumerate(stage_to_pod)
        for stage, pod in enumerate(row)
    }
    return Placement(mapping, _gpu_assignment(cfg), "explicit")


def make_placement(
    cfg: ParallelConfig, mode: str = "round-robin", stage_to_pod=None
) -> Placement:
    if mode == "round-robin":
        place = round_robin_placement(cfg)
    elif mode == "reversed":
        base = explicit_placement(cfg, stage_to_pod) if stage_to_pod else None
        place = reversed_placement(cfg, base)
    elif mode == "explicit":
        if stage_to_pod is None:
            raise ConfigError("explicit placement needs stage_to_pod")
        place = explicit_placement(cfg, stage_to_pod)
    else:
        raise ConfigError(
            f"Unknown placement mode '{mode}', use one of {PLACEMENT_MODES}"
        )
    place.validate(cfg)
    return place


def synthesize_1f1b_schedule(cfg: ParallelConfig) -> dict[tuple[int, int], list[Slot]]:
    """Slot order of every (replica, stage) under 1F1B."""
    if cfg.num_micro_batches < cfg.pp:
        raise ConfigError(
            f"num_micro_batches ({cfg.num_micro_batches}) < pp ({cfg.pp})"
        )
    schedule = {}
    mbs = cfg.num_micro_batches
    for stage in range(cfg.pp):
        warmup = min(cfg.pp - stage, mbs)
        slots = [Slot("fwd", b) for b in range(1, warmup + 1)]
        for b in range(1, mbs + 1):
            slots.append(Slot("bwd", b))
            if warmup + b <= mbs:
                slots.append(Slot("fwd", warmup + b))
        for replica in range(cfg.dp):
            schedule[(replica, stage)] = list(slots)
    return schedule


def count_tasks(cfg: ParallelConfig) -> tuple[int, int]:
    """(PP tasks, DP tasks) per replica when every boundary crosses pods."""
    return 2 * (cfg.pp - 1) * cfg.num_micro_batches, cfg.pp


def build_workload(
    cfg: ParallelConfig, place: Placement
) -> tuple[FullDag, list[CommTask]]:
    cfg.validate()
    place.validate(cfg)
    schedule = synthesize_1f1b_schedule(cfg)
    graph = nx.DiGraph()
    comm_specs: list[tuple[tuple, tuple, dict]] = []

    def add_comm(node, kind, replica, stage, b, src_key, dst_key, volume):
        src_pod, dst_pod = place.pod_of(*src_key), place.pod_of(*dst_key)
        if src_pod == dst_pod:
            graph.add_node(node, kind="intra-comm", duration=cfg.intra_pod_comm_ms)
            return
        graph.add_node(node, kind="inter-comm", duration=None)
        order = (replica, _KIND_RANK[kind], stage, b)
        comm_specs.append(
            (
                order,
                node,
                dict(
                    kind=kind,
                    src_pod=src_pod,
                    dst_pod=dst_pod,
                    flows=cfg.tp,
                    volume_Gb=volume,
                    src_gpus=frozenset(place.gpu_assignment[src_key]),
                    dst_gpus=frozenset(place.gpu_assignment[dst_key]),
                    replica=replica,
                    stage=stage,
                    micro_batch=b,
                ),
            )
        )

    compute_ms = {
        "fwd": cfg.fwd_compute_ms + cfg.tp_comm_ms,
        "bwd": cfg.bwd_compute_ms + cfg.tp_comm_ms,
    }
    pp_volume = cfg.effective_pp_volume_Gb
    last = cfg.pp - 1
    mbs = cfg.num_micro_batches
    for r in range(cfg.dp):
        for s in range(cfg.pp):
            for slot in schedule[(r, s)]:
                graph.add_node(
                    _slot_node(r, s, slot),
                    kind="compute",
                    duration=compute_ms[slot.kind],
                )
        for s in range(last):
            for b in range(1, mbs + 1):
                here, there = (r, s), (r, s + 1)
                add_comm(
                    ("PPf", r, s, b), TaskKind.PP_FWD, r, s, b, here, there, pp_volume
                )
                add_comm(
                    ("PPb", r, s, b), TaskKind.PP_BWD, r, s, b, there, here, pp_volume
                )
                _edge(graph, ("F", r, s, b), ("PPf", r, s, b), "data")
                _edge(graph, ("PPf", r, s, b), ("F", r, s + 1, b), "data")
                _edge(graph, ("B", r, s + 1, b), ("PPb", r, s, b), "data")
                _edge(graph, ("PPb", r, s, b), ("B", r, s, b), "data")
        for b in range(1, mbs + 1):
            _edge(graph, ("F", r, last, b), ("B", r, last, b), "data")
        for s in range(cfg.pp):
            slots = schedule[(r, s)]
            for i in range(len(slots) - 1):
                current = _slot_node(r, s, slots[i])
                upcoming = _slot_node(r, s, slots[i + 1])
                _edge(graph, current, upcoming, "scheduling")
                outgoing = _outgoing(r, s, slots[i], cfg.pp)
                if outgoing:
                    _edge(graph, outgoing, upcoming, "scheduling")
                incoming = _incoming(r, s, slots[i + 1], cfg.pp)
                if incoming:
                    _edge(graph, current, incoming, "scheduling")

    if cfg.dp > 1:
        for r in range(cfg.dp):
            peer = (r + 1) % cfg.dp
            for s in range(cfg.pp):
                node = ("DP", r, s)
                add_comm(
                    node, TaskKind.DP, r, s, 0, (r, s), (peer, s), cfg.dp_volume_Gb
                )
                _edge(graph, ("B", r, s, mbs), node, "gradient")
                _edge(graph, ("B", peer, s, mbs), node, "gradient")
                if s > 0:
                    _edge(graph, ("PPb", r, s - 1, mbs), node, "scheduling")

    if not comm_specs:
        raise DegenerateWorkloadError(
            f"placement of '{cfg.name}' keeps every transfer inside a pod"
        )

    tasks = [_virtual_task(0, TaskKind.VIRTUAL_SOURCE)]
    ordered = sorted(comm_specs, key=lambda c: c[0])
    for task_id, (_, node, spec) in enumerate(ordered, start=1):
        tasks.append(CommTask(id=task_id, **spec))
        graph.nodes[node]["task_id"] = task_id
    sink_id = len(tasks)
    tasks.append(_virtual_task(sink_id, TaskKind.VIRTUAL_SINK))

    roots = [n for n in graph.nodes if graph.in_degree(n) == 0]
    leaves = [n for n in graph.nodes if graph.out_degree(n) == 0]
    graph.add_node(SOURCE_NODE, kind="virtual", duration=0.0, task_id=0)
    graph.add_node(SINK_NODE, kind="virtual", duration=0.0, task_id=sink_id)
    for node in roots:
        _edge(graph, SOURCE_NODE, node, "virtual")
    for node in leaves:
        _edge(graph, node, SINK_NODE, "virtual")

    full = FullDag(graph=graph, tasks=tasks, num_pods=cfg.num_pods)
    if not full.is_acyclic():  # pragma: no cover
        raise CycleError(f"dependency cycle in workload '{cfg.name}'")
    logger.debug(
        f"{cfg.name}: {graph.number_of_nodes()} nodes, {len(tasks) - 2} inter-pod tasks"
    )
    return full, tasks


def parallel_config_from_dict(data: dict) -> ParallelConfig:
    known = {f.name for f in fields(ParallelConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown workload keys: {sorted(unknown)}")
    try:
        cfg = ParallelConfig(**data)
    except TypeError as err:
        raise ConfigError(f"Incomplete workload config: {err}") from err
    cfg.validate()
    return cfg


def load_workload_config(path: str) -> tuple[ParallelConfig, Placement]:
    """Read a workload JSON file: {"name", "parallel": {...}, "placement": {...}}."""
    data = read_json(path)
    unknown = set(data) - {"name", "parallel", "placement"}
    if unknown or "parallel" not in data:
        raise ConfigError(
            f"'{path}' needs a 'parallel' section, unknown keys {sorted(unknown)}"
        )
    parallel = dict(data["parallel"])
    if "name" in data:
        parallel.setdefault("name", data["name"])
    cfg = parallel_config_from_dict(parallel)
    placement = data.get("placement", {})
    place = make_placement(
        cfg, placement.get("mode", "round-robin"), placement.get("stage_to_pod")
    )
    return cfg, place


def workload_to_dict(cfg: ParallelConfig, place: Placement) -> dict:
    return {"name": cfg.name, "parallel": asdict(cfg), "placement": place.to_dict(cfg)}


#####################
# PRIVATE FUNCTIONS #
#####################
_KIND_RANK = {TaskKind.PP_FWD: 0, TaskKind.PP_BWD: 1, TaskKind.DP: 2}


def _gpu_assignment(cfg: ParallelConfig) -> dict[tuple[int, int], tuple[int, ...]]:
    return {
        (r, s): tuple(r * cfg.pp * cfg.tp + s * cfg.tp + t for t in range(cfg.tp))
        for r in range(cfg.dp)
        for s in range(cfg.pp)
    }


def _slot_node(replica: int, stage: int, slot: Slot) -> tuple:
    return ("F" if slot.kind == "fwd" else "B", replica, stage, slot.micro_batch)


def _virtual_task(task_id: int, kind: TaskKind) -> CommTask:
    return CommTask(
        id=task_id, kind=kind, src_pod=-1, dst_pod=-1, flows=0, volume_Gb=0.0
    )


def _outgoing(replica: int, stage: int, slot: Slot, pp: int) -> Optional[tuple]:
    """Transfer a slot sends once its compute is done."""
    if slot.kind == "fwd" and stage < pp - 1:
        return ("PPf", replica, stage, slot.micro_batch)
    if slot.kind == "bwd" and stage > 0:
        return ("PPb", replica, stage - 1, slot.micro_batch)
    return None


def _incoming(replica: int, stage: int, slot: Slot, pp: int) -> Optional[tuple]:
    """Transfer a slot must receive before it can run."""
    if slot.kind == "fwd" and stage > 0:
        return ("PPf", replica, stage - 1, slot.micro_batch)
    if slot.kind == "bwd" and stage < pp - 1:
        return ("PPb", replica, stage, slot.micro_batch)
    return None


def _edge(graph: nx.DiGraph, u: tuple, v: tuple, category: str) -> None:
    if not graph.has_edge(u, v):
        graph.add_edge(u, v, category=category)


def topological_nodes(graph: nx.DiGraph) -> list:
    try:
        return list(nx.topological_sort(graph))
    except nx.NetworkXUnfeasible as err:
        raise CycleError("dependency graph contains a cycle") from err
