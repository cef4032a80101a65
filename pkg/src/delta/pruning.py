"""
Search-space pruning: time windows, interval-index bounds and circuit caps.
"""

import logging

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from delta.dag import Reachability, ReducedDag, transitive_closure
from delta.des import Anchors
from delta.errors import InfeasibleHorizonError, OverTightAnchorError
from delta.workload import TaskKind

logger = logging.getLogger(__name__)


###########
# CLASSES #
###########
@dataclass(frozen=True)
class TimeWindows:
    est: np.ndarray
    lct: np.ndarray
    tau: np.ndarray
    t_up: float


@dataclass(frozen=True)
class IndexBounds:
    """Interval range [k_min, k_max] each positive-volume task may occupy."""

    K: int
    k_min: dict[int, int]
    k_max: dict[int, int]

    def retained(self, task_id: int) -> range:
        return range(self.k_min[task_id], self.k_max[task_id] + 1)

    def retained_cells(self) -> int:
        return sum(self.k_max[m] - self.k_min[m] + 1 for m in self.k_min)

    def is_zero_fixed(self, task_id: int, k: int) -> bool:
        return not self.k_min[task_id] <= k <= self.k_max[task_id]

    def zero_fixed_cells(self) -> Iterable[tuple[int, int]]:
        for task_id in sorted(self.k_min):
            for k in range(1, self.K + 1):
                if self.is_zero_fixed(task_id, k):
                    yield task_id, k

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "bounds": {
                str(m): [self.k_min[m], self.k_max[m]] for m in sorted(self.k_min)
            },
        }

    @classmethod
    def unpruned(cls, dag: ReducedDag, K: int) -> "IndexBounds":
        positive = dag.positive_tasks()
        return cls(K, {m: 1 for m in positive}, {m: K for m in positive})


@dataclass(frozen=True)
class CircuitUpperBounds:
    """Most flows any pod pair can ever carry at once, per direction."""

    matrix: np.ndarray

    def pair_bound(self, i: int, j: int) -> int:
        return int(max(self.matrix[i, j], self.matrix[j, i]))

    def to_dict(self) -> dict:
        return {"x_upper": self.matrix.tolist()}


####################
# PUBLIC FUNCTIONS #
####################
def cal_task_time_windows(
    dag: ReducedDag, bandwidth: float, t_up: float
) -> TimeWindows:
    """Earliest start and latest completion of every task within t_up."""
    tau = dag.task_durations(bandwidth)
    order = dag.topological_order()
    est = np.zeros(len(dag))
    for task_id in order:
        for pre, delta in dag.predecessors(task_id):
            est[task_id] = max(est[task_id], est[pre] + tau[pre] + delta)
    lct = np.full(len(dag), float(t_up))
    for task_id in reversed(order):
        for succ, delta in dag.successors(task_id):
            lct[task_id] = min(lct[task_id], lct[succ] - tau[succ] - delta)
    slack = lct - (est + tau)
    inverted = np.nonzero(slack < -1e-9 * max(t_up, 1.0))[0]
    if len(inverted):
        raise InfeasibleHorizonError(
            f"T_up={t_up} ms is shorter than the dependency chain through tasks"
            f" {inverted[:5].tolist()}"
        )
    return TimeWindows(est=est, lct=lct, tau=tau, t_up=float(t_up))


def task_time_index_pruning(
    dag: ReducedDag, K: int, anchors: Optional[Anchors] = None, widen: int = 1
) -> IndexBounds:
    """Bound the interval indices each task can occupy in a K-interval model.

    Positions run on a half-step lattice: 2k-1 is the boundary t_k and 2k is
    the inside of interval k. A positive-volume task whose first interval is
    k starts no later than t_k and frees its successors from t_{k+1}; a
    positive delta pushes a boundary position into the next interval.
    Zero-volume tasks occupy no interval and only pass positions through.
    """
    positive = {task.id for task in dag.tasks if task.volume_Gb > 0}
    k_min: dict[int, int] = {}
    k_max: dict[int, int] = {}
    for task_id in sorted(positive):
        k_min[task_id], k_max[task_id] = 1, K
        if anchors is None or task_id not in anchors.bounds:
            continue
        if _has_real_successor(dag, task_id):
            start, end = anchors.bounds[task_id]
            k_min[task_id] = max(1, start - widen)
            k_max[task_id] = min(K, end + widen)

    order = dag.topological_order()
    out_position: dict[int, int] = {}
    for task_id in order:
        preds = dag.predecessors(task_id)
        lower = max(
            (_step_forward(out_position[pre], delta) for pre, delta in preds),
            default=1,
        )
        if task_id in positive:
            k_min[task_id] = max(k_min[task_id], (lower + 2) // 2)
            out_position[task_id] = 2 * k_min[task_id] + 1
        else:
            out_position[task_id] = lower

    in_position: dict[int, int] = {}
    for task_id in reversed(order):
        succs = dag.successors(task_id)
        upper = min(
            (_step_back(in_position[succ], delta) for succ, delta in succs),
            default=2 * K + 1,
        )
        if task_id in positive:
            k_max[task_id] = min(k_max[task_id], (upper - 1) // 2)
            in_position[task_id] = 2 * k_max[task_id] - 1
        else:
            in_position[task_id] = upper

    empty = [m for m in sorted(positive) if k_min[m] > k_max[m]]
    if empty:
        raise OverTightAnchorError(
            f"tasks {empty[:5]} have no admissible interval with K={K};"
            " widen the anchors or raise K"
        )
    bounds = IndexBounds(K, k_min, k_max)
    logger.debug(
        f"index pruning kept {bounds.retained_cells()} of {len(positive) * K} cells"
    )
    return bounds


def x_upper_bound(
    dag: ReducedDag,
    t_up: float,
    bandwidth: float,
    reach: Optional[Reachability] = None,
) -> CircuitUpperBounds:
    """Cap each pod pair's circuits at its largest feasible concurrent flow set."""
    windows = cal_task_time_windows(dag, bandwidth, t_up)
    reach = reach or transitive_closure(dag)
    matrix = np.zeros((dag.num_pods, dag.num_pods), dtype=int)
    cache: dict[frozenset[int], float] = {}
    for (u, v), members in dag.pairs().items():
        boundaries = sorted(
            set(windows.est[members].tolist()) | set(windows.lct[members].tolist())
        )
        best = 0.0
        for low, high in zip(boundaries, boundaries[1:]):
            mid = (low + high) / 2
            active = [
                m for m in members if windows.est[m] <= mid < windows.lct[m]
            ]
            key = frozenset(active)
            if not active or key in cache:
                best = max(best, cache.get(key, 0.0))
                continue
            weights = [dag.tasks[m].flows for m in active]
            adjacency = [
                {b for b, other in enumerate(active) if reach.related(m, other)}
                for m in active
            ]
            cache[key] = solve_mwis(weights, adjacency)
            best = max(best, cache[key])
        matrix[u, v] = max(int(round(best)), 1)
    return CircuitUpperBounds(matrix)


def solve_mwis(weights: Sequence[float], adjacency: Sequence[Iterable[int]]) -> float:
    """Weight of a maximum-weight independent set."""
    weight, _ = max_weight_independent_set(weights, adjacency)
    return weight


def max_weight_independent_set(
    weights: Sequence[float], adjacency: Sequence[Iterable[int]]
) -> tuple[float, list[int]]:
    """Exact MWIS by bitset branch and bound seeded with a greedy set."""
    n = len(weights)
    if n == 0:
        return 0, []
    # neighbourhood masks include the vertex itself
    adj_mask = [1 << i for i in range(n)]
    for i, neighbours in enumerate(adjacency):
        for j in neighbours:
            if j != i:
                adj_mask[i] |= 1 << j
                adj_mask[j] |= 1 << i

    chosen, used = [], 0
    for i in sorted(range(n), key=lambda i: (-weights[i], i)):
        if not used & (1 << i):
            chosen.append(i)
            used |= adj_mask[i]
    best = [sum(weights[i] for i in chosen), sorted(chosen)]

    def branch(mask: int, current: float, picked: list[int], remaining: float) -> None:
        if current + remaining <= best[0]:
            return
        if mask == 0:
            best[0], best[1] = current, sorted(picked)
            return
        node, top = -1, -1.0
        bits = mask
        while bits:
            low = bits & -bits
            i = low.bit_length() - 1
            if weights[i] > top:
                node, top = i, weights[i]
            bits -= low
        removed_mask = adj_mask[node] & mask
        removed = 0.0
        bits = removed_mask
        while bits:
            low = bits & -bits
            removed += weights[low.bit_length() - 1]
            bits -= low
        picked.append(node)
        branch(
            mask & ~removed_mask, current + weights[node], picked, remaining - removed
        )
        picked.pop()
        branch(mask & ~(1 << node), current, picked, remaining - weights[node])

    branch((1 << n) - 1, 0, [], float(sum(weights)))
    return best[0], best[1]


#####################
# PRIVATE FUNCTIONS #
#####################
def _has_real_successor(dag: ReducedDag, task_id: int) -> bool:
    return any(
        dag.tasks[succ].kind != TaskKind.VIRTUAL_SINK
        for succ, _ in dag.successors(task_id)
    )


def _step_forward(position: int, delta: float) -> int:
    return position + 1 if delta > 0 and position % 2 == 1 else position


def _step_back(position: int, delta: float) -> int:
    return position - 1 if delta > 0 and position % 2 == 1 else position
