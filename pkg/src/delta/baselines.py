"""
Traffic-matrix baselines: proportional, square-root and iterative halving.

All three look only at the volume each pod pair exchanges over one
iteration, never at when it is sent. Every active pair gets at least one
circuit; ties go to the lexicographically smaller pod pair.
"""

import logging
import math

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from delta.dag import ReducedDag
from delta.des import LogicalTopology
from delta.errors import ConfigError, InfeasibleError

logger = logging.getLogger(__name__)

Pair = tuple[int, int]


###########
# CLASSES #
###########
@dataclass(frozen=True)
class TrafficMatrix:
    """Gb sent from pod i to pod j during one iteration."""

    volume: np.ndarray

    def __post_init__(self):
        volume = np.asarray(self.volume, dtype=float)
        if volume.ndim != 2 or volume.shape[0] != volume.shape[1]:
            raise ConfigError(f"traffic matrix must be square, got {volume.shape}")
        if (volume < 0).any():
            raise ConfigError("traffic matrix has negative volume")
        if np.diagonal(volume).any():
            raise ConfigError("traffic matrix has intra-pod volume on its diagonal")
        object.__setattr__(self, "volume", volume)

    @property
    def num_pods(self) -> int:
        return self.volume.shape[0]

    @classmethod
    def from_dag(cls, dag: ReducedDag) -> "TrafficMatrix":
        volume = np.zeros((dag.num_pods, dag.num_pods))
        for task in dag.tasks:
            if task.volume_Gb > 0:
                volume[task.src_pod, task.dst_pod] += task.volume_Gb
        return cls(volume)

    def symmetric_weights(self) -> dict[Pair, float]:
        """Undirected pair -> combined volume of both directions."""
        both = self.volume + self.volume.T
        size = self.num_pods
        return {
            (i, j): float(both[i, j])
            for i in range(size)
            for j in range(i + 1, size)
            if both[i, j] > 0
        }


####################
# PUBLIC FUNCTIONS #
####################
def prop_alloc(
    tm: TrafficMatrix,
    port_caps: Sequence[int],
    active_pairs: Optional[Sequence[Pair]] = None,
) -> LogicalTopology:
    """Apportion each pod's ports in proportion to pair volume."""
    return _apportioned(tm, port_caps, active_pairs, lambda volume: volume)


def sqrt_alloc(
    tm: TrafficMatrix,
    port_caps: Sequence[int],
    active_pairs: Optional[Sequence[Pair]] = None,
) -> LogicalTopology:
    """Apportion each pod's ports in proportion to the square root of volume."""
    return _apportioned(tm, port_caps, active_pairs, math.sqrt)


def iter_halve(
    tm: TrafficMatrix,
    port_caps: Sequence[int],
    active_pairs: Optional[Sequence[Pair]] = None,
) -> LogicalTopology:
    """Hand circuits one at a time to the heaviest pair, halving its weight."""
    caps = np.asarray(port_caps, dtype=int)
    weights = tm.symmetric_weights()
    pairs = _active(weights, active_pairs)
    x = _connectivity(pairs, caps)
    weight = {pair: weights.get(pair, 0.0) / 2 for pair in pairs}
    while True:
        open_pairs = _open_pairs(pairs, x, caps)
        if not open_pairs:
            break
        i, j = min(open_pairs, key=lambda pair: (-weight[pair], pair))
        x[i, j] += 1
        x[j, i] += 1
        weight[(i, j)] /= 2
    return LogicalTopology(x, caps)


BASELINES: dict[str, Callable[..., LogicalTopology]] = {
    "prop": prop_alloc,
    "sqrt": sqrt_alloc,
    "iterhalve": iter_halve,
}


def largest_remainder(total: int, weights: dict[Pair, float]) -> dict[Pair, int]:
    """Split ``total`` integer units in proportion to ``weights``."""
    mass = sum(weights.values())
    if total <= 0 or mass <= 0:
        return {pair: 0 for pair in weights}
    quotas = {pair: total * value / mass for pair, value in weights.items()}
    shares = {pair: math.floor(quota) for pair, quota in quotas.items()}
    left = total - sum(shares.values())
    by_remainder = sorted(
        quotas, key=lambda pair: (-(quotas[pair] - shares[pair]), pair)
    )
    for pair in by_remainder[:left]:
        shares[pair] += 1
    return shares


#####################
# PRIVATE FUNCTIONS #
#####################
def _active(
    weights: dict[Pair, float], active_pairs: Optional[Sequence[Pair]]
) -> list[Pair]:
    if active_pairs is None:
        return sorted(weights)
    return sorted({(min(i, j), max(i, j)) for i, j in active_pairs})


def _open_pairs(pairs: list[Pair], x: np.ndarray, caps: np.ndarray) -> list[Pair]:
    usage = x.sum(axis=1)
    return [(i, j) for i, j in pairs if usage[i] < caps[i] and usage[j] < caps[j]]


def _connectivity(pairs: list[Pair], caps: np.ndarray) -> np.ndarray:
    """One circuit on every active pair."""
    x = np.zeros((len(caps), len(caps)), dtype=int)
    for i, j in pairs:
        x[i, j] = x[j, i] = 1
    short = np.nonzero(x.sum(axis=1) > caps)[0]
    if len(short):
        raise InfeasibleError(
            f"pods {short.tolist()} have fewer ports than active pod pairs"
        )
    return x


def _apportioned(
    tm: TrafficMatrix,
    port_caps: Sequence[int],
    active_pairs: Optional[Sequence[Pair]],
    transform: Callable[[float], float],
) -> LogicalTopology:
    caps = np.asarray(port_caps, dtype=int)
    weights = {pair: transform(value) for pair, value in tm.symmetric_weights().items()}
    pairs = _active(weights, active_pairs)
    weights = {pair: weights.get(pair, 0.0) for pair in pairs}
    x = _connectivity(pairs, caps)

    target = {pair: caps.max(initial=0) for pair in pairs}
    for pod in range(len(caps)):
        incident = {pair: weights[pair] for pair in pairs if pod in pair}
        for pair, share in largest_remainder(int(caps[pod]), incident).items():
            target[pair] = min(target[pair], share)

    # grow toward the targets, then keep filling so no usable port is stranded
    while True:
        open_pairs = _open_pairs(pairs, x, caps)
        if not open_pairs:
            break
        i, j = min(
            open_pairs,
            key=lambda pair: (-(target[pair] - x[pair]), -weights[pair], pair),
        )
        x[i, j] += 1
        x[j, i] += 1
    logger.debug(f"apportioned {int(x.sum()) // 2} circuits over {len(pairs)} pairs")
    return LogicalTopology(x, caps)
