"""
DES-driven genetic search over logical topologies.

A genome holds one circuit count per active pod pair. Fitness is the
simulated makespan with the total port count as tiebreak, so lower is
better on both.
"""

import itertools
import logging

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
import pandas as pd

from delta.config import Config
from delta.dag import ReducedDag
from delta.des import LogicalTopology, simulate
from delta.errors import ConfigError, InitInfeasibleError
from delta.pruning import CircuitUpperBounds

logger = logging.getLogger(__name__)

Genes = tuple[int, ...]

INIT_ATTEMPTS = 100
MAKESPAN_TOL = 1e-9


###########
# CLASSES #
###########
@dataclass(frozen=True)
class GaParams:
    population: int = 64
    generations: int = 400
    elite: int = 2
    tournament: int = 4
    crossover_rate: float = 0.9
    mutation_rate: float = 0.1
    stagnation: int = 200
    seed: int = 0
    workers: int = 1
    seed_baselines: bool = True

    def __post_init__(self):
        if self.population < 2:
            raise ConfigError(f"population must be at least 2, got {self.population}")
        if not 0 <= self.elite < self.population:
            raise ConfigError(
                f"elite must be in [0, {self.population}), got {self.elite}"
            )
        if self.tournament < 1 or self.generations < 0 or self.stagnation < 1:
            raise ConfigError(
                "tournament and stagnation must be positive, generations >= 0"
            )
        for name in ("crossover_rate", "mutation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    @classmethod
    def from_config(cls, config: Config, **overrides) -> "GaParams":
        params = dict(
            population=config.population,
            generations=config.generations,
            elite=config.elite,
            tournament=config.tournament,
            crossover_rate=config.crossover_rate,
            mutation_rate=config.mutation_rate,
            stagnation=config.stagnation,
            workers=config.workers,
            seed_baselines=config.seed_baselines,
        )
        params.update({key: val for key, val in overrides.items() if val is not None})
        return cls(**params)


@dataclass(frozen=True)
class TopologySpace:
    """Active pairs, per-pod port budgets and per-pair circuit caps."""

    pairs: tuple[tuple[int, int], ...]
    port_caps: np.ndarray
    upper: tuple[int, ...]

    @classmethod
    def from_dag(
        cls,
        dag: ReducedDag,
        port_caps: Sequence[int],
        x_upper: Optional[CircuitUpperBounds] = None,
    ) -> "TopologySpace":
        caps = np.asarray(port_caps, dtype=int)
        pairs = tuple(dag.active_pairs())
        upper = []
        for i, j in pairs:
            bound = int(min(caps[i], caps[j]))
            if x_upper is not None:
                bound = min(bound, x_upper.pair_bound(i, j))
            upper.append(max(bound, 1))
        return cls(pairs, caps, tuple(upper))

    def usage(self, genes: Sequence[int]) -> np.ndarray:
        used = np.zeros(len(self.port_caps), dtype=int)
        for (i, j), count in zip(self.pairs, genes):
            used[i] += count
            used[j] += count
        return used

    def satisfies(self, genes: Sequence[int]) -> bool:
        if any(not 1 <= count <= bound for count, bound in zip(genes, self.upper)):
            return False
        return bool((self.usage(genes) <= self.port_caps).all())

    def degrees(self) -> np.ndarray:
        return self.usage([1] * len(self.pairs))

    def to_topology(self, genes: Sequence[int]) -> LogicalTopology:
        size = len(self.port_caps)
        x = np.zeros((size, size), dtype=int)
        for (i, j), count in zip(self.pairs, genes):
            x[i, j] = x[j, i] = count
        return LogicalTopology(x, self.port_caps)

    def from_topology(self, topo: LogicalTopology) -> Genes:
        return tuple(int(topo.x[i, j]) for i, j in self.pairs)


@dataclass(frozen=True)
class Individual:
    genes: Genes
    makespan: float = float("inf")
    ports: int = 0

    @property
    def fitness(self) -> tuple[float, int]:
        return (self.makespan, self.ports)


@dataclass
class GaResult:
    best: Individual
    topology: LogicalTopology
    history: list[tuple[int, float, int]] = field(default_factory=list)
    evaluations: int = 0
    generations_run: int = 0

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            self.history, columns=["generation", "best_makespan_ms", "best_ports"]
        )


####################
# PUBLIC FUNCTIONS #
####################
def feasible_random_init(space: TopologySpace, rng: np.random.Generator) -> Genes:
    """Sample a topology edge by edge, reserving one port per pending edge."""
    degrees = space.degrees()
    short = np.nonzero(degrees > space.port_caps)[0]
    if len(short):
        raise InitInfeasibleError(
            f"pods {short.tolist()} have fewer ports than active pod pairs"
        )
    for _ in range(INIT_ATTEMPTS):
        pending = degrees.copy()
        used = np.zeros_like(degrees)
        genes = []
        for (u, v), bound in zip(space.pairs, space.upper):
            pending[u] -= 1
            pending[v] -= 1
            free_u = space.port_caps[u] - used[u] - pending[u]
            free_v = space.port_caps[v] - used[v] - pending[v]
            limit = max(1, min(free_u, free_v, bound))
            count = int(rng.integers(1, limit + 1))
            genes.append(count)
            used[u] += count
            used[v] += count
        if space.satisfies(genes):
            return tuple(genes)
    raise InitInfeasibleError(f"no feasible topology after {INIT_ATTEMPTS} samples")


def repair_topo(
    child: Sequence[int], space: TopologySpace, rng: np.random.Generator
) -> tuple[Genes, bool]:
    """Clamp into [1, cap] then shed circuits at overloaded pods at random."""
    genes = [max(1, min(int(count), bound)) for count, bound in zip(child, space.upper)]
    used = space.usage(genes)
    while True:
        over = np.nonzero(used > space.port_caps)[0]
        if not len(over):
            break
        pod = int(over[rng.integers(len(over))])
        reducible = [
            index
            for index, pair in enumerate(space.pairs)
            if pod in pair and genes[index] > 1
        ]
        if not reducible:
            break
        index = reducible[int(rng.integers(len(reducible)))]
        genes[index] -= 1
        i, j = space.pairs[index]
        used[i] -= 1
        used[j] -= 1
    return tuple(genes), bool((used <= space.port_caps).all())


def crossover_mutate(
    p1: Sequence[int], p2: Sequence[int], params: GaParams, rng: np.random.Generator
) -> Genes:
    """Uniform crossover, then a +-1 step per gene with the mutation rate."""
    if len(p1) != len(p2):
        raise ConfigError("parents cover different pod pairs")
    if rng.random() < params.crossover_rate:
        coins = rng.random(len(p1)) < 0.5
        child = [a if coin else b for a, b, coin in zip(p1, p2, coins)]
    else:
        child = list(p1)
    for index in range(len(child)):
        if rng.random() < params.mutation_rate:
            step = 1 if rng.random() < 0.5 else -1
            child[index] = max(1, child[index] + step)
    return tuple(child)


def evaluate(
    genes: Genes, space: TopologySpace, dag: ReducedDag, bandwidth: float
) -> Individual:
    topo = space.to_topology(genes)
    trace = simulate(topo, dag, bandwidth)
    return Individual(genes, trace.makespan, topo.total_ports)


def run_ga(
    dag: ReducedDag,
    space: TopologySpace,
    params: GaParams,
    bandwidth: float,
    seeds: Iterable[LogicalTopology] = (),
) -> GaResult:
    """Elitist genetic search; identical seeds give identical results.

    The random stream of generation g is ``default_rng([seed, g])`` and
    fitness evaluations are collected by population index, so the worker
    count never changes the outcome.
    """
    cache: dict[Genes, Individual] = {}
    executor = None
    if params.workers > 1:
        executor = ThreadPoolExecutor(max_workers=params.workers)

    def assess(population: list[Genes]) -> list[Individual]:
        fresh = [genes for genes in dict.fromkeys(population) if genes not in cache]
        if executor is None:
            results = [evaluate(genes, space, dag, bandwidth) for genes in fresh]
        else:
            results = list(
                executor.map(lambda item: evaluate(item, space, dag, bandwidth), fresh)
            )
        for individual in results:
            cache[individual.genes] = individual
        return [cache[genes] for genes in population]

    try:
        rng = np.random.default_rng([params.seed, 0])
        population: list[Genes] = []
        for topo in seeds:
            genes, ok = repair_topo(space.from_topology(topo), space, rng)
            if ok and len(population) < params.population:
                population.append(genes)
        while len(population) < params.population:
            population.append(feasible_random_init(space, rng))
        scored = assess(population)
        best = min(scored, key=_rank)
        history = [(0, best.makespan, best.ports)]
        logger.info(
            f"generation 0: makespan {best.makespan:.4f} ms, {best.ports} ports"
        )

        stale, ran = 0, 0
        singleton = all(bound == 1 for bound in space.upper)
        for generation in range(1, params.generations + 1):
            if singleton or stale >= params.stagnation:
                break
            rng = np.random.default_rng([params.seed, generation])
            ranked = sorted(scored, key=_rank)
            offspring = [individual.genes for individual in ranked[: params.elite]]
            while len(offspring) < params.population:
                p1 = _tournament(scored, params.tournament, rng)
                p2 = _tournament(scored, params.tournament, rng)
                child = crossover_mutate(p1.genes, p2.genes, params, rng)
                child, ok = repair_topo(child, space, rng)
                if not ok:
                    child = feasible_random_init(space, rng)
                offspring.append(child)
            scored = assess(offspring)
            leader = min(scored, key=_rank)
            if _rank(leader) < _rank(best):
                best, stale = leader, 0
                logger.info(
                    f"generation {generation}: makespan {best.makespan:.4f} ms,"
                    f" {best.ports} ports"
                )
            else:
                stale += 1
            history.append((generation, best.makespan, best.ports))
            ran = generation
    finally:
        if executor is not None:
            executor.shutdown()

    return GaResult(
        best=best,
        topology=space.to_topology(best.genes),
        history=history,
        evaluations=len(cache),
        generations_run=ran,
    )


def enumerate_topologies(space: TopologySpace) -> Iterator[Genes]:
    """Every gene vector within the circuit caps and port budgets."""
    ranges = [range(1, bound + 1) for bound in space.upper]
    for genes in itertools.product(*ranges):
        if space.satisfies(genes):
            yield tuple(genes)


def exhaustive_best(
    dag: ReducedDag, space: TopologySpace, bandwidth: float
) -> Individual:
    """Best topology by brute force; only sensible for tiny spaces."""
    candidates = [
        evaluate(genes, space, dag, bandwidth) for genes in enumerate_topologies(space)
    ]
    if not candidates:
        raise InitInfeasibleError("no feasible topology exists")
    return min(candidates, key=_rank)


def compress_ports(
    topo: LogicalTopology, dag: ReducedDag, bandwidth: float, makespan_cap: float
) -> LogicalTopology:
    """Drop circuits one at a time while the simulated makespan stays capped."""
    current = topo
    limit = makespan_cap * (1 + MAKESPAN_TOL)
    changed = True
    while changed:
        changed = False
        for i, j in dag.active_pairs():
            while current.x[i, j] > 1:
                x = current.x.copy()
                x[i, j] -= 1
                x[j, i] -= 1
                trial = LogicalTopology(x, current.port_caps)
                if simulate(trial, dag, bandwidth).makespan > limit:
                    break
                current, changed = trial, True
    return current


#####################
# PRIVATE FUNCTIONS #
#####################
def _rank(individual: Individual) -> tuple[float, int, Genes]:
    return (individual.makespan, individual.ports, individual.genes)


def _tournament(
    scored: list[Individual], size: int, rng: np.random.Generator
) -> Individual:
    picks = rng.integers(len(scored), size=size)
    return min((scored[int(index)] for index in picks), key=_rank)
