"""
Experiment orchestration: one optimization pipeline per sweep cell.

A cell is (workload, sequence length, bandwidth). Each cell builds and
reduces its workload, profiles it on a full-port network, derives anchors
and bounds, runs every requested algorithm, and re-simulates each resulting
topology against the ideal network to get its NCT.
"""

import logging
import math
import os
import time

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from delta import (
    ALGORITHMS,
    BASELINE_ALGORITHMS,
    DEFAULT_BANDWIDTH,
    MILP_ALGORITHMS,
    __version__,
)
from delta.baselines import BASELINES, TrafficMatrix
from delta.config import Config
from delta.dag import (
    ReducedDag,
    project_single_replica,
    reduce_dag,
    replica_pod_maps,
)
from delta.des import (
    Anchors,
    LogicalTopology,
    SimTrace,
    derive_anchors,
    full_port_topology,
    nct,
    simulate,
)
from delta.errors import (
    ConfigError,
    DeltaError,
    SolverUnavailableError,
    UnknownAlgorithmError,
)
from delta.heuristic import GaParams, GaResult, TopologySpace, compress_ports, run_ga
from delta.helper import read_json, write_json
from delta.lp_io import (
    default_solver_cmd,
    lexicographic_minimize_ports,
    solve,
    solver_available,
)
from delta.milp import (
    Solution,
    build_var_interval_model,
    extract_topology,
    hot_start_from_trace,
)
from delta.pruning import (
    CircuitUpperBounds,
    IndexBounds,
    task_time_index_pruning,
    x_upper_bound,
)
from delta.workload import (
    ParallelConfig,
    Placement,
    build_workload,
    load_workload_config,
    reversed_placement,
)

logger = logging.getLogger(__name__)

REPORT_ALGORITHMS = ALGORITHMS + ("ideal",)
REPORT_COLUMNS = [
    "workload",
    "seq_len",
    "bandwidth",
    "algorithm",
    "nct",
    "makespan_ms",
    "total_ports",
    "port_ratio",
    "milp_objective",
    "status",
]
MAKESPAN_TOL = 1e-9


###########
# CLASSES #
###########
@dataclass
class ExperimentSpec:
    workloads: list[str]
    algorithms: list[str] = field(default_factory=lambda: list(BASELINE_ALGORITHMS))
    bandwidths: list[float] = field(default_factory=lambda: [DEFAULT_BANDWIDTH])
    seq_lens: list[int] = field(default_factory=list)
    solver_cmd: str = ""
    timeout_s: Optional[float] = None
    output_dir: str = ""
    seed: int = 0
    workers: Optional[int] = None
    population: Optional[int] = None
    generations: Optional[int] = None
    hot_start: bool = False
    min_ports: bool = False
    name: str = "experiment"

    def validate(self) -> None:
        if not self.workloads:
            raise ConfigError("experiment lists no workloads")
        if not self.algorithms:
            raise ConfigError("experiment lists no algorithms")
        unknown = [algo for algo in self.algorithms if algo not in REPORT_ALGORITHMS]
        if unknown:
            raise UnknownAlgorithmError(
                f"unknown algorithms {unknown}; choose from {list(REPORT_ALGORITHMS)}"
            )
        if not self.bandwidths or any(bw <= 0 for bw in self.bandwidths):
            raise ConfigError("bandwidth sweep must be non-empty and positive")
        if any(seq <= 0 for seq in self.seq_lens):
            raise ConfigError("sequence lengths must be positive")


@dataclass(frozen=True)
class RunOptions:
    """Everything an algorithm run needs besides the instance itself."""

    solver_cmd: str = ""
    timeout_s: float = 600.0
    ga: GaParams = field(default_factory=GaParams)
    t_up_factor: float = 2.0
    anchor_widening: int = 1
    k_headroom: float = 0.10
    hot_start: bool = False
    min_ports: bool = False
    keep_dir: Optional[str] = None

    @classmethod
    def from_config(cls, config: Config, **overrides) -> "RunOptions":
        ga_keys = {"seed", "population", "generations", "workers"}
        ga_overrides = {key: overrides.pop(key) for key in ga_keys & set(overrides)}
        ga = GaParams.from_config(config, **ga_overrides)
        options = dict(
            solver_cmd=config.solver_cmd,
            timeout_s=config.timeout_s,
            ga=ga,
            t_up_factor=config.t_up_factor,
            anchor_widening=config.anchor_widening,
            k_headroom=config.k_headroom,
        )
        options.update({key: val for key, val in overrides.items() if val is not None})
        if not options["solver_cmd"]:
            options["solver_cmd"] = default_solver_cmd() or ""
        return cls(**options)


@dataclass
class ReferenceReplica:
    """Replica 0 standing in for every data-parallel replica.

    ``pod_maps[r]`` relabels the reference's pods as replica r's, and
    ``port_caps`` is replica 0's own share of every pod's ports.
    """

    dag: ReducedDag
    pod_maps: list[np.ndarray]
    port_caps: np.ndarray
    profile: SimTrace
    anchors: Anchors
    K: int
    x_upper: CircuitUpperBounds

    def lift(self, topo: LogicalTopology, port_caps: Sequence[int]) -> LogicalTopology:
        """Overlay one relabelled copy of the reference topology per replica."""
        x = np.zeros_like(topo.x)
        for perm in self.pod_maps:
            x[np.ix_(perm, perm)] += topo.x
        return LogicalTopology(x, np.asarray(port_caps))


@dataclass
class Instance:
    """A reduced workload plus its profiling results."""

    name: str
    cfg: ParallelConfig
    placement: Placement
    dag: ReducedDag
    port_caps: np.ndarray
    bandwidth: float
    ideal: SimTrace
    profile: SimTrace
    anchors: Anchors
    K: int
    t_up: float
    x_upper: CircuitUpperBounds
    baselines: dict[str, LogicalTopology] = field(default_factory=dict)
    reference: Optional[ReferenceReplica] = None

    @property
    def profile_intervals(self) -> int:
        return self.anchors.K


@dataclass
class Outcome:
    algorithm: str
    topology: Optional[LogicalTopology] = None
    status: str = "ok"
    milp_objective: Optional[float] = None
    ga: Optional[GaResult] = None
    non_optimal_baseline: bool = False
    uncompressed_makespan: Optional[float] = None
    wall_time_s: float = 0.0


####################
# PUBLIC FUNCTIONS #
####################
def load_experiment_spec(path: str) -> ExperimentSpec:
    """Read an experiment JSON file; workload paths are relative to it."""
    data = read_json(path)
    known = {f for f in ExperimentSpec.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown experiment keys in '{path}': {sorted(unknown)}")
    try:
        spec = ExperimentSpec(**data)
    except TypeError as err:
        raise ConfigError(f"Incomplete experiment spec '{path}': {err}") from err
    base = os.path.dirname(os.path.abspath(path))
    spec.workloads = [
        item if os.path.isabs(item) else os.path.join(base, item)
        for item in spec.workloads
    ]
    spec.validate()
    return spec


def prepare_instance(
    cfg: ParallelConfig,
    placement: Placement,
    bandwidth: float,
    options: RunOptions,
    port_caps: Optional[Sequence[int]] = None,
) -> Instance:
    """Build, reduce and profile one workload at one bandwidth."""
    full, _ = build_workload(cfg, placement)
    dag = reduce_dag(full)
    caps = np.asarray(port_caps if port_caps is not None else placement.port_caps(cfg))
    ideal = simulate(None, dag, bandwidth, ideal=True)
    profile = simulate(full_port_topology(dag), dag, bandwidth)
    anchors = derive_anchors(profile, dag)
    K = max(1, math.ceil(anchors.K * (1 + options.k_headroom)))

    tm = TrafficMatrix.from_dag(dag)
    baselines = {
        name: BASELINES[name](tm, caps, dag.active_pairs())
        for name in BASELINE_ALGORITHMS
    }
    slowest = max(
        simulate(topo, dag, bandwidth).makespan for topo in baselines.values()
    )
    t_up = max(options.t_up_factor * profile.makespan, slowest)
    return Instance(
        name=cfg.name,
        cfg=cfg,
        placement=placement,
        dag=dag,
        port_caps=caps,
        bandwidth=bandwidth,
        ideal=ideal,
        profile=profile,
        anchors=anchors,
        K=K,
        t_up=t_up,
        x_upper=x_upper_bound(dag, t_up, bandwidth),
        baselines=baselines,
        reference=(
            _prepare_reference(cfg, placement, dag, bandwidth, t_up, options)
            if port_caps is None
            else None
        ),
    )


def optimize_topology(algorithm: str, inst: Instance, options: RunOptions) -> Outcome:
    """Run one algorithm on a prepared instance."""
    began = time.perf_counter()
    if algorithm in BASELINE_ALGORITHMS:
        outcome = Outcome(algorithm, inst.baselines[algorithm])
    elif algorithm == "fast":
        outcome = _run_fast(inst, options)
    elif algorithm in MILP_ALGORITHMS:
        outcome = _run_milp(algorithm, inst, options)
    else:
        raise UnknownAlgorithmError(f"'{algorithm}' does not produce a topology")
    outcome.wall_time_s = time.perf_counter() - began
    return outcome


def evaluate_topology(inst: Instance, topo: Optional[LogicalTopology]) -> dict:
    """NCT, makespan and port use of a topology.

    None means the ideal network, reported at the full port budget.
    """
    if topo is None:
        trace = inst.ideal
        ports, ratio = int(np.sum(inst.port_caps)), 1.0
    else:
        trace = simulate(topo, inst.dag, inst.bandwidth)
        ports, ratio = topo.total_ports, topo.port_ratio
    return {
        "nct": nct(trace, inst.ideal, inst.dag),
        "makespan_ms": trace.makespan,
        "total_ports": ports,
        "port_ratio": ratio,
        "trace": trace,
    }


def run_experiment(spec: ExperimentSpec, config: Config) -> pd.DataFrame:
    """Sweep every cell, write report files and return the report table."""
    spec.validate()
    options = RunOptions.from_config(
        config,
        seed=spec.seed,
        population=spec.population,
        generations=spec.generations,
        solver_cmd=spec.solver_cmd or None,
        timeout_s=spec.timeout_s,
        hot_start=spec.hot_start,
        min_ports=spec.min_ports,
    )
    workers = spec.workers or config.workers
    out_dir = os.path.join(spec.output_dir or config.output_dir, spec.name)
    cells = []
    for path in spec.workloads:
        cfg, place = load_workload_config(path)
        for seq_len in spec.seq_lens or [cfg.seq_len]:
            for bandwidth in spec.bandwidths:
                cell_cfg = replace(
                    cfg, seq_len=int(seq_len), nic_bandwidth_B=float(bandwidth)
                )
                cells.append((cell_cfg, place, float(bandwidth)))
    wants_milp = any(algo in MILP_ALGORITHMS for algo in spec.algorithms)
    if wants_milp and not solver_available(options.solver_cmd):
        logger.warning("no MILP solver available; topo and joint rows will be skipped")

    def run_cell(cell) -> list[dict]:
        return _run_cell(*cell, spec.algorithms, options, out_dir)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run_cell, cells))
    else:
        results = [run_cell(cell) for cell in cells]
    rows = [row for cell_rows in results for row in cell_rows]
    report = pd.DataFrame(rows)
    write_report(report, out_dir, spec, [_cell_id(*cell) for cell in cells])
    return report


def write_report(
    report: pd.DataFrame, out_dir: str, spec: ExperimentSpec, cells: list[str]
) -> None:
    os.makedirs(out_dir, exist_ok=True)
    report.reindex(columns=REPORT_COLUMNS).to_csv(
        os.path.join(out_dir, "report.csv"), index=False, float_format="%.9g"
    )
    report.to_json(os.path.join(out_dir, "report.json"), orient="records", indent=2)
    write_json(
        os.path.join(out_dir, "manifest.json"),
        {
            "version": __version__,
            "spec": asdict(spec),
            "seed": spec.seed,
            "cells": cells,
        },
    )
    logger.info(f"wrote {len(report)} report rows to {out_dir}")


def port_reallocation_scenario(
    cfg: ParallelConfig,
    placement: Placement,
    algorithm: str,
    options: RunOptions,
    bandwidth: float = DEFAULT_BANDWIDTH,
) -> pd.DataFrame:
    """Compress A's ports, hand the surplus to the reversed layout A^T.

    Reports A, A^T on its plain port budget, and A^T with A's freed ports
    added to each pod's budget. A^T+freed falls back to the A^T topology
    when the search on the larger budget comes back slower.
    """
    if algorithm not in ("fast",) + MILP_ALGORITHMS:
        raise UnknownAlgorithmError(
            f"'{algorithm}' cannot minimize ports; use fast, topo or joint"
        )
    compressing = replace(options, min_ports=True)
    inst_a = prepare_instance(cfg, placement, bandwidth, compressing)
    outcome_a = optimize_topology(algorithm, inst_a, compressing)
    if outcome_a.topology is None:
        raise DeltaError(
            f"{algorithm} found no topology for {cfg.name}: {outcome_a.status}"
        )
    row_a = evaluate_topology(inst_a, outcome_a.topology)
    limit = outcome_a.uncompressed_makespan
    if limit is not None and row_a["makespan_ms"] > limit * (1 + MAKESPAN_TOL):
        raise DeltaError(f"freeing ports lengthened {cfg.name}'s makespan")
    freed = inst_a.port_caps - outcome_a.topology.port_usage()

    transposed = reversed_placement(cfg, placement)
    plain_caps = transposed.port_caps(cfg)
    rows = [_realloc_row("A", cfg.name, row_a, inst_a.port_caps, freed)]
    plain: Optional[tuple[LogicalTopology, dict]] = None
    for label, caps in (("A^T", plain_caps), ("A^T+freed", plain_caps + freed)):
        inst_t = prepare_instance(cfg, transposed, bandwidth, options, port_caps=caps)
        outcome_t = optimize_topology(algorithm, inst_t, options)
        if outcome_t.topology is None:
            raise DeltaError(
                f"{algorithm} found no topology for {label}: {outcome_t.status}"
            )
        metrics = evaluate_topology(inst_t, outcome_t.topology)
        if plain is not None and metrics["makespan_ms"] > plain[1]["makespan_ms"]:
            # the plain topology still fits the larger budget
            logger.info(f"{label}: search fell short of A^T, keeping its topology")
            metrics = evaluate_topology(inst_t, plain[0].with_caps(caps))
        plain = (outcome_t.topology, metrics)
        rows.append(_realloc_row(label, cfg.name, metrics, caps))
    return pd.DataFrame(rows)


#####################
# PRIVATE FUNCTIONS #
#####################
def _cell_id(cfg: ParallelConfig, place: Placement, bandwidth: float) -> str:
    return f"{cfg.name}_seq{cfg.seq_len}_bw{bandwidth:g}"


def _run_cell(
    cfg: ParallelConfig,
    place: Placement,
    bandwidth: float,
    algorithms: Sequence[str],
    options: RunOptions,
    out_dir: str,
) -> list[dict]:
    cell = _cell_id(cfg, place, bandwidth)
    base = {"workload": cfg.name, "seq_len": cfg.seq_len, "bandwidth": bandwidth}
    try:
        inst = prepare_instance(cfg, place, bandwidth, options)
    except DeltaError as err:
        logger.error(f"{cell}: {err}")
        return [
            {**base, "algorithm": algo, "status": f"error: {err}"}
            for algo in algorithms
        ]

    rows = []
    for algo in algorithms:
        row = {**base, "algorithm": algo, "milp_objective": None, "wall_time_s": 0.0}
        try:
            if algo == "ideal":
                metrics = evaluate_topology(inst, None)
                row["status"] = "ok"
            else:
                outcome = optimize_topology(algo, inst, options)
                row["status"] = outcome.status
                row["milp_objective"] = outcome.milp_objective
                row["wall_time_s"] = outcome.wall_time_s
                if outcome.topology is None:
                    rows.append(row)
                    continue
                metrics = evaluate_topology(inst, outcome.topology)
                write_json(
                    os.path.join(out_dir, "topologies", f"{cell}_{algo}.json"),
                    outcome.topology.to_dict(),
                )
                if outcome.ga is not None:
                    path = os.path.join(out_dir, "convergence", f"{cell}_{algo}.csv")
                    os.makedirs(os.path.dirname(path), exist_ok=True)
                    outcome.ga.history_frame().to_csv(path, index=False)
        except SolverUnavailableError as err:
            row["status"] = f"skipped: {err}"
            rows.append(row)
            continue
        except DeltaError as err:
            logger.error(f"{cell} {algo}: {err}")
            row["status"] = f"error: {err}"
            rows.append(row)
            continue
        trace = metrics.pop("trace")
        trace_path = os.path.join(out_dir, "traces", f"{cell}_{algo}.json")
        write_json(trace_path, trace.to_dict())
        row.update(metrics)
        rows.append(row)
    logger.info(f"{cell}: {len(rows)} rows")
    return rows


def _prepare_reference(
    cfg: ParallelConfig,
    placement: Placement,
    dag: ReducedDag,
    bandwidth: float,
    t_up: float,
    options: RunOptions,
) -> Optional[ReferenceReplica]:
    """Project homogeneous replicas onto replica 0 when pods relabel cleanly."""
    if cfg.dp <= 1:
        return None
    try:
        projection = project_single_replica(dag, cfg.dp)
    except ConfigError as err:
        logger.debug(f"{cfg.name}: no single-replica projection: {err}")
        return None
    pod_maps = replica_pod_maps(dag, projection)
    if pod_maps is None:
        logger.debug(f"{cfg.name}: replicas are not pod relabellings of replica 0")
        return None
    ref_caps = placement.replica_port_caps(cfg, 0)
    for replica, perm in enumerate(pod_maps):
        share = placement.replica_port_caps(cfg, replica)
        if not np.array_equal(share[perm], ref_caps):
            logger.debug(f"{cfg.name}: replica {replica} holds a different port share")
            return None
    reference = projection.reference
    if any(ref_caps[i] == 0 or ref_caps[j] == 0 for i, j in reference.active_pairs()):
        logger.debug(f"{cfg.name}: replica 0 talks to pods where it owns no ports")
        return None

    profile = simulate(full_port_topology(reference), reference, bandwidth)
    anchors = derive_anchors(profile, reference)
    logger.info(
        f"{cfg.name}: optimizing replica 0 ({len(reference)} of {len(dag)} tasks)"
        f" for {cfg.dp} replicas"
    )
    return ReferenceReplica(
        dag=reference,
        pod_maps=pod_maps,
        port_caps=ref_caps,
        profile=profile,
        anchors=anchors,
        K=max(1, math.ceil(anchors.K * (1 + options.k_headroom))),
        x_upper=x_upper_bound(reference, t_up, bandwidth),
    )


def _run_fast(inst: Instance, options: RunOptions) -> Outcome:
    space = TopologySpace.from_dag(inst.dag, inst.port_caps, inst.x_upper)
    seeds = list(inst.baselines.values()) if options.ga.seed_baselines else []
    result = run_ga(inst.dag, space, options.ga, inst.bandwidth, seeds=seeds)
    outcome = Outcome("fast", result.topology, ga=result)
    if options.min_ports:
        outcome.uncompressed_makespan = result.best.makespan
        outcome.topology = compress_ports(
            result.topology, inst.dag, inst.bandwidth, result.best.makespan
        )
        after = simulate(outcome.topology, inst.dag, inst.bandwidth).makespan
        if after > result.best.makespan * (1 + MAKESPAN_TOL):
            raise AssertionError("port compression lengthened the makespan")
    return outcome


def _run_milp(algorithm: str, inst: Instance, options: RunOptions) -> Outcome:
    if not solver_available(options.solver_cmd):
        raise SolverUnavailableError("no MILP solver on PATH")
    ref = inst.reference
    anchors, K, start_trace, start_topo = inst.anchors, inst.K, None, None
    if options.hot_start and algorithm == "joint":
        # the GA start lives on the full DAG
        ref = None
        fast = _run_fast(inst, replace(options, min_ports=False))
        start_topo = fast.topology
        start_trace = simulate(start_topo, inst.dag, inst.bandwidth)
        anchors = derive_anchors(start_trace, inst.dag)
        K = max(K, anchors.K)
    dag, caps, x_upper = inst.dag, inst.port_caps, inst.x_upper
    min_intervals = inst.profile_intervals
    if ref is not None:
        dag, caps, x_upper = ref.dag, ref.port_caps, ref.x_upper
        anchors, K, min_intervals = ref.anchors, ref.K, ref.anchors.K

    bounds: IndexBounds = task_time_index_pruning(
        dag, K, anchors, widen=options.anchor_widening
    )
    t_up = max(inst.t_up, start_trace.makespan if start_trace else 0.0)
    model = build_var_interval_model(
        dag,
        caps,
        inst.bandwidth,
        K,
        t_up,
        bounds=bounds,
        x_upper=x_upper,
        fairness=algorithm == "topo",
        min_intervals=min_intervals,
    )
    start = None
    if start_trace is not None:
        start = hot_start_from_trace(start_trace, start_topo, model)
    solution: Solution = solve(
        model,
        options.solver_cmd,
        options.timeout_s,
        start=start,
        keep_dir=options.keep_dir,
    )
    if not solution.has_values:
        return Outcome(algorithm, status=solution.status.value)

    def to_instance(sol: Solution) -> LogicalTopology:
        topo = extract_topology(sol, caps)
        return ref.lift(topo, inst.port_caps) if ref is not None else topo

    outcome = Outcome(
        algorithm,
        to_instance(solution),
        status=solution.status.value,
        milp_objective=solution.objective,
    )
    if options.min_ports:
        second = lexicographic_minimize_ports(
            model,
            solution,
            options.solver_cmd,
            options.timeout_s,
            keep_dir=options.keep_dir,
        )
        outcome.non_optimal_baseline = second.non_optimal_baseline
        before = simulate(outcome.topology, inst.dag, inst.bandwidth).makespan
        outcome.uncompressed_makespan = before
        if second.has_values:
            compressed = to_instance(second)
            after = simulate(compressed, inst.dag, inst.bandwidth).makespan
            if after > before * (1 + MAKESPAN_TOL):
                logger.warning(
                    f"{inst.name}: fewer ports stretched the makespan from"
                    f" {before:.6g} to {after:.6g} ms; keeping the first topology"
                )
            else:
                outcome.topology = compressed
    return outcome


def _realloc_row(
    label: str,
    workload: str,
    metrics: dict,
    caps: np.ndarray,
    freed: Optional[np.ndarray] = None,
) -> dict:
    return {
        "scenario": label,
        "workload": workload,
        "nct": metrics["nct"],
        "makespan_ms": metrics["makespan_ms"],
        "total_ports": metrics["total_ports"],
        "port_budget": int(np.sum(caps)),
        "freed_ports": int(np.sum(freed)) if freed is not None else 0,
    }
