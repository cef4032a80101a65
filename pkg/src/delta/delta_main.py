#!/usr/bin/python3

"""
delta - OCS logical topology optimizer for LLM training jobs.

Subcommands build workloads, simulate topologies, derive pruning bounds,
optimize topologies and run experiment sweeps.
"""

import argparse
import logging
import math
import os
import sys

from dataclasses import replace
from typing import Callable, Optional

import click
import pandas as pd
from colorama import Fore, Style

# allow for this file to be run from source tree root
sys.path.append("src")

import delta
from delta.config import Config, load_config
from delta.dag import ReducedDag, reduce_dag
from delta.des import LogicalTopology, SimTrace, derive_anchors, nct, simulate
from delta.errors import (
    ConfigError,
    CycleError,
    DeltaError,
    InfeasibleError,
    SolverUnavailableError,
)
from delta.experiment import (
    RunOptions,
    evaluate_topology,
    load_experiment_spec,
    optimize_topology,
    port_reallocation_scenario,
    prepare_instance,
    run_experiment,
)
from delta.helper import (
    disp_table,
    parse_float_list,
    read_json,
    setup_logging,
    show_summary,
    write_json,
)
from delta.pruning import task_time_index_pruning, x_upper_bound
from delta.workload import build_workload, load_workload_config

logger = logging.getLogger("delta")

# fmt: off
WELCOME_MSG = (
f"""delta {delta.__version__}: OCS topology optimization for LLM training.""")
# fmt: on

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_INFEASIBLE = 4


def main(argv: Optional[list[str]] = None) -> int:
    args: argparse.Namespace = parse_args(argv)
    config: Config = load_config(args.settings)
    setup_logging(args.log_level or config.log_level)
    try:
        args.handler(args, config)
    except (ConfigError, CycleError) as err:
        logger.error(err)
        return EXIT_CONFIG
    except SolverUnavailableError as err:
        logger.error(err)
        return EXIT_SOLVER
    except InfeasibleError as err:
        logger.error(err)
        return EXIT_INFEASIBLE
    except DeltaError as err:
        logger.error(err)
        return 1
    return EXIT_OK


###############
# SUBCOMMANDS #
###############
def cmd_generate(args: argparse.Namespace, config: Config) -> None:
    """Build the full DAG of a workload and write its reduced form."""
    cfg, place = _load_workload(args)
    full, _ = build_workload(cfg, place)
    dag = reduce_dag(full)
    write_json(args.out, dag.to_dict())
    show_summary(
        {
            "workload": cfg.name,
            "full DAG nodes": full.graph.number_of_nodes(),
            "inter-pod tasks": len(dag.positive_tasks()),
            "dependencies": len(dag.deps),
            "active pod pairs": len(dag.active_pairs()),
            "port caps": place.port_caps(cfg).tolist(),
            "written to": args.out,
        },
        "generate",
    )


def cmd_simulate(args: argparse.Namespace, config: Config) -> None:
    """Run the DES over a reduced DAG on a topology or the ideal network."""
    dag = ReducedDag.from_dict(read_json(args.dag))
    if args.ideal:
        trace = simulate(None, dag, args.bandwidth, ideal=True)
    elif args.topo:
        trace = simulate(_read_topology(args.topo), dag, args.bandwidth)
    else:
        raise ConfigError("simulate needs --topo or --ideal")
    if args.out:
        write_json(args.out, trace.to_dict())
    summary = {
        "makespan (ms)": trace.makespan,
        "events": len(trace.events),
        "tasks": len(dag),
    }
    if not args.ideal:
        ideal = simulate(None, dag, args.bandwidth, ideal=True)
        summary["NCT"] = nct(trace, ideal, dag)
    show_summary(summary, "simulate")


def cmd_prune(args: argparse.Namespace, config: Config) -> None:
    """Derive time-index bounds and circuit caps from a profiling trace."""
    dag = ReducedDag.from_dict(read_json(args.dag))
    trace = SimTrace.from_dict(read_json(args.trace))
    anchors = derive_anchors(trace, dag)
    K = max(1, math.ceil(anchors.K * (1 + config.k_headroom)))
    t_up = config.t_up_factor * trace.makespan
    bounds = task_time_index_pruning(dag, K, anchors, widen=config.anchor_widening)
    x_upper = x_upper_bound(dag, t_up, args.bandwidth)
    payload = {
        "K": K,
        "t_up_ms": t_up,
        "bounds": bounds.to_dict(),
        "x_upper": x_upper.to_dict(),
    }
    if args.out:
        write_json(args.out, payload)
    show_summary(
        {
            "K": K,
            "T_up (ms)": t_up,
            "retained cells": bounds.retained_cells(),
            "of": len(dag.positive_tasks()) * K,
        },
        "prune",
    )


def cmd_optimize(args: argparse.Namespace, config: Config) -> None:
    """Optimize one workload with one algorithm and write the topology."""
    cfg, place = _load_workload(args)
    options = _run_options(args, config)
    inst = prepare_instance(cfg, place, args.bandwidth, options)
    outcome = optimize_topology(args.algo, inst, options)
    if outcome.topology is None:
        raise InfeasibleError(f"{args.algo} returned no topology ({outcome.status})")
    out = args.out or f"{cfg.name}_{args.algo}.json"
    write_json(out, outcome.topology.to_dict())
    if outcome.ga is not None:
        history = os.path.splitext(out)[0] + "_convergence.csv"
        outcome.ga.history_frame().to_csv(history, index=False)
        logger.info(f"convergence history written to {history}")
    metrics = evaluate_topology(inst, outcome.topology)
    summary = {
        "algorithm": args.algo,
        "status": outcome.status,
        "NCT": metrics["nct"],
        "makespan (ms)": metrics["makespan_ms"],
        "ports": f"{metrics['total_ports']} ({metrics['port_ratio']:.1%})",
        "written to": out,
    }
    if outcome.milp_objective is not None:
        summary["MILP objective"] = outcome.milp_objective
    if outcome.non_optimal_baseline:
        summary["note"] = "stage-1 solve was not optimal"
    show_summary(summary, "optimize")


def cmd_evaluate(args: argparse.Namespace, config: Config) -> None:
    """NCT of an existing topology file against the ideal network."""
    cfg, place = _load_workload(args)
    options = _run_options(args, config)
    inst = prepare_instance(cfg, place, args.bandwidth, options)
    topo = _read_topology(args.topo)
    if topo.num_pods != cfg.num_pods:
        raise ConfigError(
            f"topology covers {topo.num_pods} pods, workload has {cfg.num_pods}"
        )
    metrics = evaluate_topology(inst, topo)
    metrics.pop("trace")
    show_summary(metrics, "evaluate")


def cmd_sweep(args: argparse.Namespace, config: Config) -> None:
    """Run an experiment spec and print its report."""
    spec = load_experiment_spec(args.experiment)
    if args.output_dir:
        spec.output_dir = args.output_dir
    if args.workers:
        spec.workers = args.workers
    if args.bandwidths:
        spec.bandwidths = parse_float_list(args.bandwidths)
    report = run_experiment(spec, config)
    _show_report(report, f"{spec.name}: {len(report)} rows")


def cmd_realloc(args: argparse.Namespace, config: Config) -> None:
    """Compress a workload's ports, then give the surplus to its reversed layout."""
    cfg, place = _load_workload(args)
    options = _run_options(args, config)
    table = port_reallocation_scenario(cfg, place, args.algo, options, args.bandwidth)
    if args.out:
        table.to_csv(args.out, index=False)
    disp_table(table, "port reallocation", [12, 22, 10, 14, 12, 12, 12])


def cmd_config(args: argparse.Namespace, config: Config) -> None:  # pragma: no cover
    """Edit the delta.cfg settings file."""
    try:
        click.edit(filename=config.source_file, editor="vim")
    # try without specifying vim
    except click.exceptions.ClickException:
        try:
            click.edit(filename=config.source_file)
        except Exception as exc:
            print("Failed to edit config: ", exc)


def parse_args(argv: Optional[list[str]] = None) -> argparse.Namespace:
    """Initialize the argument parser and available command line arguments.
    Return the argument namespace."""
    parser = argparse.ArgumentParser(prog="delta", description=WELCOME_MSG)
    parser.add_argument(
        "--settings", help="tool settings file (default ~/.delta/delta.cfg)"
    )
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler: Callable, **kwargs) -> argparse.ArgumentParser:
        cmd_parser = sub.add_parser(name, help=handler.__doc__, **kwargs)
        cmd_parser.set_defaults(handler=handler)
        return cmd_parser

    gen = command("generate", cmd_generate)
    _workload_args(gen)
    gen.add_argument("--out", required=True, help="reduced DAG JSON to write")

    sim = command("simulate", cmd_simulate)
    sim.add_argument("--dag", required=True, help="reduced DAG JSON")
    sim.add_argument("--topo", help="logical topology JSON")
    sim.add_argument("--ideal", action="store_true", help="unlimited inter-pod links")
    sim.add_argument("--out", help="trace JSON to write")
    _bandwidth_arg(sim)

    prune = command("prune", cmd_prune)
    prune.add_argument("--dag", required=True, help="reduced DAG JSON")
    prune.add_argument("--trace", required=True, help="profiling trace JSON")
    prune.add_argument("--out", help="bounds JSON to write")
    _bandwidth_arg(prune)

    opt = command("optimize", cmd_optimize)
    _workload_args(opt)
    _algorithm_args(opt, delta.ALGORITHMS)
    opt.add_argument("--out", help="topology JSON to write")

    ev = command("evaluate", cmd_evaluate)
    _workload_args(ev)
    ev.add_argument("--topo", required=True, help="logical topology JSON")

    sweep = command("sweep", cmd_sweep)
    sweep.add_argument("experiment", help="experiment spec JSON")
    sweep.add_argument("--output-dir", help="overrides the spec's output directory")
    sweep.add_argument("--workers", type=int, help="concurrent sweep cells")
    sweep.add_argument(
        "--bandwidths", help="comma separated Gb/s values, e.g. 100,200,400"
    )

    realloc = command("realloc", cmd_realloc)
    _workload_args(realloc)
    _algorithm_args(realloc, ("fast",) + delta.MILP_ALGORITHMS, default="fast")
    realloc.add_argument("--out", help="CSV to write")

    command("config", cmd_config)

    return parser.parse_args(argv)


#####################
# PRIVATE FUNCTIONS #
#####################
def _bandwidth_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--bandwidth",
        type=float,
        default=delta.DEFAULT_BANDWIDTH,
        help="per-GPU inter-pod bandwidth in Gb/s",
    )


def _workload_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="workload config JSON")
    parser.add_argument("--seq-len", type=int, help="overrides the workload's seq_len")
    _bandwidth_arg(parser)


def _algorithm_args(parser: argparse.ArgumentParser, choices, default=None) -> None:
    parser.add_argument(
        "--algo", choices=choices, default=default, required=default is None
    )
    parser.add_argument("--solver-cmd", help="solver command template")
    parser.add_argument("--timeout", type=float, help="solver time limit in seconds")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--pop", type=int, help="GA population")
    parser.add_argument("--gens", type=int, help="GA generations")
    parser.add_argument(
        "--hot-start", action="store_true", help="seed joint with the GA result"
    )
    parser.add_argument("--min-ports", action="store_true", help="then minimize ports")
    parser.add_argument("--keep-dir", help="keep solver files in this directory")


def _load_workload(args: argparse.Namespace):
    cfg, place = load_workload_config(args.config)
    overrides = {"nic_bandwidth_B": args.bandwidth}
    if args.seq_len:
        overrides["seq_len"] = args.seq_len
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg, place


def _run_options(args: argparse.Namespace, config: Config) -> RunOptions:
    return RunOptions.from_config(
        config,
        seed=getattr(args, "seed", None),
        population=getattr(args, "pop", None),
        generations=getattr(args, "gens", None),
        solver_cmd=getattr(args, "solver_cmd", None),
        timeout_s=getattr(args, "timeout", None),
        hot_start=getattr(args, "hot_start", False),
        min_ports=getattr(args, "min_ports", False),
        keep_dir=getattr(args, "keep_dir", None),
    )


def _read_topology(path: str) -> LogicalTopology:
    topo = LogicalTopology.from_dict(read_json(path))
    topo.validate()
    return topo


def _show_report(report: pd.DataFrame, title: str) -> None:  # pragma: no cover
    columns = [
        "workload",
        "seq_len",
        "bandwidth",
        "algorithm",
        "nct",
        "makespan_ms",
        "total_ports",
        "status",
    ]
    disp_table(report.reindex(columns=columns), title, delta.REPORT_COL_WIDTHS)
    failed = report[report["status"].astype(str).str.match(r"(error|skipped)")]
    if len(failed):
        print(
            f"{Fore.YELLOW}{len(failed)} rows did not finish cleanly{Style.RESET_ALL}"
        )


if __name__ == "__main__":
    sys.exit(main())
