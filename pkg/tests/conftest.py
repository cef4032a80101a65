import logging
import os
import shutil

import numpy as np
import pytest

import delta
from delta.config import create_default_config
from delta.dag import ReducedDag, reduce_dag
from delta.workload import (
    CommTask,
    ParallelConfig,
    TaskKind,
    build_workload,
    load_workload_config,
    round_robin_placement,
)

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")
SMALL_CONFIG = os.path.join(CONFIG_DIR, "gpt_4pod.json")
DESK_CONFIGS = [
    os.path.join(CONFIG_DIR, f"{name}.json")
    for name in (
        "megatron_177b_desk",
        "mixtral_8x22b_desk",
        "megatron_462b_desk",
        "deepseek_671b_desk",
    )
]

SOLVER_ON_PATH = any(shutil.which(name) for name in ("highs", "cbc"))
needs_solver = pytest.mark.skipif(
    not SOLVER_ON_PATH, reason="no LP solver (highs or cbc) on PATH"
)


def make_dag(specs, deps=(), num_pods=2):
    """ReducedDag from (src_pod, dst_pod, volume, src_gpus, dst_gpus) tuples.

    Task ids start at 1 in list order. A virtual source feeds every task
    without predecessors and a virtual sink follows every task without
    successors.
    """
    tasks = [CommTask(0, TaskKind.VIRTUAL_SOURCE, -1, -1, 0, 0.0)]
    for task_id, (src, dst, volume, src_gpus, dst_gpus) in enumerate(specs, start=1):
        tasks.append(
            CommTask(
                task_id,
                TaskKind.PP_FWD,
                src,
                dst,
                len(src_gpus),
                volume,
                frozenset(src_gpus),
                frozenset(dst_gpus),
                replica=0,
                stage=0,
                micro_batch=task_id,
            )
        )
    sink = len(tasks)
    tasks.append(CommTask(sink, TaskKind.VIRTUAL_SINK, -1, -1, 0, 0.0))
    edges = list(deps)
    has_pred = {succ for _, succ, _ in edges}
    has_succ = {pre for pre, _, _ in edges}
    for task_id in range(1, sink):
        if task_id not in has_pred:
            edges.append((0, task_id, 0.0))
        if task_id not in has_succ:
            edges.append((task_id, sink, 0.0))
    return ReducedDag(tasks, edges, num_pods)


@pytest.fixture
def chain_dag():
    """A (pod 0 -> 1) then B (pod 1 -> 0), 0.5 ms apart, 1 ms each at 400 Gb/s."""
    return make_dag(
        [(0, 1, 0.4, [0], [1]), (1, 0, 0.4, [1], [0])],
        deps=[(1, 2, 0.5)],
    )


@pytest.fixture
def parallel_dag():
    """Two independent single-flow transfers on the same pod pair."""
    return make_dag([(0, 1, 0.4, [0], [2]), (0, 1, 0.4, [1], [3])])


@pytest.fixture
def small_job():
    cfg, place = load_workload_config(SMALL_CONFIG)
    full, tasks = build_workload(cfg, place)
    return cfg, place, full, reduce_dag(full)


@pytest.fixture
def small_dag(small_job):
    return small_job[3]


@pytest.fixture
def mirror_job():
    """Two replicas sharing two pods, each the pod-swapped twin of the other."""
    cfg = ParallelConfig(
        tp=2,
        pp=2,
        dp=2,
        num_micro_batches=4,
        num_pods=2,
        gpus_per_pod_per_replica=2,
        fwd_compute_ms=1.0,
        bwd_compute_ms=2.0,
        pp_volume_Gb=0.4,
        dp_volume_Gb=4.0,
        name="mirror",
    )
    place = round_robin_placement(cfg)
    full, _ = build_workload(cfg, place)
    return cfg, place, full, reduce_dag(full)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture
def settings_file(monkeypatch, tmp_path):
    settings = tmp_path / "delta.cfg"
    monkeypatch.setattr(delta.config, "CONFIG_FILE", str(settings))
    monkeypatch.delenv(delta.SOLVER_ENV_VAR, raising=False)
    create_default_config()
    return str(settings)


@pytest.fixture(autouse=True)
def package_logger():
    """Undo setup_logging so caplog keeps seeing package records."""
    yield
    logger = logging.getLogger("delta")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.propagate = True
    logger.setLevel(logging.NOTSET)
