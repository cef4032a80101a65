import dataclasses
import itertools

import numpy as np
import pytest

from conftest import make_dag
from delta.dag import ReducedDag, reduce_dag
from delta.des import (
    LogicalTopology,
    SimTrace,
    critical_path,
    derive_anchors,
    full_port_topology,
    max_min_share,
    nct,
    simulate,
    water_fill,
)
from delta.errors import (
    ConfigError,
    InfeasibleError,
    UndefinedMetricError,
    UnroutableTaskError,
)
from delta.heuristic import TopologySpace, enumerate_topologies
from delta.pruning import cal_task_time_windows
from delta.workload import ParallelConfig, build_workload, round_robin_placement


def one_link(circuits: int = 1, caps=(4, 4)) -> LogicalTopology:
    return LogicalTopology.from_pairs(caps, {(0, 1): circuits})


def test_topology_properties():
    topo = one_link(2)
    assert topo.total_ports == 4
    assert topo.port_ratio == pytest.approx(0.5)
    assert topo.port_usage().tolist() == [2, 2]
    assert LogicalTopology.from_dict(topo.to_dict()).total_ports == 4


@pytest.mark.parametrize(
    "x, caps, error",
    [
        ([[0, 1]], [1, 1], ConfigError),
        ([[0, -1], [-1, 0]], [1, 1], InfeasibleError),
        ([[0, 1], [0, 0]], [1, 1], InfeasibleError),
        ([[1, 0], [0, 0]], [1, 1], InfeasibleError),
        ([[0, 2], [2, 0]], [1, 2], InfeasibleError),
    ],
)
def test_invalid_topologies(x, caps, error):
    with pytest.raises(error):
        LogicalTopology(np.array(x), np.array(caps))


def test_water_fill():
    rates = water_fill([(10.0, {1: 1.0, 2: 1.0}), (2.0, {1: 1.0})])
    assert rates[1] == pytest.approx(2.0)
    assert rates[2] == pytest.approx(8.0)


def test_shared_link_splits_fairly(parallel_dag):
    share = max_min_share([1, 2], parallel_dag, one_link(1), 400.0)
    assert share == pytest.approx({1: 200.0, 2: 200.0})
    ideal = max_min_share([1, 2], parallel_dag, None, 400.0, ideal=True)
    assert ideal == pytest.approx({1: 400.0, 2: 400.0})


def test_shared_nic_limits_ideal_rate():
    dag = make_dag([(0, 1, 0.4, [0], [1]), (0, 1, 0.4, [0], [2])])
    share = max_min_share([1, 2], dag, None, 400.0, ideal=True)
    assert share == pytest.approx({1: 200.0, 2: 200.0})


def test_chain_ideal_trace(chain_dag):
    trace = simulate(None, chain_dag, 400.0, ideal=True)
    assert trace.makespan == pytest.approx(2.5)
    assert trace.events == pytest.approx((0.0, 1.0, 1.5, 2.5))
    assert trace.start[2] == pytest.approx(1.5)
    assert trace.interval_volumes[1] == {1: pytest.approx(0.4)}
    anchors = derive_anchors(trace, chain_dag)
    assert anchors.K == 3
    assert anchors.bounds == {1: (1, 1), 2: (3, 3)}
    assert anchors.max_width() == 1


def test_one_circuit_slows_parallel_tasks(parallel_dag):
    ideal = simulate(None, parallel_dag, 400.0, ideal=True)
    ocs = simulate(one_link(1), parallel_dag, 400.0)
    assert ideal.makespan == pytest.approx(1.0)
    assert ocs.makespan == pytest.approx(2.0)
    assert nct(ocs, ideal, parallel_dag) == pytest.approx(2.0)
    assert simulate(one_link(2), parallel_dag, 400.0).makespan == pytest.approx(1.0)


def test_missing_circuits(chain_dag):
    empty = LogicalTopology(np.zeros((2, 2), dtype=int), np.array([4, 4]))
    with pytest.raises(UnroutableTaskError):
        simulate(empty, chain_dag, 400.0)
    with pytest.raises(ConfigError):
        simulate(None, chain_dag, 400.0)
    with pytest.raises(ConfigError):
        simulate(LogicalTopology.from_pairs([2, 2, 2], {(0, 1): 1}), chain_dag, 400.0)


def test_nct_needs_communication(chain_dag):
    trace = simulate(None, chain_dag, 400.0, ideal=True)
    silent = SimTrace(
        start=np.zeros(4), completion=np.zeros(4), events=(0.0,), makespan=0.0
    )
    with pytest.raises(UndefinedMetricError):
        nct(trace, silent, chain_dag)


def test_critical_path(chain_dag):
    trace = simulate(one_link(1), chain_dag, 400.0)
    assert critical_path(trace, chain_dag) == [0, 1, 2]


def test_trace_document(chain_dag):
    trace = simulate(None, chain_dag, 400.0, ideal=True)
    again = SimTrace.from_dict(trace.to_dict())
    assert again.events == trace.events
    assert again.ideal is True
    assert again.interval_volumes[2] == {3: pytest.approx(0.4)}
    with pytest.raises(ConfigError):
        SimTrace.from_dict({"events": []})
    with pytest.raises(ValueError):
        trace.event_index(0.7)
    assert trace.event_index(1.5) == 2


def test_full_port_topology(small_dag):
    topo = full_port_topology(small_dag)
    trace = simulate(topo, small_dag, 400.0)
    ideal = simulate(None, small_dag, 400.0, ideal=True)
    assert trace.makespan == pytest.approx(ideal.makespan)
    x = topo.x + (topo.x > 0)
    wider = LogicalTopology(x, x.sum(axis=1))
    assert simulate(wider, small_dag, 400.0).makespan == pytest.approx(ideal.makespan)


def one_circuit_topology(dag: ReducedDag) -> LogicalTopology:
    caps = np.zeros(dag.num_pods, dtype=int)
    for i, j in dag.active_pairs():
        caps[i] += 1
        caps[j] += 1
    return LogicalTopology.from_pairs(caps, {pair: 1 for pair in dag.active_pairs()})


def test_nct_on_small_job(small_dag):
    ideal = simulate(None, small_dag, 400.0, ideal=True)
    full = simulate(full_port_topology(small_dag), small_dag, 400.0)
    assert nct(full, ideal, small_dag) == pytest.approx(1.0)

    trace = simulate(one_circuit_topology(small_dag), small_dag, 400.0)
    assert nct(trace, ideal, small_dag) > 0
    path = critical_path(trace, small_dag)
    assert not small_dag.predecessors(path[0])
    assert trace.start[path[0]] == 0.0
    assert trace.completion[path[-1]] == pytest.approx(trace.makespan)
    delays = {(pre, succ): delta for pre, succ, delta in small_dag.deps}
    waits = sum(delays[pair] for pair in zip(path, path[1:]))
    busy = sum(trace.completion[m] - trace.start[m] for m in path)
    assert busy + waits == pytest.approx(trace.makespan)


def test_traces_stay_inside_time_windows(small_dag):
    for trace in (
        simulate(None, small_dag, 400.0, ideal=True),
        simulate(one_circuit_topology(small_dag), small_dag, 400.0),
    ):
        windows = cal_task_time_windows(small_dag, 400.0, trace.makespan)
        assert (trace.start >= windows.est - 1e-6).all()
        assert (trace.completion <= windows.lct + 1e-6).all()


def test_gpu_numbering_does_not_matter(small_dag):
    def renumber(gpus):
        return frozenset(10_000 - gpu for gpu in gpus)

    tasks = [
        dataclasses.replace(
            task, src_gpus=renumber(task.src_gpus), dst_gpus=renumber(task.dst_gpus)
        )
        for task in small_dag.tasks
    ]
    renamed = ReducedDag(tasks, small_dag.deps, small_dag.num_pods)
    topo = one_circuit_topology(small_dag)
    before = simulate(topo, small_dag, 400.0)
    after = simulate(topo, renamed, 400.0)
    assert after.makespan == pytest.approx(before.makespan)
    assert after.completion == pytest.approx(before.completion)
    ideal = simulate(None, small_dag, 400.0, ideal=True)
    renamed_ideal = simulate(None, renamed, 400.0, ideal=True)
    assert nct(after, renamed_ideal, renamed) == pytest.approx(
        nct(before, ideal, small_dag)
    )


def test_ideal_makespan_shrinks_with_bandwidth(small_dag):
    spans = [
        simulate(None, small_dag, bandwidth, ideal=True).makespan
        for bandwidth in (100.0, 200.0, 400.0, 800.0)
    ]
    assert all(later <= earlier + 1e-9 for earlier, later in zip(spans, spans[1:]))


@pytest.mark.parametrize(
    "dag",
    [
        make_dag(
            [
                (0, 1, 0.8, [0, 1], [2, 3]),
                (0, 2, 0.4, [4], [5]),
                (1, 2, 0.8, [6, 7], [8, 9]),
                (0, 1, 0.4, [10], [11]),
            ],
            num_pods=3,
        ),
        make_dag(
            [
                (0, 1, 0.4, [0], [1]),
                (1, 2, 0.8, [1, 2], [3, 4]),
                (2, 0, 0.4, [3], [0]),
            ],
            deps=[(1, 2, 0.5), (2, 3, 0.0)],
            num_pods=3,
        ),
    ],
    ids=["independent", "chain"],
)
def test_extra_circuits_never_hurt_uncontended_dags(dag):
    space = TopologySpace.from_dag(dag, [4, 4, 4])
    spans = {
        genes: simulate(space.to_topology(genes), dag, 400.0).makespan
        for genes in enumerate_topologies(space)
    }
    assert len(spans) > 1
    for genes, span in spans.items():
        for index in range(len(genes)):
            more = genes[:index] + (genes[index] + 1,) + genes[index + 1 :]
            if more in spans:
                assert spans[more] <= span + 1e-9


def test_extra_circuit_can_lengthen_makespan():
    # A second (0, 1) circuit lets B start alongside C on (0, 2), which
    # delays C and the F behind it.
    dag = make_dag(
        [
            (0, 1, 0.4, [0], [1]),
            (0, 1, 0.4, [2], [3]),
            (0, 2, 0.4, [4], [5]),
            (1, 2, 0.4, [8], [9]),
            (0, 2, 0.6, [6], [7]),
            (1, 2, 0.8, [10], [11]),
        ],
        deps=[(1, 3, 0.0), (4, 5, 0.0), (5, 6, 0.0)],
        num_pods=3,
    )

    def run(circuits_01):
        circuits = {(0, 1): circuits_01, (0, 2): 1, (1, 2): 1}
        return simulate(LogicalTopology.from_pairs([4, 4, 4], circuits), dag, 400.0)

    one, two = run(1), run(2)
    assert one.makespan == pytest.approx(5.0)
    assert two.makespan == pytest.approx(5.5)
    assert two.completion[5] == pytest.approx(3.5)


def test_small_job_has_a_slower_wider_topology(small_dag):
    space = TopologySpace.from_dag(small_dag, [4, 4, 4, 4])
    narrow = simulate(space.to_topology((1, 1, 1, 2)), small_dag, 400.0)
    wider = simulate(space.to_topology((1, 2, 1, 2)), small_dag, 400.0)
    assert narrow.makespan == pytest.approx(134.5)
    assert wider.makespan == pytest.approx(136.0)


def random_workloads():
    rng = np.random.default_rng(7)
    shapes = itertools.product(range(3), (1, 2), (2, 3), (1, 2))
    for variant, tp, pp, dp in shapes:
        mbs = int(rng.integers(pp, pp + 3))
        pods = int(rng.integers(pp, pp + 2))
        yield ParallelConfig(
            tp=tp,
            pp=pp,
            dp=dp,
            num_micro_batches=mbs,
            num_pods=pods,
            gpus_per_pod_per_replica=tp,
            fwd_compute_ms=float(rng.uniform(0.5, 3.0)),
            bwd_compute_ms=float(rng.uniform(1.0, 6.0)),
            pp_volume_Gb=float(rng.uniform(0.1, 1.0)),
            dp_volume_Gb=float(rng.uniform(2.0, 20.0)),
            name=f"tp{tp}pp{pp}dp{dp}-{variant}",
        )


@pytest.mark.parametrize("cfg", list(random_workloads()), ids=lambda cfg: cfg.name)
def test_ideal_network_runs_the_longest_path(cfg):
    full, _ = build_workload(cfg, round_robin_placement(cfg))
    dag = reduce_dag(full)
    trace = simulate(None, dag, cfg.nic_bandwidth_B, ideal=True)
    longest, finish = dag.longest_path(dag.task_durations(cfg.nic_bandwidth_B))
    assert trace.makespan == pytest.approx(longest)
    assert trace.completion == pytest.approx(finish)
    assert len(trace.events) <= 2 * len(dag) - 1
