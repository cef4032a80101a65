import itertools

import numpy as np
import pytest

from conftest import make_dag, needs_solver
from delta.des import LogicalTopology, derive_anchors, simulate
from delta.errors import InfeasibleHorizonError, OverTightAnchorError
from delta.lp_io import default_solver_cmd, solve
from delta.milp import build_var_interval_model, hot_start_from_trace
from delta.pruning import (
    IndexBounds,
    cal_task_time_windows,
    max_weight_independent_set,
    solve_mwis,
    task_time_index_pruning,
    x_upper_bound,
)

CHAIN_TASKS = [(0, 1, 0.4, [0], [1]), (1, 0, 0.4, [1], [0])]


def test_time_windows(chain_dag):
    windows = cal_task_time_windows(chain_dag, 400.0, 5.0)
    assert windows.est[1:3].tolist() == pytest.approx([0.0, 1.5])
    assert windows.lct[1:3].tolist() == pytest.approx([3.5, 5.0])
    assert windows.tau[1] == pytest.approx(1.0)


def test_horizon_shorter_than_chain(chain_dag):
    with pytest.raises(InfeasibleHorizonError):
        cal_task_time_windows(chain_dag, 400.0, 2.0)


def test_gap_pushes_successor_an_interval_later(chain_dag):
    bounds = task_time_index_pruning(chain_dag, 3)
    assert bounds.retained(1) == range(1, 2)
    assert bounds.retained(2) == range(3, 4)
    assert list(bounds.zero_fixed_cells()) == [(1, 2), (1, 3), (2, 1), (2, 2)]
    assert bounds.to_dict() == {"K": 3, "bounds": {"1": [1, 1], "2": [3, 3]}}


def test_back_to_back_tasks_share_a_boundary():
    dag = make_dag(CHAIN_TASKS, deps=[(1, 2, 0.0)])
    bounds = task_time_index_pruning(dag, 2)
    assert (bounds.k_min, bounds.k_max) == ({1: 1, 2: 2}, {1: 1, 2: 2})


def test_too_few_intervals(chain_dag):
    with pytest.raises(OverTightAnchorError):
        task_time_index_pruning(chain_dag, 2)


def test_anchors_narrow_the_ranges(chain_dag):
    loose = task_time_index_pruning(chain_dag, 5)
    assert loose.retained(1) == range(1, 4)
    assert loose.retained_cells() == 6

    anchors = derive_anchors(simulate(None, chain_dag, 400.0, ideal=True), chain_dag)
    tight = task_time_index_pruning(chain_dag, 5, anchors, widen=0)
    assert tight.retained(1) == range(1, 2)
    # tasks feeding only the sink keep their dependency range
    assert tight.retained(2) == range(3, 6)
    assert tight.retained_cells() == 4
    widened = task_time_index_pruning(chain_dag, 5, anchors, widen=1)
    assert widened.retained(1) == range(1, 3)


def test_unpruned(chain_dag):
    bounds = IndexBounds.unpruned(chain_dag, 4)
    assert bounds.retained_cells() == 8
    assert not list(bounds.zero_fixed_cells())


def test_x_upper_bound(chain_dag, parallel_dag):
    assert x_upper_bound(parallel_dag, 10.0, 400.0).pair_bound(0, 1) == 2
    chain = x_upper_bound(chain_dag, 10.0, 400.0)
    assert chain.pair_bound(0, 1) == 1
    assert chain.to_dict()["x_upper"] == [[0, 1], [1, 0]]

    ordered = make_dag(
        [(0, 1, 0.4, [0], [2]), (0, 1, 0.4, [1], [3])], deps=[(1, 2, 0.0)]
    )
    assert x_upper_bound(ordered, 10.0, 400.0).pair_bound(0, 1) == 1


def test_x_upper_bound_tracks_the_horizon():
    dag = make_dag(
        [
            (0, 1, 0.4, [0], [2]),
            (0, 1, 0.4, [1], [3]),
            (1, 0, 0.4, [4], [5]),
            (1, 0, 0.4, [6], [7]),
        ],
        deps=[(1, 3, 2.0), (4, 2, 2.0)],
    )
    # at t_up = 4 task 1 ends by 1 ms and task 2 starts after 3 ms
    assert x_upper_bound(dag, 4.0, 400.0).pair_bound(0, 1) == 1
    assert x_upper_bound(dag, 10.0, 400.0).pair_bound(0, 1) == 2


def test_ideal_schedule_survives_pruning(small_dag):
    ideal = simulate(None, small_dag, 400.0, ideal=True)
    t_up = 2 * ideal.makespan
    x_upper = x_upper_bound(small_dag, t_up, 400.0)
    x = np.zeros((small_dag.num_pods, small_dag.num_pods), dtype=int)
    for i, j in small_dag.active_pairs():
        x[i, j] = x[j, i] = x_upper.pair_bound(i, j)
    topo = LogicalTopology(x, x.sum(axis=1))
    trace = simulate(topo, small_dag, 400.0)
    assert trace.makespan == pytest.approx(ideal.makespan)

    anchors = derive_anchors(trace, small_dag)
    bounds = task_time_index_pruning(small_dag, anchors.K, anchors)
    for task_id, (first, last) in anchors.bounds.items():
        retained = bounds.retained(task_id)
        assert first in retained and last in retained
    model = build_var_interval_model(
        small_dag, topo.port_caps, 400.0, anchors.K, t_up, bounds, x_upper=x_upper
    )
    values = hot_start_from_trace(trace, topo, model)
    assert model.check_assignment(values) == []


@needs_solver
@pytest.mark.parametrize("name", ["chain_dag", "parallel_dag"])
def test_pruning_keeps_the_optimum(name, request):
    dag = request.getfixturevalue(name)
    cmd = default_solver_cmd()
    anchors = derive_anchors(simulate(None, dag, 400.0, ideal=True), dag)
    K = anchors.K + 1
    unpruned = IndexBounds.unpruned(dag, K)
    plain = build_var_interval_model(dag, [4, 4], 400.0, K, 5.0, unpruned)
    pruned = build_var_interval_model(
        dag,
        [4, 4],
        400.0,
        K,
        5.0,
        task_time_index_pruning(dag, K, anchors),
        x_upper=x_upper_bound(dag, 5.0, 400.0),
    )
    assert pruned.var_count() <= plain.var_count()
    plain_sol, pruned_sol = solve(plain, cmd, 60.0), solve(pruned, cmd, 60.0)
    assert pruned_sol.objective == pytest.approx(plain_sol.objective, abs=1e-5)


def brute_force_mwis(weights, edges):
    n = len(weights)
    neighbours = [0] * n
    for u, v in edges:
        neighbours[u] |= 1 << v
        neighbours[v] |= 1 << u
    best = 0.0
    for mask in range(1 << n):
        members = [i for i in range(n) if mask >> i & 1]
        if any(mask & neighbours[i] for i in members):
            continue
        best = max(best, sum(weights[i] for i in members))
    return best


def test_mwis_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(0, 16))
        weights = [float(w) for w in rng.integers(1, 10, size=n)]
        density = rng.uniform(0.1, 0.7)
        edges = [
            (u, v)
            for u, v in itertools.combinations(range(n), 2)
            if rng.uniform() < density
        ]
        adjacency = [set() for _ in range(n)]
        for u, v in edges:
            adjacency[u].add(v)
        weight, chosen = max_weight_independent_set(weights, adjacency)
        assert weight == pytest.approx(brute_force_mwis(weights, edges))
        assert weight == pytest.approx(sum(weights[i] for i in chosen))
        assert not any(u in chosen and v in chosen for u, v in edges)


def test_mwis_small_cases():
    assert solve_mwis([], []) == 0
    # a path a-b-c prefers both ends
    assert max_weight_independent_set([2, 3, 2], [{1}, {2}, set()]) == (4, [0, 2])
