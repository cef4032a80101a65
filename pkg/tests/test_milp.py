import pytest

from delta.des import LogicalTopology, derive_anchors, simulate
from delta.errors import (
    InfeasibleHorizonError,
    ModelError,
    SolverToleranceError,
    WidenAnchorError,
)
from delta.milp import (
    MilpModel,
    Sense,
    Solution,
    SolveStatus,
    VarKind,
    build_fixed_step_model,
    build_var_interval_model,
    dependency_gap_slices,
    extract_topology,
    hot_start_from_trace,
)
from delta.pruning import IndexBounds, task_time_index_pruning, x_upper_bound


def one_circuit() -> LogicalTopology:
    return LogicalTopology.from_pairs([4, 4], {(0, 1): 1})


def joint_model(dag, trace, t_up=5.0, **kwargs):
    anchors = derive_anchors(trace, dag)
    bounds = task_time_index_pruning(dag, anchors.K, anchors)
    return build_var_interval_model(
        dag, [4, 4], 400.0, anchors.K, t_up, bounds, **kwargs
    )


def test_model_bookkeeping():
    model = MilpModel()
    model.add_var("a", VarKind.INTEGER, upper=3)
    model.add_var("b", VarKind.BINARY, lower=-5)
    assert model.variables["b"].lower == 0.0
    name = model.add_constraint("cap", (0, 1), {"a": 1.0, "b": 2.0}, Sense.LE, 4)
    assert name == "cap_0_1"
    assert model.constraints[name].violation({"a": 3, "b": 1}) == pytest.approx(1.0)
    assert model.check_assignment({"a": 2, "b": 1}) == []
    assert model.check_assignment({"a": 2.5, "b": 1}) == ["a:integrality", "cap_0_1"]
    assert model.stats()["binary"] == 1


@pytest.mark.parametrize(
    "action",
    [
        lambda m: m.add_var("a"),
        lambda m: m.add_var("c", lower=2, upper=1),
        lambda m: m.add_constraint("row", (), {"zz": 1.0}, Sense.EQ),
        lambda m: m.add_constraint("row", (), {"a": 0.0}, Sense.EQ),
        lambda m: m.set_objective({"zz": 1.0}),
    ],
)
def test_model_rejects(action):
    model = MilpModel()
    model.add_var("a")
    with pytest.raises(ModelError):
        action(model)


def test_joint_model_shape(chain_dag):
    bounds = task_time_index_pruning(chain_dag, 3)
    model = build_var_interval_model(chain_dag, [7, 7], 400.0, 3, 5.0, bounds)
    assert model.name == "delta_joint"
    assert model.metadata["bit_widths"] == {"0_1": 3, "1_0": 3}
    assert sorted(model.x_names()) == ["x_0_1", "x_1_0"]
    # only the retained cells get flow variables
    assert "w_1_1" in model.variables
    assert "w_1_2" not in model.variables
    assert model.metadata["retained_cells"] == 2
    assert model.tag_counts()["sym"] == 1
    assert "fair_ub" not in model.tag_counts()


def test_circuit_caps_follow_upper_bound(parallel_dag):
    upper = x_upper_bound(parallel_dag, 10.0, 400.0)
    model = build_var_interval_model(
        parallel_dag, [8, 8], 400.0, 1, 10.0, x_upper=upper
    )
    assert model.variables["x_0_1"].upper == 2
    assert model.metadata["bit_widths"]["0_1"] == 2


def test_model_guards(chain_dag):
    bounds = task_time_index_pruning(chain_dag, 3)
    with pytest.raises(ModelError):
        build_var_interval_model(chain_dag, [4, 4], 400.0, 0, 5.0)
    with pytest.raises(ModelError):
        build_var_interval_model(chain_dag, [4, 4], 400.0, 4, 5.0, bounds)
    with pytest.raises(ModelError):
        build_var_interval_model(chain_dag, [4], 400.0, 3, 5.0, bounds)
    with pytest.raises(ModelError):
        build_var_interval_model(
            chain_dag, [4, 4], 400.0, 3, 5.0, bounds, min_intervals=4
        )


def test_too_few_intervals_can_be_forced(chain_dag, caplog):
    bounds = task_time_index_pruning(chain_dag, 3)
    model = build_var_interval_model(
        chain_dag, [4, 4], 400.0, 3, 5.0, bounds, min_intervals=4, force=True
    )
    assert model.metadata["K"] == 3
    assert "optimality is no longer guaranteed" in caplog.text


def test_hot_start_satisfies_joint_model(chain_dag):
    topo = one_circuit()
    trace = simulate(topo, chain_dag, 400.0)
    model = joint_model(chain_dag, trace)
    values = hot_start_from_trace(trace, topo, model)
    assert model.check_assignment(values) == []
    assert values["C"] == pytest.approx(2.5)
    assert values["x_0_1"] == 1.0
    assert values["beta_0_1_0"] == 1.0
    assert values["w_2_3"] == pytest.approx(0.4)


def test_hot_start_satisfies_fairness(parallel_dag):
    topo = one_circuit()
    trace = simulate(topo, parallel_dag, 400.0)
    model = joint_model(parallel_dag, trace, fairness=True)
    assert model.name == "delta_topo"
    assert model.tag_counts()["fair_ub"] == 2
    values = hot_start_from_trace(trace, topo, model)
    assert model.check_assignment(values) == []

    values["w_1_1"], values["w_2_1"] = 0.6, 0.2
    broken = model.check_assignment(values)
    assert any(name.startswith("fair_") for name in broken)


def test_hot_start_refusals(chain_dag):
    topo = one_circuit()
    trace = simulate(topo, chain_dag, 400.0)

    short = build_var_interval_model(chain_dag, [4, 4], 400.0, 2, 5.0)
    with pytest.raises(ModelError):
        hot_start_from_trace(trace, topo, short)

    shifted = IndexBounds(3, {1: 2, 2: 3}, {1: 2, 2: 3})
    pruned = build_var_interval_model(chain_dag, [4, 4], 400.0, 3, 5.0, shifted)
    with pytest.raises(WidenAnchorError):
        hot_start_from_trace(trace, topo, pruned)

    fixed = build_fixed_step_model(chain_dag, [4, 4], 400.0, 1.0, 3)
    with pytest.raises(ModelError):
        hot_start_from_trace(trace, topo, fixed)


@pytest.mark.parametrize(
    "delta_ms, dt, expected",
    [(2.5, 1.0, 3), (0.0, 1.0, 0), (1.0, 0.5, 2), (1.0, 1.0, 1)],
)
def test_dependency_gap_slices(delta_ms, dt, expected):
    assert dependency_gap_slices(delta_ms, dt) == expected


def test_fixed_step_model(chain_dag, parallel_dag):
    T = 4
    model = build_fixed_step_model(parallel_dag, [4, 4], 400.0, 1.0, T)
    assert model.var_count() == 8 * T + 5
    assert model.variables["p_0"].kind == VarKind.INTEGER
    assert model.metadata["kind"] == "fixed_step"

    build_fixed_step_model(chain_dag, [4, 4], 400.0, 1.0, 3)
    with pytest.raises(InfeasibleHorizonError):
        build_fixed_step_model(chain_dag, [4, 4], 400.0, 1.0, 2)
    with pytest.raises(ModelError):
        build_fixed_step_model(chain_dag, [4, 4], 400.0, 0.0, 3)


def test_only_the_fixed_step_model_grows_with_resolution(chain_dag, parallel_dag):
    counts = [
        build_fixed_step_model(parallel_dag, [4, 4], 400.0, dt, T).var_count()
        for dt, T in ((1.0, 2), (0.5, 4), (0.25, 8))
    ]
    assert counts == [8 * T + 5 for T in (2, 4, 8)]
    assert counts[2] > 3 * counts[0]

    bounds = IndexBounds.unpruned(chain_dag, 3)
    interval_counts = {
        build_var_interval_model(chain_dag, [4, 4], 400.0, 3, t_up, bounds).var_count()
        for t_up in (5.0, 10.0, 40.0)
    }
    assert len(interval_counts) == 1


def test_fixed_step_fairness(parallel_dag):
    model = build_fixed_step_model(parallel_dag, [4, 4], 400.0, 1.0, 2, fairness=True)
    assert model.tag_counts()["fair_lb"] == 4
    assert model.variables["u_0_1_2"].upper == 400.0


def test_extract_topology():
    sol = Solution(
        SolveStatus.OPTIMAL, 2.5, {"x_0_1": 2.0000001, "x_1_0": 1.9999999, "C": 2.5}
    )
    topo = extract_topology(sol, [4, 4])
    assert topo.x.tolist() == [[0, 2], [2, 0]]

    sol.values["x_0_1"] = 2.1
    with pytest.raises(SolverToleranceError):
        extract_topology(sol, [4, 4])
