import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from choice_oracles import fd_dflow_dcost, oracle_joint, random_instance
from mmjoint.choice import (
    PARAM_NAMES,
    ChoiceError,
    ChoiceStructure,
    ParamVector,
    PathCostInputs,
    ScaleConfig,
    dcost_dparams,
    dflow_dcost,
    dflow_ddemand,
    disutility,
    feature_row,
    nested_probabilities,
    path_flows,
)
from mmjoint.network import NEST_OF, SUBMODES

# ---------------------------------------------------------------------------
# disutility


def test_car_single_term():
    theta = ParamVector.from_dict({"beta1_car": 1.0, "gamma1_car": 0.0, "gamma2_car": 0.0, "gamma3_car": 0.0})
    assert disutility("car", theta, w_car=1.0) == 1.0


def test_bus_ground_truth_example():
    theta = ParamVector.from_dict({"beta1_bus": 1.2, "beta3_bus": 1.5, "beta2": 1.5, "beta4": 1.5, "alpha_bus": 2.0})
    c = disutility("bus", theta, w_bus=10.0, wait_bus=2.0, delta=1.0, walk=3.0)
    assert c == pytest.approx(23.0, abs=1e-12)


def test_pnr_zero_coefficients():
    theta = ParamVector.full()
    assert disutility("car+metro", theta, w_car=5.0, w_metro=7.0, wait_metro=1.0, walk=2.0, tau=3.0) == 0.0


def test_driving_has_no_constant():
    assert "alpha_car" not in PARAM_NAMES
    assert len(PARAM_NAMES) == 34


def test_mode_input_mismatch_rejected():
    with pytest.raises(ChoiceError):
        feature_row("car", w_bus=1.0)
    with pytest.raises(ChoiceError):
        feature_row("metro", w_car=1.0)


def test_param_vector_rejects_duplicates_and_unknowns():
    with pytest.raises(ChoiceError):
        ParamVector(("beta2", "beta2"), [1, 2], [True, True])
    with pytest.raises(ChoiceError):
        ParamVector.from_dict({"beta9": 1.0})


def _inputs(submode, n_t=1, **kw):
    z = np.zeros((1, n_t))
    fields = {f: z + kw.get(f, 0.0) for f in ("w_car", "w_bus", "w_metro", "wait_bus", "wait_metro", "walk")}
    stat = {f: np.array([kw.get(f, 0.0)]) for f in ("tau", "delta", "income", "dens_o", "dens_d")}
    return PathCostInputs((submode,), **fields, **stat)


def test_dcost_car_has_no_walk_column():
    X = dcost_dparams(_inputs("car", w_car=3.0, tau=2.0), ParamVector.full()).toarray()[0]
    assert X[PARAM_NAMES.index("beta4")] == 0.0
    assert X[PARAM_NAMES.index("beta1_car")] == 3.0


def test_dcost_pnr_fee_branch():
    X = dcost_dparams(_inputs("car+bus", tau=10.0, delta=2.0), ParamVector.full()).toarray()[0]
    assert X[PARAM_NAMES.index("beta2")] == 12.0


@pytest.mark.parametrize("g", [g for g in SUBMODES if g != "car"])
def test_dcost_alpha_indicator(g):
    X = dcost_dparams(_inputs(g), ParamVector.full()).toarray()[0]
    alphas = [n for n in PARAM_NAMES if n.startswith("alpha_")]
    for n in alphas:
        assert X[PARAM_NAMES.index(n)] == (1.0 if n == f"alpha_{g}" else 0.0)


def test_dcost_matches_finite_differences():
    rng = np.random.default_rng(3)
    subs = ("car", "bus", "car+metro", "bus+metro")
    n, T = len(subs), 3
    t = {f: rng.uniform(0, 5, (n, T)) for f in ("w_car", "w_bus", "w_metro", "wait_bus", "wait_metro", "walk")}
    t["w_car"][[1, 3]] = 0
    t["w_bus"][[0, 2]] = t["wait_bus"][[0, 2]] = 0
    t["w_metro"][[0, 1]] = t["wait_metro"][[0, 1]] = 0
    t["walk"][0] = 0
    inputs = PathCostInputs(subs, **t, **{f: rng.uniform(0, 3, n) for f in ("tau", "delta", "income", "dens_o", "dens_d")})
    theta = ParamVector.full(dict(zip(PARAM_NAMES, rng.normal(size=34))))
    X = dcost_dparams(inputs, theta).toarray()
    h = 1e-6
    for j in range(34):
        vp, vm = theta.values.copy(), theta.values.copy()
        vp[j] += h
        vm[j] -= h
        fd = (inputs.costs(theta.with_values(vp)) - inputs.costs(theta.with_values(vm))).ravel() / (2 * h)
        np.testing.assert_allclose(X[:, j], fd, rtol=1e-5, atol=1e-9)


# ---------------------------------------------------------------------------
# nested probabilities


def test_degenerate_single_path():
    p = nested_probabilities([3.7], ["metro"])
    assert p.p_path[0, 0] == p.p_second[0, 0] == p.p_first[0, 0] == 1.0
    assert path_flows(100.0, p)[0] == 100.0
    assert dflow_dcost(p, [100.0], ["metro"]).toarray()[0, 0] == 0.0
    assert dflow_ddemand(p, ["metro"]).toarray()[0, 0] == 1.0


@pytest.mark.parametrize("theta", [0.3, 1.0, 4.0])
def test_equal_costs_split_evenly(theta):
    p = nested_probabilities([2.0, 2.0], ["bus", "bus"], ScaleConfig({}, {"bus": theta}))
    np.testing.assert_allclose(p.p_path[:, 0], 0.5, atol=1e-15)


def test_matches_extended_precision_oracle():
    rng = np.random.default_rng(11)
    submodes = ["car", "car", "bus", "bus", "car+metro", "car+metro"]
    costs = rng.normal(0, 2, 6)
    p = nested_probabilities(costs, submodes)
    np.testing.assert_allclose(p.joint[:, 0], oracle_joint(costs, submodes), rtol=1e-12, atol=1e-15)
    f = path_flows(60.0, p)
    np.testing.assert_allclose(f, 60.0 * oracle_joint(costs, submodes), rtol=1e-12)
    assert f.sum() == pytest.approx(60.0, rel=1e-13)


def test_zero_demand_zero_flow():
    p = nested_probabilities([1.0, 2.0], ["car", "bus"])
    assert np.all(path_flows(0.0, p) == 0.0)


def test_negative_demand_and_bad_costs_rejected():
    p = nested_probabilities([1.0, 2.0], ["car", "bus"])
    with pytest.raises(ChoiceError):
        path_flows(-1.0, p)
    with pytest.raises(ChoiceError):
        nested_probabilities([], [])
    with pytest.raises(ChoiceError):
        nested_probabilities([1.0, np.inf], ["car", "bus"])


def test_large_costs_do_not_overflow():
    p = nested_probabilities([5000.0, 5001.0, 9000.0], ["car", "car", "metro"])
    assert np.all(np.isfinite(p.joint))
    assert p.joint.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_probability_families_normalize(seed):
    submodes, costs, scales = random_instance(np.random.default_rng(seed))
    p = nested_probabilities(costs, submodes, scales)
    sub = np.array(submodes)
    first = np.array([NEST_OF[g] for g in submodes])
    assert abs(p.joint.sum() - 1.0) < 1e-12
    for g in set(submodes):
        assert abs(p.p_path[sub == g, 0].sum() - 1.0) < 1e-12
    for m in set(first):
        gs = sorted(set(sub[first == m]))
        assert abs(sum(p.p_second[sub == g, 0][0] for g in gs) - 1.0) < 1e-12
    assert abs(sum(p.p_first[first == m, 0][0] for m in set(first)) - 1.0) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_shift_within_nest_leaves_path_shares(seed, shift):
    submodes, costs, scales = random_instance(np.random.default_rng(seed))
    g = submodes[0]
    moved = costs + np.where(np.array(submodes) == g, shift, 0.0)
    a = nested_probabilities(costs, submodes, scales).p_path
    b = nested_probabilities(moved, submodes, scales).p_path
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_oracle_random(seed):
    submodes, costs, scales = random_instance(np.random.default_rng(seed))
    p = nested_probabilities(costs, submodes, scales)
    np.testing.assert_allclose(p.joint[:, 0], oracle_joint(costs, submodes, scales), rtol=1e-11, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dflow_dcost_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    submodes, costs, scales = random_instance(rng)
    q = rng.uniform(10, 200)
    p = nested_probabilities(costs, submodes, scales)
    J = dflow_dcost(p, path_flows(q, p), submodes, scales).toarray()
    fd = fd_dflow_dcost(costs, submodes, scales, q)
    np.testing.assert_allclose(J, fd, rtol=1e-5, atol=1e-9 * q)
    # a common offset on every cost leaves every flow unchanged
    np.testing.assert_allclose(J.sum(axis=1), 0.0, atol=1e-9 * q)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dflow_ddemand_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    submodes, costs, scales = random_instance(rng)
    p = nested_probabilities(costs, submodes, scales)
    D = dflow_ddemand(p, submodes).toarray()[:, 0]
    q, h = rng.uniform(10, 100), 1e-3
    fd = (path_flows(q + h, p) - path_flows(q - h, p)) / (2 * h)
    np.testing.assert_allclose(D, fd, rtol=1e-8)
    assert D.sum() == pytest.approx(1.0, abs=1e-12)


def test_appendix_cases_on_two_by_two_by_two():
    # two first-level modes, each with two second-level modes, each with two paths
    submodes = ["bus"] * 2 + ["metro"] * 2 + ["car+bus"] * 2 + ["car+metro"] * 2
    scales = ScaleConfig({"transit": 0.8, "pnr": 1.3}, {"bus": 0.5, "metro": 0.7, "car+bus": 1.1, "car+metro": 0.9})
    costs = np.array([1.0, 1.4, 0.7, 2.0, 1.9, 0.4, 1.1, 1.6])
    p = nested_probabilities(costs, submodes, scales)
    f = path_flows(80.0, p)
    J = dflow_dcost(p, f, submodes, scales).toarray()
    fd = fd_dflow_dcost(costs, submodes, scales, 80.0)
    # same path, same nest, same first-level mode, different first-level mode
    for i, j in [(0, 0), (0, 1), (0, 2), (0, 5), (6, 7), (6, 4), (6, 3)]:
        assert J[i, j] == pytest.approx(fd[i, j], rel=1e-6, abs=1e-9)


def test_unavailable_modes_renormalize():
    submodes = ["car", "bus", "metro", "car+metro"]
    costs = np.array([[1.0], [0.5], [0.8], [1.2]])
    full = ChoiceStructure(submodes, [0, 0, 0, 0], 1)
    part = ChoiceStructure(submodes, [0, 0, 0, 0], 1, available=[True, False, True, True])
    p = part.probabilities(costs)
    assert p.joint[1, 0] == 0.0
    assert p.joint.sum() == pytest.approx(1.0, abs=1e-12)
    f = part.flows(np.array([[50.0]]), p)
    assert f[1, 0] == 0.0
    J = part.dflow_dcost(p, f).toarray()
    assert np.all(J[1] == 0) and np.all(J[:, 1] == 0)
    assert np.all(part.dflow_ddemand(p).toarray()[1] == 0)
    # the reduced choice set equals a fresh evaluation without that mode
    ref = nested_probabilities(costs[[0, 2, 3], 0], ["car", "metro", "car+metro"])
    np.testing.assert_allclose(p.joint[[0, 2, 3], 0], ref.joint[:, 0], rtol=1e-13)
    assert full.probabilities(costs).joint[1, 0] > 0


def test_blocks_do_not_couple():
    s = ChoiceStructure(["car", "bus", "car", "metro"], [0, 0, 1, 1], 2)
    costs = np.array([[1.0, 2.0], [0.5, 0.1], [1.0, 1.0], [2.0, 0.3]])
    p = s.probabilities(costs)
    f = s.flows(np.array([[10.0, 20.0], [30.0, 40.0]]), p)
    J = s.dflow_dcost(p, f).toarray()
    T = 2
    for r in range(8):
        for c in range(8):
            k, t = divmod(r, T)
            k2, t2 = divmod(c, T)
            if t != t2 or (k < 2) != (k2 < 2):
                assert J[r, c] == 0.0
