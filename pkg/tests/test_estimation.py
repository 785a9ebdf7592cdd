import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check, make_instance, rel_error
from mmjoint.choice import ParamVector
from mmjoint.dnl import load
from mmjoint.equilibrium import EquilibriumConfig, EquilibriumSolver
from mmjoint.estimation import (
    EstimationConfig,
    EstimationDiverged,
    EstimationError,
    Model,
    ObservationSet,
    backward,
    estimate,
    flow_gradient,
    goodness_of_fit,
    loss,
    normalized_mse,
    r_squared,
    write_fit_report,
    write_trace,
)
from mmjoint.fixtures import ND_TRUTH_SIMPLE, build_corridor, build_toy_multimodal

CAR = ParamVector.from_dict({"beta1_car": 1.0})


@pytest.fixture(scope="module")
def corridor_out():
    net = build_corridor(n_links=2)
    return net, load(net, np.array([[40.0, 30.0]]))


def shifted(out, **changes):
    """Observations equal to ``out`` with some entries moved."""
    obs = ObservationSet.from_outputs(out)
    for name, (idx, delta) in changes.items():
        getattr(obs, name)[idx] += delta
    return obs


# ---------------------------------------------------------------------------
# loss


def test_loss_zero_at_perfect_match(corridor_out):
    _, out = corridor_out
    total, parts = loss(out, ObservationSet.from_outputs(out), (1.0, 0.0, 1.0))
    assert total == 0.0 and all(v == 0.0 for v in parts.values())


def test_travel_time_only_hand_sum(corridor_out):
    _, out = corridor_out
    obs = ObservationSet.from_outputs(out)
    obs.travel_time[0] += 1.0
    obs.travel_time[3] -= 2.0
    total, parts = loss(out, obs, (0.0, 0.0, 1.0))
    assert total == pytest.approx(5.0, abs=1e-12)
    assert parts["tt"] == pytest.approx(5.0, abs=1e-12)


def test_unobserved_entries_do_not_count(corridor_out):
    _, out = corridor_out
    obs = ObservationSet.from_outputs(out)
    obs.link_flow_mask[2] = False
    obs.link_flow[2] += 50.0
    w = (1.0, 0.0, 1.0)
    assert loss(out, obs, w)[0] == 0.0
    assert np.all(flow_gradient(out, obs, w) == 0.0)


def test_loss_decomposition():
    rng = np.random.default_rng(2)
    net = build_toy_multimodal()
    a = load(net, rng.uniform(0, 30, (len(net.paths), 2)))
    b = load(net, rng.uniform(0, 30, (len(net.paths), 2)))
    obs = ObservationSet.from_outputs(b)
    w = (0.3, 1.7, 2.2)
    total, parts = loss(a, obs, w)
    assert total == pytest.approx(w[0] * parts["flow"] + w[1] * parts["pt"] + w[2] * parts["tt"], rel=1e-14)


def test_empty_component_with_weight_rejected(corridor_out):
    _, out = corridor_out
    obs = ObservationSet.from_outputs(out, pt_mask=np.zeros(out.x_pt.size, bool))
    assert loss(out, obs, (1.0, 0.0, 1.0))[0] == 0.0
    obs.link_flow_mask[:] = False
    with pytest.raises(EstimationError):
        loss(out, obs, (1.0, 0.0, 1.0))


def test_observation_validation():
    with pytest.raises(EstimationError):
        ObservationSet(np.array([-1.0]), np.array([True]), np.zeros(0), np.zeros(0, bool), np.zeros(1), np.ones(1, bool))
    with pytest.raises(EstimationError):
        ObservationSet(np.ones(2), np.ones(3, bool), np.zeros(0), np.zeros(0, bool), np.zeros(2), np.ones(2, bool))


def test_normalized_mse_definition(corridor_out):
    _, out = corridor_out
    obs = ObservationSet.from_outputs(out)
    obs.link_flow[0] += 3.0
    m = obs.link_flow_mask
    expected = (9.0 / m.sum()) / np.mean(obs.link_flow[m] ** 2)
    assert normalized_mse(out, obs)["flow"] == pytest.approx(expected, rel=1e-13)


# ---------------------------------------------------------------------------
# gradients


def test_zero_residuals_zero_gradients():
    inst = make_instance(0, "toy")
    state = inst["state"]
    obs = ObservationSet.from_outputs(state.dnl)
    g_q, g_t = backward(state, obs, (1.0, 1.0, 1.0), inst["model"].structure)
    assert np.all(g_q == 0) and np.all(g_t == 0)


def test_scalar_chain_single_link():
    net = build_corridor(n_links=1, horizon_s=600, interval_s=300, demand_intervals=1)
    solver = EquilibriumSolver(net)
    model = Model(solver)
    state = model.evaluate(np.array([[30.0]]), CAR)
    out = state.dnl
    assert out.rho_car[0, 0] == 1.0
    x = out.x_c[0, 0]
    mask = np.zeros(out.x_c.size, bool)
    mask[0] = True
    obs = ObservationSet(np.full(out.x_c.size, 42.0), mask, np.zeros(0), np.zeros(0, bool),
                         out.t_c.ravel(), np.zeros(out.x_c.size, bool))
    w1 = 0.7
    g_q, _ = backward(state, obs, (w1, 0.0, 0.0), model.structure)
    P = state.probs.joint[0, 0]
    assert P == 1.0
    assert g_q[0, 0] == pytest.approx(-2 * w1 * (42.0 - x) * P, rel=1e-14)


@pytest.mark.parametrize("seed", [0, 1, 3, 4])
def test_gradients_match_frozen_finite_differences(seed):
    inst = make_instance(seed)
    g_q, fd_q, g_t, fd_t = check(inst)
    assert rel_error(g_q, fd_q) < 1e-3
    assert rel_error(g_t, fd_t) < 1e-3


def test_unobserved_values_do_not_reach_gradients():
    inst = make_instance(0, "toy")
    obs = inst["obs"]
    g0 = backward(inst["state"], obs, inst["weights"], inst["model"].structure)
    for name, mask in (("link_flow", "link_flow_mask"), ("pt_counts", "pt_mask"), ("travel_time", "travel_time_mask")):
        vals = getattr(obs, name)
        vals[~getattr(obs, mask)] += 123.0
    g1 = backward(inst["state"], obs, inst["weights"], inst["model"].structure)
    np.testing.assert_array_equal(g0[0], g1[0])
    np.testing.assert_array_equal(g0[1], g1[1])


# ---------------------------------------------------------------------------
# estimation loop


class Recording(Model):
    def __init__(self, solver, **kw):
        super().__init__(solver, **kw)
        self.seen = []

    def evaluate(self, demand, params, iterations=None):
        self.seen.append(np.array(demand, copy=True))
        return super().evaluate(demand, params, iterations)


@pytest.fixture(scope="module")
def toy_problem():
    net = build_toy_multimodal()
    solver = EquilibriumSolver(net, EquilibriumConfig(max_iterations=30))
    truth = ParamVector.from_dict(ND_TRUTH_SIMPLE)
    q = np.array([[150.0, 120.0], [90.0, 110.0]])
    obs = ObservationSet.from_outputs(Model(solver).evaluate(q, truth).dnl)
    return solver, truth, q, obs


def test_start_at_truth_is_a_fixed_point(toy_problem):
    solver, truth, q, obs = toy_problem
    res = estimate(Model(solver), q, truth, obs, EstimationConfig(iterations=3))
    assert res.trace[0].total == pytest.approx(0.0, abs=1e-18)
    assert res.best_iteration == 0
    np.testing.assert_array_equal(res.demand, q)
    np.testing.assert_array_equal(res.params.values, truth.values)
    assert all(f.r2 == pytest.approx(1.0) for f in res.fit.values())


def test_demand_stays_nonnegative(toy_problem):
    solver, truth, q, obs = toy_problem
    model = Recording(solver)
    # an adaptive first step moves every entry by the full learning rate, past zero
    cfg = EstimationConfig(iterations=8, lr_demand=1000.0, estimate_params=False)
    res = estimate(model, q * 3.0, truth, obs, cfg)
    assert len(res.trace) == 9
    assert all(np.all(s >= 0.0) for s in model.seen)
    assert any(np.any(s == 0.0) for s in model.seen[1:])  # the projection was active


def test_upper_bound_projection(toy_problem):
    solver, truth, q, obs = toy_problem
    model = Recording(solver)
    estimate(model, q * 0.5, truth, obs, EstimationConfig(iterations=5, demand_upper=100.0, lr_demand=40.0))
    assert all(np.all(s <= 100.0) for s in model.seen[1:])


def test_runs_are_reproducible(toy_problem):
    solver, truth, q, obs = toy_problem
    start = truth.with_values(truth.values * 1.1)
    cfg = EstimationConfig(iterations=4)
    a = estimate(Model(solver), q * 1.3, start, obs, cfg)
    b = estimate(Model(solver), q * 1.3, start, obs, cfg)
    assert [(r.total, r.demand_hash, r.params) for r in a.trace] == [(r.total, r.demand_hash, r.params) for r in b.trace]


def test_best_iterate_improves_on_start(toy_problem):
    solver, truth, q, obs = toy_problem
    rng = np.random.default_rng(4)
    q0 = q * rng.uniform(0.6, 1.4, q.shape)
    res = estimate(Model(solver), q0, truth.with_values(truth.values * 1.1), obs, EstimationConfig(iterations=25))
    best = res.trace[res.best_iteration]
    assert best.total <= res.trace[0].total
    for comp in ("flow", "pt", "tt"):
        assert best.nmse[comp] <= res.trace[0].nmse[comp]


def test_divergence_aborts(toy_problem):
    solver, truth, q, obs = toy_problem
    cfg = EstimationConfig(iterations=60, optimizer="plain", lr_demand=5e3, lr_params=1.0)
    with pytest.raises(EstimationDiverged):
        estimate(Model(solver), q * 1.05, truth, obs, cfg)


def test_config_validation():
    with pytest.raises(EstimationError):
        EstimationConfig(weights=(0.0, 0.0, 0.0))
    with pytest.raises(EstimationError):
        EstimationConfig(weights=(1.0, -1.0, 0.0))
    with pytest.raises(EstimationError):
        EstimationConfig(lr_demand=0.0)
    with pytest.raises(EstimationError):
        EstimationConfig(optimizer="sgd")


def test_negative_start_rejected(toy_problem):
    solver, truth, q, obs = toy_problem
    with pytest.raises(EstimationError):
        estimate(Model(solver), -q, truth, obs)


def test_trace_and_fit_files(tmp_path, toy_problem):
    solver, truth, q, obs = toy_problem
    res = estimate(Model(solver), q * 1.2, truth, obs, EstimationConfig(iterations=2))
    write_trace(res.trace, tmp_path / "trace.csv")
    write_fit_report(res.fit, tmp_path / "fit_report.csv")
    rows = (tmp_path / "trace.csv").read_text().splitlines()
    assert rows[0].startswith("iteration,total,nmse_flow,nmse_pt,nmse_tt")
    assert len(rows) == 4
    fit = (tmp_path / "fit_report.csv").read_text().splitlines()
    assert fit[0] == "component,r2,sse,n" and len(fit) == 4


# ---------------------------------------------------------------------------
# goodness of fit


def test_r2_perfect_and_mean():
    y = np.array([1.0, 4.0, 2.0, 7.0])
    assert r_squared(y, y).r2 == 1.0
    assert r_squared(y, np.full(4, y.mean())).r2 == pytest.approx(0.0, abs=1e-15)


def test_r2_undefined_for_constant_observations():
    fit = r_squared(np.full(5, 3.0), np.arange(5.0))
    assert not fit.defined and np.isnan(fit.r2)


def mp_r2(y, s):
    mpmath.mp.dps = 40
    y = [mpmath.mpf(float(v)) for v in y]
    s = [mpmath.mpf(float(v)) for v in s]
    mean = mpmath.fsum(y) / len(y)
    sse = mpmath.fsum((a - b) ** 2 for a, b in zip(y, s))
    sst = mpmath.fsum((a - mean) ** 2 for a in y)
    return float(1 - sse / sst)


def test_r2_extended_precision_oracle(corridor_out):
    rng = np.random.default_rng(9)
    net = build_toy_multimodal()
    a = load(net, rng.uniform(0, 30, (len(net.paths), 2)))
    b = load(net, rng.uniform(0, 30, (len(net.paths), 2)))
    obs = ObservationSet.from_outputs(b)
    fit = goodness_of_fit(a, obs)
    assert fit["flow"].r2 == pytest.approx(mp_r2(b.x_c.ravel(), a.x_c.ravel()), abs=1e-12)
    assert fit["pt"].r2 == pytest.approx(mp_r2(b.x_pt, a.x_pt), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=30), st.integers(0, 2**31))
def test_r2_matches_oracle(values, seed):
    y = np.array(values)
    if np.ptp(y) < 1e-3:
        return
    s = y + np.random.default_rng(seed).normal(0, 10, y.size)
    assert r_squared(y, s).r2 == pytest.approx(mp_r2(y, s), abs=1e-9)
