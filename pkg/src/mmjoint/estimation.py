"""Joint estimation of dynamic O-D demand and disutility parameters.

The forward pass is: equilibrium costs (held fixed once found), one nested
logit assignment of demand at those costs, one network load.  The backward
pass chains the loss residuals through the assignment ratio matrices, the
link travel-time sensitivity, the logit Jacobians and the cost features.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .choice import ChoiceProbabilities, ParamVector, PathCostInputs, dcost_dparams
from .dnl import DnlOutputs, travel_time_derivative
from .equilibrium import EquilibriumSolver

COMPONENTS = ("flow", "pt", "tt")


class EstimationError(RuntimeError):
    pass


class EstimationDiverged(EstimationError):
    pass


# ----------------------------------------------------------------------------
# observations


@dataclass(eq=False)
class ObservationSet:
    """Observed values with boolean masks of which entries exist.

    ``link_flow`` and ``travel_time`` are flat over ``link * n_int + interval``;
    ``pt_counts`` over ``2 * pair + (0 board, 1 alight)`` in the loader's
    (stop, trip) pair order.  Travel times are minutes.
    """

    link_flow: np.ndarray
    link_flow_mask: np.ndarray
    pt_counts: np.ndarray
    pt_mask: np.ndarray
    travel_time: np.ndarray
    travel_time_mask: np.ndarray

    def __post_init__(self):
        for name in ("link_flow", "pt_counts", "travel_time"):
            vals = np.asarray(getattr(self, name), dtype=float).ravel()
            mask = np.asarray(getattr(self, self._mask_of(name)), dtype=bool).ravel()
            if vals.shape != mask.shape:
                raise EstimationError(f"{name}: values and mask differ in size")
            if not np.all(np.isfinite(vals[mask])):
                raise EstimationError(f"{name}: observed values must be finite")
            if name != "travel_time" and np.any(vals[mask] < 0):
                raise EstimationError(f"{name}: counts must be >= 0")
            setattr(self, name, vals)
            setattr(self, self._mask_of(name), mask)

    @staticmethod
    def _mask_of(name):
        return {"link_flow": "link_flow_mask", "pt_counts": "pt_mask", "travel_time": "travel_time_mask"}[name]

    @classmethod
    def from_outputs(cls, out: DnlOutputs, link_flow_mask=None, pt_mask=None, travel_time_mask=None):
        """Observations equal to a simulation's outputs (full coverage by default)."""
        def full(mask, n):
            return np.ones(n, bool) if mask is None else np.asarray(mask, bool).ravel()
        n_c = out.x_c.size
        return cls(out.x_c.ravel().copy(), full(link_flow_mask, n_c), out.x_pt.copy(),
                   full(pt_mask, out.x_pt.size), out.t_c.ravel().copy(), full(travel_time_mask, n_c))

    def values(self, comp):
        return {"flow": self.link_flow, "pt": self.pt_counts, "tt": self.travel_time}[comp]

    def mask(self, comp):
        return {"flow": self.link_flow_mask, "pt": self.pt_mask, "tt": self.travel_time_mask}[comp]

    def count(self, comp) -> int:
        return int(self.mask(comp).sum())

    def mean_square(self, comp) -> float:
        m = self.mask(comp)
        return float(np.mean(self.values(comp)[m] ** 2)) if m.any() else 0.0


def simulated(out: DnlOutputs, comp) -> np.ndarray:
    return {"flow": out.x_c.ravel(), "pt": out.x_pt, "tt": out.t_c.ravel()}[comp]


# ----------------------------------------------------------------------------
# loss and fit


def loss(sim: DnlOutputs, obs: ObservationSet, weights) -> tuple:
    """Weighted sum of squared residuals over observed entries.

    Returns ``(total, parts)`` where ``parts[comp]`` is the unweighted sum of
    squares of that component.
    """
    weights = np.asarray(weights, dtype=float)
    parts = {}
    for w, comp in zip(weights, COMPONENTS):
        m = obs.mask(comp)
        if w != 0 and not m.any():
            raise EstimationError(f"component {comp!r} has weight {w} but no observations")
        r = obs.values(comp)[m] - simulated(sim, comp)[m]
        parts[comp] = float(r @ r)
    total = float(sum(w * parts[c] for w, c in zip(weights, COMPONENTS)))
    return total, parts


def normalized_mse(sim: DnlOutputs, obs: ObservationSet) -> dict:
    """Mean squared error divided by the mean square of the observations, per component."""
    out = {}
    for comp in COMPONENTS:
        m = obs.mask(comp)
        ms = obs.mean_square(comp)
        if not m.any() or ms == 0:
            out[comp] = float("nan")
            continue
        r = obs.values(comp)[m] - simulated(sim, comp)[m]
        out[comp] = float(np.mean(r**2) / ms)
    return out


@dataclass(frozen=True)
class Fit:
    r2: float
    sse: float
    n: int
    defined: bool


def r_squared(observed, simulated_values) -> Fit:
    y = np.asarray(observed, dtype=float)
    s = np.asarray(simulated_values, dtype=float)
    sse = float(np.sum((y - s) ** 2))
    sst = float(np.sum((y - y.mean()) ** 2)) if y.size else 0.0
    if sst == 0:
        return Fit(float("nan"), sse, int(y.size), False)
    return Fit(1.0 - sse / sst, sse, int(y.size), True)


def goodness_of_fit(sim: DnlOutputs, obs: ObservationSet) -> dict:
    """R-squared per component over observed entries; undefined when observations are absent or constant."""
    res = {}
    for comp in COMPONENTS:
        m = obs.mask(comp)
        res[comp] = r_squared(obs.values(comp)[m], simulated(sim, comp)[m])
    return res


# ----------------------------------------------------------------------------
# gradients


@dataclass(eq=False)
class ForwardState:
    """Everything the backward pass needs from one forward evaluation."""

    demand: np.ndarray  # (n_od, n_dep)
    params: ParamVector
    inputs: PathCostInputs  # frozen cost features
    probs: ChoiceProbabilities
    flows: np.ndarray  # (n_paths, n_dep) = demand * probabilities
    dnl: DnlOutputs
    eq_flows: np.ndarray  # averaged equilibrium flows the costs came from


def flow_gradient(out: DnlOutputs, obs: ObservationSet, weights) -> np.ndarray:
    """d(loss)/d(path flow) for every (path, departure interval) cohort, flat path-major."""
    w1, w2, w3 = np.asarray(weights, dtype=float)
    g = np.zeros(out.rho_car.shape[1])
    if w1:
        m = obs.link_flow_mask
        r = np.where(m, obs.link_flow - out.x_c.ravel(), 0.0)
        g -= 2.0 * w1 * (out.rho_car.T @ r)
    if w2:
        m = obs.pt_mask
        r = np.where(m, obs.pt_counts - out.x_pt, 0.0)
        g -= 2.0 * w2 * (out.rho_transit.T @ r)
    if w3:
        m = obs.travel_time_mask
        r = np.where(m, obs.travel_time - out.t_c.ravel(), 0.0)
        dtdx = travel_time_derivative(out, "minutes")
        g -= 2.0 * w3 * (out.rho_car.T @ (dtdx.T @ r))
    return g


def backward(state: ForwardState, obs: ObservationSet, weights, structure) -> tuple:
    """Gradients of the loss with respect to demand ``(n_od, n_dep)`` and the free parameters."""
    out = state.dnl
    g_f = flow_gradient(out, obs, weights)
    n_paths, n_dep = state.flows.shape
    if g_f.size != n_paths * n_dep:
        raise EstimationError(f"assignment-ratio columns ({g_f.size}) do not match path flows ({n_paths * n_dep})")
    dfdq = structure.dflow_ddemand(state.probs)
    g_q = (dfdq.T @ g_f).reshape(state.demand.shape)
    dfdc = structure.dflow_dcost(state.probs, state.flows)
    g_c = dfdc.T @ g_f
    X = dcost_dparams(state.inputs, state.params)
    g_theta = (X.T @ g_c)[state.params.free]
    return g_q, g_theta


# ----------------------------------------------------------------------------
# forward model


class Model:
    """Forward evaluation at (demand, parameters) with warm-started equilibrium tracking."""

    def __init__(self, solver: EquilibriumSolver, equilibrium_iterations: int = 1):
        self.solver = solver
        self.structure = solver.structure
        self.inner = equilibrium_iterations
        self._flows = None
        self._out = None

    def reset(self):
        self._flows, self._out = None, None

    def evaluate(self, demand, params: ParamVector, iterations=None) -> ForwardState:
        """Track equilibrium from the last call, then assign once at the frozen costs and load."""
        solver = self.solver
        q = solver.check_demand(demand)
        inner = self.inner if iterations is None else iterations
        if self._flows is None:
            st = solver.solve(q, params, max_iterations=max(inner, 1))
            f, out = st.flows, st.dnl
        else:
            f, out = self._flows, self._out
            for i in range(inner):
                y = solver.assign(q, params, out)[0]
                f = f + (y - f) / (i + 2)
                out = solver.loader.run(f)
        flows, inputs, _, probs = solver.assign(q, params, out)
        final = solver.loader.run(flows)
        self._flows, self._out = flows, final
        return ForwardState(q, params, inputs, probs, flows, final, f)

    def frozen(self, state: ForwardState, demand, params: ParamVector) -> DnlOutputs:
        """Load the assignment of ``demand`` at ``state``'s frozen costs under ``params``."""
        probs = self.structure.probabilities(state.inputs.costs(params))
        return self.solver.loader.run(self.structure.flows(demand, probs))


# ----------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class EstimationConfig:
    weights: tuple = (1.0, 1.0, 1.0)
    normalize_weights: bool = True  # divide each weight by the mean square of its observations
    lr_demand: float = 5.0
    lr_params: float = 0.005
    iterations: int = 300
    optimizer: str = "adam"  # adam | plain
    momentum: float = 0.0  # plain rule only
    decay: float = 1.0  # learning-rate multiplier per iteration
    beta1: float = 0.9
    beta2: float = 0.999
    demand_upper: float | None = None
    equilibrium_iterations: int = 1
    estimate_demand: bool = True
    estimate_params: bool = True
    divergence_factor: float = 10.0
    divergence_patience: int = 5
    seed: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (3,) or np.any(w < 0) or not np.any(w > 0):
            raise EstimationError("weights must be three non-negative numbers, not all zero")
        if self.lr_demand <= 0 or self.lr_params <= 0:
            raise EstimationError("learning rates must be > 0")
        if self.iterations < 0:
            raise EstimationError("iterations must be >= 0")
        if self.optimizer not in ("adam", "plain"):
            raise EstimationError(f"unknown optimizer {self.optimizer!r}")
        if self.equilibrium_iterations < 0:
            raise EstimationError("equilibrium_iterations must be >= 0")

    def effective_weights(self, obs: ObservationSet) -> np.ndarray:
        w = np.asarray(self.weights, dtype=float).copy()
        if self.normalize_weights:
            for i, comp in enumerate(COMPONENTS):
                ms = obs.mean_square(comp)
                w[i] = w[i] / ms if ms > 0 else 0.0
        return w


class _Adam:
    def __init__(self, size, lr, cfg: EstimationConfig):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.lr, self.cfg, self.t = lr, cfg, 0

    def step(self, g):
        c = self.cfg
        self.t += 1
        lr = self.lr * c.decay ** (self.t - 1)
        if c.optimizer == "plain":
            self.m = c.momentum * self.m + g
            return -lr * self.m
        self.m = c.beta1 * self.m + (1 - c.beta1) * g
        self.v = c.beta2 * self.v + (1 - c.beta2) * g * g
        mh = self.m / (1 - c.beta1**self.t)
        vh = self.v / (1 - c.beta2**self.t)
        return -lr * mh / (np.sqrt(vh) + 1e-12)


@dataclass
class TraceRow:
    iteration: int
    total: float
    nmse: dict
    params: dict
    demand_hash: str


@dataclass(eq=False)
class EstimationResult:
    demand: np.ndarray
    params: ParamVector
    trace: list
    best_iteration: int
    state: ForwardState
    weights: np.ndarray
    fit: dict = field(default_factory=dict)


def demand_hash(q) -> str:
    return hashlib.sha256(np.ascontiguousarray(q, dtype=float).tobytes()).hexdigest()[:16]


def estimate(model: Model, demand0, params0: ParamVector, obs: ObservationSet,
             cfg: EstimationConfig | None = None, callback=None) -> EstimationResult:
    """Projected gradient descent on demand and free parameters; returns the best iterate seen."""
    cfg = cfg or EstimationConfig()
    q = np.asarray(demand0, dtype=float).copy()
    if np.any(q < 0):
        raise EstimationError("initial demand must be >= 0")
    theta = params0
    w = cfg.effective_weights(obs)
    opt_q = _Adam(q.size, cfg.lr_demand, cfg)
    opt_t = _Adam(int(theta.free.sum()), cfg.lr_params, cfg)
    trace, best = [], None
    initial, strikes = None, 0
    for it in range(cfg.iterations + 1):
        state = model.evaluate(q, theta)
        total, _ = loss(state.dnl, obs, w)
        nmse = normalized_mse(state.dnl, obs)
        trace.append(TraceRow(it, total, nmse, theta.as_dict(), demand_hash(q)))
        if callback is not None:
            callback(trace[-1])
        if best is None or total < best[0]:
            best = (total, it, q.copy(), theta, state)
        if initial is None:
            initial = total
        strikes = strikes + 1 if total > cfg.divergence_factor * max(initial, 1e-300) else 0
        if strikes >= cfg.divergence_patience:
            raise EstimationDiverged(
                f"loss above {cfg.divergence_factor}x its initial value for {strikes} iterations (iteration {it})"
            )
        if it == cfg.iterations:
            break
        g_q, g_t = backward(state, obs, w, model.structure)
        if cfg.estimate_demand:
            q = q + opt_q.step(g_q.ravel()).reshape(q.shape)
            q = np.maximum(q, 0.0)
            if cfg.demand_upper is not None:
                q = np.minimum(q, cfg.demand_upper)
        if cfg.estimate_params and g_t.size:
            theta = theta.with_free_values(theta.values[theta.free] + opt_t.step(g_t))
    _, it_best, q_best, theta_best, state_best = best
    res = EstimationResult(q_best, theta_best, trace, it_best, state_best, w)
    res.fit = goodness_of_fit(state_best.dnl, obs)
    return res


def write_trace(trace, path) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,total,nmse_flow,nmse_pt,nmse_tt,demand_hash\n")
        for r in trace:
            fh.write(f"{r.iteration},{r.total!r},{r.nmse['flow']!r},{r.nmse['pt']!r},{r.nmse['tt']!r},{r.demand_hash}\n")


def write_fit_report(fit: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write("component,r2,sse,n\n")
        for comp, f in fit.items():
            fh.write(f"{comp},{f.r2!r},{f.sse!r},{f.n}\n")
