"""Disutility functions, three-layer nested logit, and their analytic Jacobians.

Every path cost is linear in the parameter vector, so costs are evaluated as
``X @ theta`` with a feature matrix ``X`` whose rows are (path, departure
interval) pairs and whose columns are the 34 named parameters.  ``X`` is also
the Jacobian of costs with respect to the parameters.

Flat indexing conventions used throughout the package:

* path-flow / cost vectors: ``k * n_t + t`` for path ``k``, interval ``t``;
* demand vectors: ``od * n_t + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .network import FIRST_LEVEL, NEST_OF, SUBMODES, MultiModalNetwork

BETA_NAMES = ("beta1_car", "beta1_bus", "beta1_metro", "beta2", "beta3_bus", "beta3_metro", "beta4")
GAMMA_NAMES = tuple(f"gamma{i}_{g}" for i in (1, 2, 3) for g in SUBMODES)
ALPHA_NAMES = tuple(f"alpha_{g}" for g in SUBMODES if g != "car")
PARAM_NAMES = BETA_NAMES + GAMMA_NAMES + ALPHA_NAMES
PARAM_INDEX = {n: i for i, n in enumerate(PARAM_NAMES)}

TIME_FIELDS = ("w_car", "w_bus", "w_metro", "wait_bus", "wait_metro", "walk")


class ChoiceError(ValueError):
    pass


# ----------------------------------------------------------------------------
# parameters


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Named disutility coefficients.  Entries missing from ``names`` act as 0."""

    names: tuple
    values: np.ndarray
    free: np.ndarray

    def __post_init__(self):
        names = tuple(self.names)
        if len(set(names)) != len(names):
            raise ChoiceError("duplicate parameter names")
        unknown = [n for n in names if n not in PARAM_INDEX]
        if unknown:
            raise ChoiceError(f"unknown parameters: {unknown}")
        values = np.asarray(self.values, dtype=float).copy()
        free = np.asarray(self.free, dtype=bool).copy()
        if values.shape != (len(names),) or free.shape != (len(names),):
            raise ChoiceError("values/free must have one entry per name")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "free", free)

    @classmethod
    def from_dict(cls, values: dict, fixed=()):
        names = tuple(n for n in PARAM_NAMES if n in values)
        extra = set(values) - set(names)
        if extra:
            raise ChoiceError(f"unknown parameters: {sorted(extra)}")
        return cls(names, [values[n] for n in names], [n not in fixed for n in names])

    @classmethod
    def full(cls, values: dict | None = None):
        values = values or {}
        return cls.from_dict({n: values.get(n, 0.0) for n in PARAM_NAMES})

    def __len__(self):
        return len(self.names)

    @property
    def columns(self) -> np.ndarray:
        """Positions of the entries in the full 34-column feature matrix."""
        return np.array([PARAM_INDEX[n] for n in self.names], dtype=int)

    @property
    def free_names(self) -> tuple:
        return tuple(n for n, f in zip(self.names, self.free) if f)

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values.tolist()))

    def get(self, name, default=0.0):
        return self.as_dict().get(name, default)

    def full_values(self) -> np.ndarray:
        out = np.zeros(len(PARAM_NAMES))
        out[self.columns] = self.values
        return out

    def with_values(self, values):
        return ParamVector(self.names, values, self.free)

    def with_free_values(self, free_values):
        values = self.values.copy()
        values[self.free] = free_values
        return self.with_values(values)

    def drop(self, names):
        keep = [i for i, n in enumerate(self.names) if n not in set(names)]
        return ParamVector(tuple(self.names[i] for i in keep), self.values[keep], self.free[keep])


@dataclass(frozen=True)
class ScaleConfig:
    """Nest scale parameters; all default to 1."""

    first_level: dict = field(default_factory=dict)
    second_level: dict = field(default_factory=dict)

    def __post_init__(self):
        for d in (self.first_level, self.second_level):
            for k, v in d.items():
                if not v > 0:
                    raise ChoiceError(f"scale for {k!r} must be > 0")

    def theta_m(self, m):
        return float(self.first_level.get(m, 1.0))

    def theta_g(self, g):
        return float(self.second_level.get(g, 1.0))


# ----------------------------------------------------------------------------
# disutility


def feature_row(submode, w_car=0.0, w_bus=0.0, w_metro=0.0, wait_bus=0.0, wait_metro=0.0,
                walk=0.0, tau=0.0, delta=0.0, income=0.0, dens_o=0.0, dens_d=0.0) -> np.ndarray:
    """Coefficients of every parameter in one path's disutility."""
    if submode not in NEST_OF:
        raise ChoiceError(f"unknown mode {submode!r}")
    has_car = "car" in submode
    has_bus = "bus" in submode
    has_metro = "metro" in submode
    if not has_car and w_car:
        raise ChoiceError(f"{submode} path cannot carry car time")
    if not has_bus and (w_bus or wait_bus):
        raise ChoiceError(f"{submode} path cannot carry bus times")
    if not has_metro and (w_metro or wait_metro):
        raise ChoiceError(f"{submode} path cannot carry metro times")
    if submode == "car" and walk:
        raise ChoiceError("driving disutility has no walking term")
    row = np.zeros(len(PARAM_NAMES))
    row[PARAM_INDEX["beta1_car"]] = w_car
    row[PARAM_INDEX["beta1_bus"]] = w_bus
    row[PARAM_INDEX["beta1_metro"]] = w_metro
    row[PARAM_INDEX["beta2"]] = tau + delta
    row[PARAM_INDEX["beta3_bus"]] = wait_bus
    row[PARAM_INDEX["beta3_metro"]] = wait_metro
    row[PARAM_INDEX["beta4"]] = walk
    row[PARAM_INDEX[f"gamma1_{submode}"]] = income
    row[PARAM_INDEX[f"gamma2_{submode}"]] = dens_o
    row[PARAM_INDEX[f"gamma3_{submode}"]] = dens_d
    if submode != "car":
        row[PARAM_INDEX[f"alpha_{submode}"]] = 1.0
    return row


def disutility(submode, params: ParamVector, **inputs) -> float:
    """Cost of one path given its (already unit-scaled) inputs; see :func:`feature_row`."""
    return float(feature_row(submode, **inputs)[params.columns] @ params.values)


@dataclass(frozen=True, eq=False)
class PathCostInputs:
    """Per (path, interval) times plus static per-path attributes, in model units.

    Time arrays have shape ``(n_paths, n_t)``; static arrays ``(n_paths,)``.
    """

    submodes: tuple
    w_car: np.ndarray
    w_bus: np.ndarray
    w_metro: np.ndarray
    wait_bus: np.ndarray
    wait_metro: np.ndarray
    walk: np.ndarray
    tau: np.ndarray
    delta: np.ndarray
    income: np.ndarray
    dens_o: np.ndarray
    dens_d: np.ndarray

    def __post_init__(self):
        n = len(self.submodes)
        shape = None
        for name in TIME_FIELDS:
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise ChoiceError(f"{name} must have shape (n_paths, n_t)")
            shape = shape or arr.shape
            if arr.shape != shape:
                raise ChoiceError("time arrays disagree on shape")
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ChoiceError(f"{name} must be finite and >= 0")
            object.__setattr__(self, name, arr)
        for name in ("tau", "delta", "income", "dens_o", "dens_d"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ChoiceError(f"{name} must have shape (n_paths,)")
            object.__setattr__(self, name, arr)
        mask = {
            "w_car": [("car" in g) for g in self.submodes],
            "w_bus": [("bus" in g) for g in self.submodes],
            "wait_bus": [("bus" in g) for g in self.submodes],
            "w_metro": [("metro" in g) for g in self.submodes],
            "wait_metro": [("metro" in g) for g in self.submodes],
            "walk": [g != "car" for g in self.submodes],
        }
        for name, allowed in mask.items():
            bad = ~np.asarray(allowed) & np.any(getattr(self, name) != 0, axis=1)
            if np.any(bad):
                raise ChoiceError(f"{name} nonzero on paths whose mode lacks that leg: {np.flatnonzero(bad)[:5]}")

    @property
    def n_paths(self):
        return len(self.submodes)

    @property
    def n_t(self):
        return self.w_car.shape[1]

    def features(self) -> np.ndarray:
        """Dense feature matrix, rows ``k * n_t + t``, 34 columns."""
        n, T = self.n_paths, self.n_t
        X = np.zeros((n, T, len(PARAM_NAMES)))
        X[:, :, PARAM_INDEX["beta1_car"]] = self.w_car
        X[:, :, PARAM_INDEX["beta1_bus"]] = self.w_bus
        X[:, :, PARAM_INDEX["beta1_metro"]] = self.w_metro
        X[:, :, PARAM_INDEX["beta2"]] = (self.tau + self.delta)[:, None]
        X[:, :, PARAM_INDEX["beta3_bus"]] = self.wait_bus
        X[:, :, PARAM_INDEX["beta3_metro"]] = self.wait_metro
        X[:, :, PARAM_INDEX["beta4"]] = self.walk
        for k, g in enumerate(self.submodes):
            X[k, :, PARAM_INDEX[f"gamma1_{g}"]] = self.income[k]
            X[k, :, PARAM_INDEX[f"gamma2_{g}"]] = self.dens_o[k]
            X[k, :, PARAM_INDEX[f"gamma3_{g}"]] = self.dens_d[k]
            if g != "car":
                X[k, :, PARAM_INDEX[f"alpha_{g}"]] = 1.0
        return X.reshape(n * T, len(PARAM_NAMES))

    def costs(self, params: ParamVector) -> np.ndarray:
        """Path costs, shape ``(n_paths, n_t)``."""
        c = self.features()[:, params.columns] @ params.values
        return c.reshape(self.n_paths, self.n_t)


def static_attributes(net: MultiModalNetwork) -> dict:
    """Per-path fees and zone attributes with the network's unit scales applied."""
    money = float(net.setting("money_scale"))
    inc = float(net.setting("income_scale"))
    dens = float(net.setting("density_scale"))
    return dict(
        submodes=tuple(p.submode for p in net.paths),
        tau=np.array([p.tau for p in net.paths]) * money,
        delta=np.array([p.delta for p in net.paths]) * money,
        income=np.array([net.od_income[p.od] for p in net.paths]) * inc,
        dens_o=np.array([net.zones[p.origin].density for p in net.paths]) * dens,
        dens_d=np.array([net.zones[p.dest].density for p in net.paths]) * dens,
    )


def dcost_dparams(inputs: PathCostInputs, params: ParamVector) -> sp.csr_matrix:
    """Jacobian of the (path, interval) cost vector with respect to ``params`` entries."""
    return sp.csr_matrix(inputs.features()[:, params.columns])


# ----------------------------------------------------------------------------
# nested logit


@dataclass(frozen=True, eq=False)
class ChoiceProbabilities:
    """Per-path factors of the nested logit for every interval.

    All arrays have shape ``(n_paths, n_t)``: ``p_path`` is the within-nest path
    probability, ``p_second`` the probability of the path's second-level mode
    within its first-level mode, ``p_first`` the probability of the path's
    first-level mode.  Unavailable paths carry zeros in all three.
    ``iv_second`` / ``iv_first`` map mode labels to inclusive values per interval
    for the first O-D pair (or the only one, for single-block calls).
    """

    p_path: np.ndarray
    p_second: np.ndarray
    p_first: np.ndarray
    iv_second: dict
    iv_first: dict

    @property
    def joint(self) -> np.ndarray:
        return self.p_first * self.p_second * self.p_path


class ChoiceStructure:
    """Grouping of a path table into O-D blocks and nests, used for batched evaluation."""

    def __init__(self, submodes, od_of_path, n_od=None, scales: ScaleConfig | None = None,
                 available=None):
        self.submodes = tuple(submodes)
        self.od = np.asarray(od_of_path, dtype=int)
        self.n_paths = len(self.submodes)
        self.n_od = int(n_od if n_od is not None else self.od.max() + 1)
        self.scales = scales or ScaleConfig()
        self.available = np.ones(self.n_paths, bool) if available is None else np.asarray(available, bool)
        for g in self.submodes:
            if g not in NEST_OF:
                raise ChoiceError(f"unknown mode {g!r}")
        self.first = tuple(NEST_OF[g] for g in self.submodes)
        self.theta_g = np.array([self.scales.theta_g(g) for g in self.submodes])
        self.theta_m = np.array([self.scales.theta_m(m) for m in self.first])
        self.blocks = []
        for o in range(self.n_od):
            idx = np.flatnonzero((self.od == o) & self.available)
            if idx.size == 0:
                raise ChoiceError(f"O-D block {o} has an empty choice set")
            nests = {}
            for k in idx:
                m, g = self.first[k], self.submodes[k]
                nests.setdefault(m, {}).setdefault(g, []).append(k)
            nests = {m: {g: np.array(v) for g, v in gs.items()} for m, gs in nests.items()}
            g_code = np.array([SUBMODES.index(self.submodes[k]) for k in idx])
            m_code = np.array([FIRST_LEVEL.index(self.first[k]) for k in idx])
            self.blocks.append((idx, nests, g_code, m_code))

    @classmethod
    def from_network(cls, net: MultiModalNetwork, scales=None, available=None):
        od_pos = {od: i for i, od in enumerate(net.od_pairs)}
        return cls([p.submode for p in net.paths], [od_pos[p.od] for p in net.paths],
                   len(net.od_pairs), scales, available)

    def probabilities(self, costs: np.ndarray) -> ChoiceProbabilities:
        costs = np.asarray(costs, dtype=float)
        if costs.ndim == 1:
            costs = costs[:, None]
        if costs.shape[0] != self.n_paths:
            raise ChoiceError("cost array does not match the path table")
        if not np.all(np.isfinite(costs[self.available])):
            bad = np.flatnonzero(~np.all(np.isfinite(costs), axis=1) & self.available)
            raise ChoiceError(f"non-finite cost on path(s) {bad[:5].tolist()}")
        pk = np.zeros_like(costs)
        pg = np.zeros_like(costs)
        pm = np.zeros_like(costs)
        iv_second, iv_first = {}, {}
        for b, (idx, nests, _, _) in enumerate(self.blocks):
            top = {}
            for m, gs in nests.items():
                th_m = self.scales.theta_m(m)
                lower = {}
                for g, ks in gs.items():
                    th_g = self.scales.theta_g(g)
                    z = -costs[ks] / th_g
                    iv = logsumexp(z, axis=0)
                    pk[ks] = np.exp(z - iv)
                    lower[g] = (th_g / th_m) * iv
                    if b == 0:
                        iv_second[g] = iv
                stack = np.vstack(list(lower.values()))
                iv_m = logsumexp(stack, axis=0)
                for g, ks in gs.items():
                    pg[ks] = np.exp(lower[g] - iv_m)
                top[m] = th_m * iv_m
                if b == 0:
                    iv_first[m] = iv_m
            stack = np.vstack(list(top.values()))
            denom = logsumexp(stack, axis=0)
            for m, gs in nests.items():
                pm_m = np.exp(top[m] - denom)
                for ks in gs.values():
                    pm[ks] = pm_m
        return ChoiceProbabilities(pk, pg, pm, iv_second, iv_first)

    def flows(self, demand: np.ndarray, probs: ChoiceProbabilities) -> np.ndarray:
        """Path flows ``(n_paths, n_t)`` from demand ``(n_od, n_t)``."""
        demand = np.asarray(demand, dtype=float)
        if np.any(demand < 0):
            raise ChoiceError("demand must be >= 0")
        return demand[self.od] * probs.joint

    def dflow_dcost(self, probs: ChoiceProbabilities, flows: np.ndarray) -> sp.csr_matrix:
        """Block-sparse Jacobian of flows with respect to costs (flat path-major indexing)."""
        T = flows.shape[1]
        rows, cols, vals = [], [], []
        for idx, _, g_code, m_code in self.blocks:
            same_g = (g_code[:, None] == g_code[None, :]).astype(float)
            same_m = (m_code[:, None] == m_code[None, :]).astype(float)
            eye = np.eye(idx.size)
            inv_g = (1.0 / self.theta_g[idx])[:, None]
            inv_m = (1.0 / self.theta_m[idx])[:, None]
            r = np.repeat(idx, idx.size) * T
            c = np.tile(idx, idx.size) * T
            for t in range(T):
                Pk = probs.p_path[idx, t][None, :]
                Pg = probs.p_second[idx, t][None, :]
                Pm = probs.p_first[idx, t][None, :]
                inner = (
                    -inv_g * (eye - same_g * Pk)
                    - inv_m * Pk * (same_g - same_m * Pg)
                    - Pg * Pk * (same_m - Pm)
                )
                block = flows[idx, t][:, None] * inner
                rows.append(r + t)
                cols.append(c + t)
                vals.append(block.ravel())
        n = self.n_paths * T
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))

    def dflow_ddemand(self, probs: ChoiceProbabilities) -> sp.csr_matrix:
        """Jacobian of flows (path-major) with respect to demand (O-D-major)."""
        n, T = probs.joint.shape
        k = np.repeat(np.arange(n), T)
        t = np.tile(np.arange(T), n)
        keep = self.available[k]
        return sp.csr_matrix(
            (probs.joint.ravel()[keep], ((k * T + t)[keep], (self.od[k] * T + t)[keep])),
            shape=(n * T, self.n_od * T),
        )


def nested_probabilities(costs, submodes, scales: ScaleConfig | None = None) -> ChoiceProbabilities:
    """Nested logit for one (O-D, interval) choice set of paths labelled by mode."""
    costs = np.asarray(costs, dtype=float).reshape(-1)
    if costs.size == 0:
        raise ChoiceError("empty choice set")
    if len(submodes) != costs.size:
        raise ChoiceError("one mode label per path required")
    structure = ChoiceStructure(submodes, np.zeros(costs.size, int), 1, scales)
    return structure.probabilities(costs[:, None])


def path_flows(demand: float, probs: ChoiceProbabilities) -> np.ndarray:
    if demand < 0:
        raise ChoiceError("demand must be >= 0")
    return demand * probs.joint[:, 0]


def dflow_dcost(probs: ChoiceProbabilities, flows, submodes, scales: ScaleConfig | None = None) -> sp.csr_matrix:
    """Single-block convenience wrapper around :meth:`ChoiceStructure.dflow_dcost`."""
    structure = ChoiceStructure(submodes, np.zeros(len(submodes), int), 1, scales)
    return structure.dflow_dcost(probs, np.asarray(flows, float).reshape(-1, 1))


def dflow_ddemand(probs: ChoiceProbabilities, submodes) -> sp.csr_matrix:
    structure = ChoiceStructure(submodes, np.zeros(len(submodes), int), 1)
    return structure.dflow_ddemand(probs)
