"""Wald tests of disutility parameters and backward variable selection.

The covariance of the estimates is approximated by ``s2 * inv(J'J)`` where
``J`` is the Jacobian of the simulated observables with respect to the free
parameters and ``s2 = SSE / (n - p)``.  Each data source is tested on its
own; a parameter counts as significant if any source finds it so.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .choice import ParamVector, dcost_dparams
from .dnl import travel_time_derivative
from .estimation import COMPONENTS, EstimationConfig, EstimationResult, ForwardState, ObservationSet, estimate, loss

RCOND = 1e-10
NULL_WEIGHT = 1e-6  # share of a parameter's direction lying in the discarded subspace


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class ParameterTest:
    name: str
    estimate: float
    null: float
    se: float
    z: float
    p: float
    ci_lo: float
    ci_hi: float
    significant: bool
    zero_column: bool = False


@dataclass(frozen=True)
class WaldReport:
    component: str
    tests: tuple
    sigma2: float
    n: int
    p: int
    alpha: float
    condition: float
    pseudo_inverse: bool
    diagnostics: tuple = ()

    def by_name(self) -> dict:
        return {t.name: t for t in self.tests}


def output_jacobian(state: ForwardState, structure, component: str, obs: ObservationSet | None = None,
                    names=None) -> np.ndarray:
    """Jacobian of one component's simulated observables with respect to free parameters.

    Rows are the observed entries of the component (all entries if ``obs`` is
    None); columns follow ``names`` (default: the free parameters in order).
    """
    params = state.params
    free = params.free_names
    names = free if names is None else tuple(names)
    missing = [n for n in names if n not in free]
    if missing:
        raise StatsError(f"parameters not active: {missing}")
    cols = [free.index(n) for n in names]
    X = dcost_dparams(state.inputs, params)[:, np.flatnonzero(params.free)[cols]]
    dfdc = structure.dflow_dcost(state.probs, state.flows)
    G = dfdc @ X  # d(path flow)/d(theta), sparse
    out = state.dnl
    if component == "flow":
        J = out.rho_car @ G
    elif component == "pt":
        J = out.rho_transit @ G
    elif component == "tt":
        J = travel_time_derivative(out, "minutes") @ (out.rho_car @ G)
    else:
        raise StatsError(f"unknown component {component!r}")
    J = np.asarray(J.todense()) if hasattr(J, "todense") else np.asarray(J)
    if obs is not None:
        J = J[obs.mask(component)]
    return J


def wald_test(J, sse: float, n: int, estimates, names=None, null=None, alpha: float = 0.05,
              component: str = "", rcond: float = RCOND) -> WaldReport:
    """Pseudo-t statistics for each column of ``J``."""
    J = np.asarray(J, dtype=float)
    est = np.asarray(estimates, dtype=float)
    p = J.shape[1]
    names = tuple(names) if names is not None else tuple(f"theta{j}" for j in range(p))
    null = np.zeros(p) if null is None else np.asarray(null, dtype=float)
    if est.shape != (p,) or len(names) != p or null.shape != (p,):
        raise StatsError("estimates, names and null values must match the Jacobian's columns")
    if n <= p:
        raise StatsError(f"need more observations than parameters (n={n}, p={p})")
    if not np.any(J):
        raise StatsError("Jacobian is identically zero")
    sigma2 = float(sse) / (n - p)
    zero = ~np.any(J != 0, axis=0)
    live = np.flatnonzero(~zero)
    JtJ = J[:, live].T @ J[:, live]
    ev, V = np.linalg.eigh(JtJ)
    ev = np.clip(ev, 0.0, None)
    cond = float(ev[-1] / ev[0]) if ev[0] > 0 else float("inf")
    pseudo = cond > 1.0 / rcond
    unidentified = np.zeros(live.size, bool)
    if pseudo:
        keep = ev > rcond * ev[-1]
        inv = (V[:, keep] / ev[keep]) @ V[:, keep].T
        # a parameter with weight in the discarded directions cannot be pinned down by the data
        unidentified = np.sum(V[:, ~keep] ** 2, axis=1) > NULL_WEIGHT
    else:
        inv = np.linalg.inv(JtJ)
    var = np.full(p, np.inf)
    var[live] = np.where(unidentified, np.inf, sigma2 * np.clip(np.diag(inv), 0.0, None))
    se = np.sqrt(var)
    diff = est - null
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / se, np.where(diff == 0, 0.0, np.sign(diff) * np.inf))
    z = np.where(np.isinf(se), 0.0, z)
    pval = np.clip(2.0 * norm.sf(np.abs(z)), 0.0, 1.0)
    crit = norm.isf(alpha / 2.0)
    tests = tuple(
        ParameterTest(names[j], float(est[j]), float(null[j]), float(se[j]), float(z[j]), float(pval[j]),
                      float(est[j] - crit * se[j]), float(est[j] + crit * se[j]), bool(pval[j] < alpha),
                      bool(zero[j]))
        for j in range(p)
    )
    diag = []
    if pseudo:
        diag.append(f"pseudo-inverse used (condition number {cond:.3g})")
    if zero.any():
        diag.append("zero Jacobian column(s): " + ", ".join(names[j] for j in np.flatnonzero(zero)))
    if unidentified.any():
        diag.append("not identified by the data: " + ", ".join(names[j] for j in live[unidentified]))
    return WaldReport(component, tests, sigma2, int(n), int(p), alpha, cond, pseudo, tuple(diag))


@dataclass(eq=False)
class ComponentTests:
    reports: dict  # component -> WaldReport
    significant: dict  # parameter -> combined flag
    skipped: dict  # component -> reason


def test_all_components(state: ForwardState, structure, obs: ObservationSet, alpha: float = 0.05,
                        null: dict | None = None) -> ComponentTests:
    """Wald test on each data source separately, combined with an OR over sources."""
    names = state.params.free_names
    if not names:
        raise StatsError("no free parameters to test")
    est = np.array([state.params.get(n) for n in names])
    null_v = np.array([(null or {}).get(n, 0.0) for n in names])
    _, parts = loss(state.dnl, obs, [float(obs.count(c) > 0) for c in COMPONENTS])
    reports, skipped = {}, {}
    for comp in COMPONENTS:
        n = obs.count(comp)
        if n == 0:
            skipped[comp] = "no observations"
            continue
        if n <= len(names):
            skipped[comp] = f"n={n} not above p={len(names)}"
            continue
        J = output_jacobian(state, structure, comp, obs)
        if not np.any(J):
            skipped[comp] = "Jacobian identically zero"
            continue
        reports[comp] = wald_test(J, parts[comp], n, est, names, null_v, alpha, comp)
    if not reports:
        raise StatsError("no data component could be tested")
    return ComponentTests(reports, combine_significance(reports.values(), names), skipped)


def combine_significance(reports, names) -> dict:
    """A parameter is significant overall if any data source finds it significant."""
    reports = list(reports)
    return {nm: any(r.by_name()[nm].significant for r in reports) for nm in names}


@dataclass(eq=False)
class SelectionResult:
    params: ParamVector
    demand: np.ndarray
    tests: ComponentTests
    history: list = field(default_factory=list)  # (round, removed names, remaining names)
    results: list = field(default_factory=list)


def select_variables(model, demand0, params0: ParamVector, obs: ObservationSet, alpha: float = 0.05,
                     max_rounds: int = 3, cfg: EstimationConfig | None = None, callback=None) -> SelectionResult:
    """Estimate, test, drop parameters insignificant in every data source, and repeat."""
    if max_rounds < 1:
        raise StatsError("max_rounds must be >= 1")
    q, theta = np.asarray(demand0, dtype=float), params0
    history, results = [], []
    for k in range(1, max_rounds + 1):
        res: EstimationResult = estimate(model, q, theta, obs, cfg)
        results.append(res)
        tests = test_all_components(res.state, model.structure, obs, alpha)
        drop = [n for n, s in tests.significant.items() if not s]
        remaining = [n for n in res.params.free_names if n not in drop]
        history.append((k, tuple(drop), tuple(remaining)))
        if callback is not None:
            callback(k, res, tests, drop)
        if not drop or k == max_rounds:
            return SelectionResult(res.params, res.demand, tests, history, results)
        if not remaining:
            raise StatsError("every parameter was found insignificant; the model is degenerate")
        q, theta = res.demand, res.params.drop(drop)
    raise AssertionError("unreachable")


def write_wald_report(tests: ComponentTests, path) -> None:
    with open(path, "w") as fh:
        fh.write("parameter,estimate,se,z,p,ci_lo,ci_hi,significant,component\n")
        for comp, rep in tests.reports.items():
            for t in rep.tests:
                fh.write(f"{t.name},{t.estimate!r},{t.se!r},{t.z!r},{t.p!r},{t.ci_lo!r},{t.ci_hi!r},"
                         f"{int(t.significant)},{comp}\n")
        for name, s in tests.significant.items():
            rows = [r.by_name()[name] for r in tests.reports.values()]
            est = rows[0].estimate
            fh.write(f"{name},{est!r},,,,,,{int(s)},combined\n")


def write_selection_history(history, path) -> None:
    with open(path, "w") as fh:
        fh.write("round,removed,remaining\n")
        for k, removed, remaining in history:
            fh.write(f"{k},{' '.join(removed)},{' '.join(remaining)}\n")
