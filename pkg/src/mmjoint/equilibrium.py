"""Stochastic dynamic user equilibrium by successive averages of path flows.

Each iteration loads the current path flows, turns the realized link and
transit times into per-path cost inputs, reassigns demand with the nested
logit, and averages the result into the running flows.  The gap is the
relative L1 change of the averaged flows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .choice import ChoiceProbabilities, ChoiceStructure, ParamVector, PathCostInputs, ScaleConfig, static_attributes
from .dnl import DnlOutputs, Loader, LoadingConfig
from .network import MultiModalNetwork


class EquilibriumError(RuntimeError):
    pass


@dataclass(frozen=True)
class EquilibriumConfig:
    max_iterations: int = 500
    tolerance: float = 1e-3
    averaging: str = "msa"  # msa (step 1/n) | fixed
    fixed_step: float = 0.5
    samples_per_interval: int = 9  # departure times traced per interval when assembling costs

    def __post_init__(self):
        if self.max_iterations < 1:
            raise EquilibriumError("max_iterations must be >= 1")
        if self.tolerance <= 0:
            raise EquilibriumError("tolerance must be > 0")
        if self.averaging not in ("msa", "fixed"):
            raise EquilibriumError(f"unknown averaging rule {self.averaging!r}")
        if not 0 < self.fixed_step <= 1:
            raise EquilibriumError("fixed_step must lie in (0, 1]")
        if self.samples_per_interval < 1:
            raise EquilibriumError("samples_per_interval must be >= 1")


@dataclass(eq=False)
class EquilibriumState:
    flows: np.ndarray  # (n_paths, n_dep)
    costs: np.ndarray  # (n_paths, n_dep), evaluated on ``dnl``
    inputs: PathCostInputs
    probs: ChoiceProbabilities
    dnl: DnlOutputs
    iterations: int
    converged: bool
    gaps: list = field(default_factory=list)

    def log_rows(self):
        return [(i + 1, g) for i, g in enumerate(self.gaps)]


# ----------------------------------------------------------------------------
# cost assembly


class CostAssembler:
    """Maps a completed load to per-path cost inputs by tracing departure times along each path.

    Driving legs use the piecewise-constant interval travel time of the link
    at the moment the vehicle enters it.  A ride leg catches the first trip
    whose realized departure from the boarding stop is not earlier than the
    passenger's arrival; waiting is the gap between the two and in-vehicle
    time runs to that trip's realized arrival at the alighting stop.  Where a
    trip never reached a stop inside the horizon, the timetable offset at
    free-flow speed stands in, and arrivals after the last trip are served by
    the last headway repeated.
    """

    def __init__(self, net: MultiModalNetwork, loading: LoadingConfig, samples: int = 9):
        self.net, self.loading, self.samples = net, loading, samples
        self.static = static_attributes(net)
        self.time_scale = float(net.setting("time_scale"))
        self.link_pos = {l: i for i, l in enumerate(net.links)}
        speed = loading.walking_speed_mph
        self.walk_s = {w: net.walks[w].length / speed * 3600.0 for w in net.walks}
        self.offsets = {lid: self._nominal_offsets(line) for lid, line in net.lines.items()}
        self.stop_pos = {lid: {v: i for i, v in enumerate(line.stops)} for lid, line in net.lines.items()}
        nd, I = loading.n_dep, loading.interval_s
        frac = (np.arange(samples) + 0.5) / samples
        self.depart_times = ((np.arange(nd)[:, None] + frac[None, :]) * I).ravel()

    def _nominal_offsets(self, line) -> np.ndarray:
        net = self.net
        if line.mode == "metro":
            return np.concatenate([[0.0], np.cumsum(line.station_times)])
        route = list(line.route_links)
        start = np.concatenate([[0.0], np.cumsum([net.links[l].free_flow_time_s for l in route])])
        out = []
        for v in line.stops:
            stop = net.stops[v]
            i = route.index(stop.host_link)
            link = net.links[stop.host_link]
            out.append(start[i] + stop.milepost / link.length * link.free_flow_time_s)
        return np.array(out)

    def _timetable(self, out: DnlOutputs):
        """Per line: realized (departure, arrival) seconds, shape (n_trips, n_stops), gaps filled."""
        net = self.net
        table = {}
        for lid, line in net.lines.items():
            nominal = np.asarray(line.trips, float)[:, None] + self.offsets[lid][None, :]
            table[lid] = [nominal.copy(), nominal.copy()]
        for p, (stop, lid, j) in enumerate(out.pairs):
            i = self.stop_pos[lid][stop]
            if np.isfinite(out.pair_departure[p]):
                table[lid][0][j, i] = out.pair_departure[p]
            if np.isfinite(out.pair_arrival[p]):
                table[lid][1][j, i] = out.pair_arrival[p]
        return table

    def assemble(self, out: DnlOutputs) -> PathCostInputs:
        net, cfg = self.net, self.loading
        nd, ns = cfg.n_dep, self.samples
        n = len(net.paths)
        t_c = out.t_c
        n_int = t_c.shape[1]
        I = cfg.interval_s
        table = self._timetable(out)
        acc = {k: np.zeros((n, nd)) for k in ("w_car", "w_bus", "w_metro", "wait_bus", "wait_metro", "walk")}
        for k, path in enumerate(net.paths):
            T = self.depart_times.copy()
            parts = {key: np.zeros_like(T) for key in acc}
            for leg in path.legs:
                if leg.kind == "drive":
                    idx = np.minimum((T // I).astype(int), n_int - 1)
                    dt_s = t_c[self.link_pos[leg.ref], idx] * 60.0
                    parts["w_car"] += dt_s
                    T = T + dt_s
                elif leg.kind == "walk":
                    parts["walk"] += self.walk_s[leg.ref]
                    T = T + self.walk_s[leg.ref]
                elif leg.kind == "ride":
                    line = net.lines[leg.ref]
                    dep_tab, arr_tab = table[leg.ref]
                    b, a = self.stop_pos[leg.ref][leg.board], self.stop_pos[leg.ref][leg.alight]
                    dep, arr = self._catch(T, dep_tab[:, b], arr_tab[:, a], line.trips,
                                           self.offsets[leg.ref][a] - self.offsets[leg.ref][b])
                    parts[f"wait_{line.mode}"] += dep - T
                    parts[f"w_{line.mode}"] += arr - dep
                    T = arr
            for key in acc:
                acc[key][k] = parts[key].reshape(nd, ns).mean(axis=1)
        scale = self.time_scale / 60.0  # seconds -> minutes -> model units
        return PathCostInputs(**{key: v * scale for key, v in acc.items()}, **self.static)

    @staticmethod
    def _catch(T, dep, arr, trips, nominal_ride):
        """Departure and arrival of the first trip leaving at or after each time in ``T``."""
        headway = trips[-1] - trips[-2] if len(trips) > 1 else 3600.0
        later = dep[None, :] >= T[:, None] - 1e-9
        has = later.any(axis=1)
        j = np.where(has, np.argmax(np.where(later, -dep[None, :], -np.inf), axis=1), 0)
        d = np.where(has, dep[j], 0.0)
        a = np.where(has, np.maximum(arr[j], dep[j]), 0.0)
        if not has.all():
            last = dep[-1]
            k = np.ceil((T[~has] - last) / headway)
            d[~has] = last + np.maximum(k, 1.0) * headway
            a[~has] = d[~has] + nominal_ride
        return d, a


def assemble_costs(out: DnlOutputs, net: MultiModalNetwork, loading: LoadingConfig | None = None,
                   samples: int = 9) -> PathCostInputs:
    """Per (path, departure interval) cost inputs from one completed load."""
    loading = loading or LoadingConfig.for_network(net)
    return CostAssembler(net, loading, samples).assemble(out)


# ----------------------------------------------------------------------------
# solver


class EquilibriumSolver:
    """Reusable solver holding the loader, cost assembler and choice structure for one network."""

    def __init__(self, net: MultiModalNetwork, cfg: EquilibriumConfig | None = None,
                 loading: LoadingConfig | None = None, scales: ScaleConfig | None = None):
        self.net = net
        self.cfg = cfg or EquilibriumConfig()
        self.loading = loading or LoadingConfig.for_network(net)
        self.loader = Loader(net, self.loading)
        self.assembler = CostAssembler(net, self.loading, self.cfg.samples_per_interval)
        self.structure = ChoiceStructure.from_network(net, scales)
        self.n_od, self.n_dep = len(net.od_pairs), self.loading.n_dep

    def check_demand(self, demand):
        q = np.asarray(demand, dtype=float)
        if q.shape != (self.n_od, self.n_dep):
            raise EquilibriumError(f"demand must have shape {(self.n_od, self.n_dep)}, got {q.shape}")
        if np.any(q < 0) or not np.all(np.isfinite(q)):
            raise EquilibriumError("demand must be finite and >= 0")
        return q

    def assign(self, demand, params: ParamVector, out: DnlOutputs):
        """One logit assignment on the costs realized in ``out``."""
        inputs = self.assembler.assemble(out)
        costs = inputs.costs(params)
        bad = ~np.all(np.isfinite(costs), axis=1)
        if bad.any():
            raise EquilibriumError(f"non-finite cost on path {self.net.paths[int(np.flatnonzero(bad)[0])].id}")
        probs = self.structure.probabilities(costs)
        return self.structure.flows(demand, probs), inputs, costs, probs

    def solve(self, demand, params: ParamVector, warm_start=None, max_iterations=None) -> EquilibriumState:
        q = self.check_demand(demand)
        cfg = self.cfg
        limit = max_iterations or cfg.max_iterations
        if warm_start is None:
            empty = self.loader.run(np.zeros((len(self.net.paths), self.n_dep)))
            f = self.assign(q, params, empty)[0]
        else:
            f = np.asarray(warm_start, dtype=float).copy()
        gaps, converged = [], False
        for n in range(1, limit + 1):
            out = self.loader.run(f)
            y = self.assign(q, params, out)[0]
            step = 1.0 / n if cfg.averaging == "msa" else cfg.fixed_step
            if warm_start is not None and cfg.averaging == "msa":
                step = 1.0 / (n + 1)  # a warm start already carries history
            f_new = f + step * (y - f)
            denom = np.abs(f_new).sum()
            gap = float(np.abs(f_new - f).sum() / denom) if denom > 0 else 0.0
            gaps.append(gap)
            f = f_new
            if gap < cfg.tolerance:
                converged = True
                break
        out = self.loader.run(f)
        inputs = self.assembler.assemble(out)
        costs = inputs.costs(params)
        probs = self.structure.probabilities(costs)
        return EquilibriumState(f, costs, inputs, probs, out, len(gaps), converged, gaps)


def solve(demand, params: ParamVector, net: MultiModalNetwork, cfg: EquilibriumConfig | None = None,
          loading: LoadingConfig | None = None, scales: ScaleConfig | None = None, warm_start=None) -> EquilibriumState:
    """Equilibrium path flows for demand ``(n_od, n_dep)`` and one parameter vector."""
    return EquilibriumSolver(net, cfg, loading, scales).solve(demand, params, warm_start)


def write_convergence_log(state: EquilibriumState, path) -> None:
    with open(path, "w") as fh:
        fh.write("iteration\tgap\n")
        for i, g in state.log_rows():
            fh.write(f"{i}\t{g!r}\n")
