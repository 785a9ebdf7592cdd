"""Mesoscopic multi-modal dynamic network loading.

Cars move through a cell transmission model (one free-flow cell per loading
step, last cell takes the remainder of the link).  Each link keeps a FIFO
queue of packets, each packet a mapping cohort -> vehicles, so that the
composition of the flow leaving a link head is known; turning demand at a
node comes from that composition and merges are resolved by proportional
scaling of the receiving capacity (FIFO node model).

Buses are discrete vehicles that move at the local car speed of the cell they
occupy, take ``bus_pce`` car-equivalents of cell space, and stop at their
virtual stops when someone wants to alight, or when someone is waiting and
there is room on board.  Metro trains follow their fixed inter-station times
and only stretch their dwell.  Passengers are fluid: each (cohort, ride leg)
is a stream whose arrivals at the boarding stop are tracked per loading step;
boarding is FIFO across streams.

A cohort is a (path, departure interval) pair with flat index
``path * n_dep + interval``.
"""

from __future__ import annotations

import bisect
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .network import MultiModalNetwork, cell_layout

EPS = 1e-12


class LoadingError(ValueError):
    pass


@dataclass(frozen=True)
class LoadingConfig:
    step_s: float = 5.0
    interval_s: float = 900.0
    horizon_s: float = 3600.0
    demand_intervals: int | None = None  # defaults to horizon / interval
    boarding_interval_s: float = 5.0
    continue_threshold: float = 1.0  # boarders per boarding interval that keep the doors open
    bus_board_s: float = 2.0
    bus_alight_s: float = 1.5
    bus_min_dwell_s: float = 5.0
    metro_board_s: float = 1.0
    metro_doors: int = 6
    metro_min_dwell_s: float = 20.0
    max_dwell_s: float = 120.0
    walking_speed_mph: float = 3.1
    bus_pce: float | None = None  # default: car jam density / bus jam density
    halt_threshold: float = 1e-6  # passengers below this do not make a bus halt
    congestion_clamp: float = 1.0  # vehicles assumed to exit a fully blocked congested link
    min_tt_vehicles: float = 1.0  # entries below which an interval reports free-flow time

    def __post_init__(self):
        steps = self.interval_s / self.step_s
        if self.step_s <= 0 or abs(steps - round(steps)) > 1e-9:
            raise LoadingError("loading step must divide the aggregation interval")
        n = self.horizon_s / self.interval_s
        if self.horizon_s <= 0 or abs(n - round(n)) > 1e-9:
            raise LoadingError("horizon must be a multiple of the aggregation interval")
        if self.demand_intervals is not None and not 1 <= self.demand_intervals <= round(n):
            raise LoadingError("demand intervals must fit inside the horizon")
        if self.boarding_interval_s < self.step_s:
            raise LoadingError("boarding interval must be at least one loading step")

    @classmethod
    def for_network(cls, net: MultiModalNetwork, **overrides):
        base = dict(
            step_s=float(net.setting("loading_step_s")),
            interval_s=float(net.setting("aggregation_interval_s")),
            horizon_s=float(net.setting("horizon_s")),
            demand_intervals=int(net.setting("demand_intervals")),
            walking_speed_mph=float(net.setting("walking_speed_mph")),
        )
        base.update(overrides)
        return cls(**base)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon_s / self.step_s))

    @property
    def n_intervals(self) -> int:
        return int(round(self.horizon_s / self.interval_s))

    @property
    def n_dep(self) -> int:
        return self.demand_intervals if self.demand_intervals is not None else self.n_intervals

    @property
    def steps_per_interval(self) -> int:
        return int(round(self.interval_s / self.step_s))


def dwell_time(mode: str, n_alight: float, n_board: float, cfg: LoadingConfig) -> float:
    """Seconds a bus or train must stand at a stop for the given passenger exchange."""
    if mode == "bus":
        return max(cfg.bus_min_dwell_s, n_alight * cfg.bus_alight_s + n_board * cfg.bus_board_s)
    batches = math.ceil(n_board / cfg.metro_doors - 1e-9) if n_board > 0 else 0
    return max(cfg.metro_min_dwell_s, batches * cfg.metro_board_s)


def fifo_board(arrivals: np.ndarray, boarded: np.ndarray, upto: int, headroom: float, cumulative=False) -> np.ndarray:
    """Amount each stream boards, first come first served.

    ``arrivals[i, s]`` is what stream ``i`` delivered to the stop during step
    ``s`` (or, with ``cumulative=True``, the running total through step ``s``);
    ``boarded[i]`` what it has already boarded.  Passengers arriving in the
    same step are served in proportion.  Returns the new boardings.
    """
    cum = arrivals if cumulative else np.cumsum(arrivals[:, : upto + 1], axis=1)
    waiting = np.maximum(cum[:, upto] - boarded, 0.0)
    total = waiting.sum()
    if total <= headroom + EPS:
        return waiting
    if headroom <= 0:
        return np.zeros_like(waiting)
    target = boarded.sum() + headroom - EPS
    # first step whose combined cumulative arrivals reach the target
    lo, hi = 0, upto
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[:, mid].sum() >= target:
            hi = mid
        else:
            lo = mid + 1
    tau = lo
    before = cum[:, tau - 1] if tau > 0 else np.zeros(cum.shape[0])
    step_amt = cum[:, tau] - before
    denom = step_amt.sum()
    phi = 0.0 if denom <= 0 else min(1.0, max(0.0, (target + EPS - before.sum()) / denom))
    new = np.maximum(before + phi * step_amt - boarded, 0.0)
    s = new.sum()
    if s > headroom and s > 0:
        new *= headroom / s
    return new


# ----------------------------------------------------------------------------
# single-link CTM step (also used for the network loop's arithmetic)


def _link_cell_arrays(link, step_s):
    lengths = np.array(cell_layout(link, step_s))
    unit = link.speed_limit * step_s / 3600.0
    move = np.minimum(1.0, unit / lengths)
    cap = link.capacity_car * step_s / 3600.0
    k_jam = link.jam_density_car * link.lanes
    k_crit = link.capacity_car / link.speed_limit
    if k_jam <= k_crit:
        raise LoadingError(f"link {link.id}: jam density below critical density")
    wave = link.capacity_car / (k_jam - k_crit)  # mph
    jam = k_jam * lengths
    back = np.minimum(1.0, wave * step_s / 3600.0 / lengths)
    return lengths, move, np.full(lengths.size, cap), jam, back


def sending(n, move, cap):
    return np.minimum(n * move, cap)


def receiving(n, cap, jam, back, blocked=0.0):
    return np.clip(np.minimum(cap, back * (jam - n - blocked)), 0.0, None)


def step_ctm(occupancy, link, step_s, inflow_demand=0.0, downstream_receiving=np.inf):
    """Advance one link's cell occupancies by one loading step.

    Returns ``(new_occupancy, inflow, outflow)``: the accepted upstream inflow
    and the flow discharged from the last cell.
    """
    n = np.asarray(occupancy, dtype=float).copy()
    _, move, cap, jam, back = _link_cell_arrays(link, step_s)
    S = sending(n, move, cap)
    R = receiving(n, cap, jam, back)
    inner = np.minimum(S[:-1], R[1:])
    inflow = min(inflow_demand, R[0])
    outflow = min(S[-1], downstream_receiving)
    n[:-1] -= inner
    n[1:] += inner
    n[0] += inflow
    n[-1] -= outflow
    return n, inflow, outflow


# ----------------------------------------------------------------------------
# packet queues


def _take(queue, amount, size):
    """Remove ``amount`` vehicles from the front of a packet queue; return their cohort vector.

    Packets are ``[total, vector]`` pairs where ``vector`` holds the amount of
    each cohort in the link's local cohort order.
    """
    out = np.zeros(size)
    left = amount
    while left > 0 and queue:
        pkt = queue[0]
        a = pkt[0]
        if a <= left:
            out += pkt[1]
            queue.popleft()
            left -= a
        else:
            part = pkt[1] * (left / a)
            out += part
            pkt[1] = pkt[1] - part
            pkt[0] = a - left
            left = 0.0
    return out


def _peek_split(queue, amount, hop_slot, n_slots):
    """Split of the first ``amount`` vehicles in a queue by next-hop slot."""
    vec = None
    left = amount
    for pkt in queue:
        if left <= EPS:
            break
        a = pkt[0]
        part = pkt[1] if a <= left else pkt[1] * (left / a)
        vec = part.copy() if vec is None else vec + part
        left -= min(a, left)
    if vec is None:
        return np.zeros(n_slots)
    return np.bincount(hop_slot, weights=vec, minlength=n_slots)


# ----------------------------------------------------------------------------
# outputs


@dataclass(eq=False)
class DnlOutputs:
    link_ids: tuple
    step_s: float
    interval_s: float
    n_dep: int
    flows: np.ndarray  # (n_paths, n_dep)
    x_c: np.ndarray  # (n_links, n_int) cars entering
    t_c: np.ndarray  # (n_links, n_int) minutes
    congested: np.ndarray  # (n_links, n_int) bool
    exit_flow: np.ndarray  # (n_links, n_int) cars leaving
    entries_cum: np.ndarray  # (n_links, n_steps + 1)
    exits_cum: np.ndarray
    rho_car: sp.csr_matrix  # (n_links * n_int, n_cohorts)
    x_pt: np.ndarray  # (2 * n_pairs,) rows 2p board, 2p+1 alight
    rho_transit: sp.csr_matrix  # (2 * n_pairs, n_cohorts)
    pairs: tuple  # (virtual stop, line, trip)
    pair_arrival: np.ndarray  # seconds, NaN if never reached
    pair_departure: np.ndarray
    max_load_ratio: float  # peak onboard / capacity over all vehicles
    car_departed: np.ndarray  # per cohort
    car_finished: np.ndarray  # reached destination or parking
    car_in_network: np.ndarray
    pax_departed: np.ndarray
    pax_arrived: np.ndarray
    pax_in_network: np.ndarray  # walking, waiting or on board at the horizon
    pax_truncated: np.ndarray  # events scheduled past the horizon
    free_flow_min: np.ndarray  # per link
    path_kind: tuple  # per path: car | transit | pnr
    events: dict | None = None  # per-cohort trajectory log if requested

    @property
    def n_intervals(self):
        return self.x_c.shape[1]

    @property
    def n_links(self):
        return len(self.link_ids)

    def _cols(self, kind):
        mask = np.repeat(np.array([k == kind for k in self.path_kind]), self.n_dep)
        return np.flatnonzero(mask)

    @property
    def rho_c(self):
        return self.rho_car[:, self._cols("car")]

    @property
    def rho_pnr_c(self):
        return self.rho_car[:, self._cols("pnr")]

    @property
    def rho_pt(self):
        return self.rho_transit[:, self._cols("transit")]

    @property
    def rho_pnr_pt(self):
        return self.rho_transit[:, self._cols("pnr")]


def travel_time_derivative(out: DnlOutputs, units: str = "minutes", clamp: float | None = None) -> sp.dia_matrix:
    """Diagonal approximation of d(link travel time)/d(link flow), rows ``link * n_int + interval``.

    Zero on uncongested entries and the reciprocal of the number of cars
    leaving the link during the interval on congested ones.  ``units`` is
    ``"intervals"`` (aggregation intervals per vehicle) or ``"minutes"``
    (matching ``t_c``).  A congested entry with no exits uses ``clamp``
    vehicles (default 1).
    """
    clamp = 1.0 if clamp is None else clamp
    scale = {"intervals": 1.0, "minutes": out.interval_s / 60.0}[units]
    exit_ = np.maximum(out.exit_flow, 0.0)
    exit_ = np.where(exit_ > 0, exit_, clamp)
    d = np.where(out.congested, scale / exit_, 0.0).ravel()
    return sp.diags(d, 0, format="csr")


def _inverse(cum, level):
    """First time (in steps, continuous) at which a non-decreasing per-step curve reaches ``level``.

    ``cum[s]`` is the count at the end of step ``s - 1`` (``cum[0] = 0``); the
    curve is linear inside each step.  Returns NaN if never reached.
    """
    idx = np.searchsorted(cum, level, side="left")
    out = np.full(np.shape(level), np.nan)
    ok = idx < cum.size
    i = idx[ok]
    lo = np.where(i > 0, cum[np.maximum(i - 1, 0)], cum[0])
    hi = cum[i]
    frac = np.where(hi > lo, (level[ok] - lo) / np.where(hi > lo, hi - lo, 1.0), 0.0)
    out[ok] = np.where(i > 0, i - 1 + frac, 0.0)
    return out


def _interval_travel_times(A, D, n_int, spi, free_min, step_s, cap_step, min_vehicles=1.0, samples=24):
    """Mean travel time (minutes) of cars entering each interval, from cumulative curves.

    Cars still on the link at the horizon are assumed to keep leaving at the
    link's exit rate over the last interval (its capacity if nothing left).
    Intervals with fewer than ``min_vehicles`` entries report free-flow time:
    their curve gaps only reflect the numerical spreading of the remainder cell.
    """
    tt = np.full(n_int, free_min)
    horizon = A.size - 1
    tail_rate = (D[-1] - D[max(horizon - spi, 0)]) / spi
    rate = tail_rate if tail_rate > 1e-9 else cap_step
    for i in range(n_int):
        a0, a1 = A[i * spi], A[(i + 1) * spi]
        if a1 - a0 < min_vehicles:
            continue
        levels = a0 + (np.arange(samples) + 0.5) / samples * (a1 - a0)
        t_in = _inverse(A, levels)
        t_out = _inverse(D, levels)
        late = np.isnan(t_out)
        t_out[late] = horizon + (levels[late] - D[-1]) / rate
        tt[i] = max(free_min, float(np.mean(t_out - t_in)) * step_s / 60.0)
    return tt


# ----------------------------------------------------------------------------
# loader


class Loader:
    """Precomputed loading structures for one network and config.

    Build once and call :meth:`run` for each path-flow vector; the network and
    config are only read.
    """

    def __init__(self, net: MultiModalNetwork, cfg: LoadingConfig | None = None):
        cfg = cfg or LoadingConfig.for_network(net)
        self.net, self.cfg = net, cfg
        dt = cfg.step_s
        self.S = cfg.n_steps
        if net.lines:
            first = min(min(l.trips) for l in net.lines.values() if l.trips)
            if first >= cfg.horizon_s:
                raise LoadingError("horizon ends before any scheduled transit trip starts")

        # ---- cells
        self.link_ids = tuple(net.links)
        self.link_pos = {l: i for i, l in enumerate(self.link_ids)}
        L = len(self.link_ids)
        parts = []
        self.first_cell = np.zeros(L, int)
        self.last_cell = np.zeros(L, int)
        self.cell_bounds = []
        vf, wave, kjam, cell_link = [], [], [], []
        pos = 0
        for i, lid in enumerate(self.link_ids):
            link = net.links[lid]
            a = _link_cell_arrays(link, dt)
            n = a[0].size
            self.first_cell[i], self.last_cell[i] = pos, pos + n - 1
            self.cell_bounds.append(np.cumsum(a[0]).tolist())
            parts.append(a)
            k_jam = link.jam_density_car * link.lanes
            vf.append(np.full(n, link.speed_limit))
            wave.append(np.full(n, link.capacity_car / (k_jam - link.capacity_car / link.speed_limit)))
            kjam.append(np.full(n, k_jam))
            cell_link.append(np.full(n, i))
            pos += n
        self.lengths, self.move, self.cap, self.jam, self.back = (
            np.concatenate([p[j] for p in parts]) for j in range(5)
        )
        self.vf, self.wave, self.kjam = np.concatenate(vf), np.concatenate(wave), np.concatenate(kjam)
        self.cell_link = np.concatenate(cell_link)
        self.first_cell_list = self.first_cell.tolist()
        self.cell_len, self.cell_vf = self.lengths.tolist(), self.vf.tolist()
        self.cell_wave, self.cell_kjam = self.wave.tolist(), self.kjam.tolist()
        not_last = np.ones(pos, bool)
        not_last[self.last_cell] = False
        self.inner_up = np.flatnonzero(not_last)
        self.inner_down = self.inner_up + 1
        self.free_flow_min = np.array([net.links[l].free_flow_time_s / 60.0 for l in self.link_ids])
        self.link_len = np.array([net.links[l].length for l in self.link_ids])
        self.link_cap_step = np.array([net.links[l].capacity_car * dt / 3600.0 for l in self.link_ids])
        self.k_crit = np.array([net.links[l].capacity_car / net.links[l].speed_limit for l in self.link_ids])
        if cfg.bus_pce is not None:
            self.bus_pce = cfg.bus_pce
        else:
            l0 = next(iter(net.links.values()))
            self.bus_pce = l0.jam_density_car / l0.jam_density_bus

        # ---- cohorts and car routing
        P, nd = len(net.paths), cfg.n_dep
        self.n_paths, self.n_dep, self.n_coh = P, nd, P * nd
        self.path_kind = tuple(
            "car" if p.submode == "car" else ("pnr" if p.has_car else "transit") for p in net.paths
        )
        self.car_first = np.full(P, -1)
        self.next_hop = {}
        for k, p in enumerate(net.paths):
            links = [self.link_pos[l] for l in p.links()]
            if not links:
                continue
            self.car_first[k] = links[0]
            self.next_hop[k] = dict(zip(links, links[1:] + [-1]))
        self.sources = sorted({int(l) for l in self.car_first if l >= 0})
        # per link: the cohorts that use it (local order), where each goes next,
        # and index maps to move a cohort vector onto the downstream links
        users = [[] for _ in self.link_ids]
        for k, hops in sorted(self.next_hop.items()):
            for l in hops:
                users[l].extend(range(k * nd, (k + 1) * nd))
        self.link_coh = [np.array(u, int) for u in users]
        local = [{c: i for i, c in enumerate(u)} for u in users]
        self.hop_slot, self.route_map, self.pnr_exit = [], [], {}
        for l, u in enumerate(users):
            nxt = np.array([self.next_hop[c // nd][l] for c in u], int)
            self.hop_slot.append(nxt + 1)  # slot 0: leaves the road network
            maps = {}
            for nx in sorted(set(nxt.tolist())):
                src = np.flatnonzero(nxt == nx)
                if nx < 0:
                    glob = self.link_coh[l][src]
                    maps[-1] = (src, glob)
                    pnr = np.array([self.path_kind[c // nd] == "pnr" for c in glob], bool)
                    self.pnr_exit[l] = (np.flatnonzero(pnr), glob[pnr])
                else:
                    maps[nx] = (src, np.array([local[nx][c] for c in self.link_coh[l][src]], int))
            self.route_map.append(maps)
        self.start_local = {
            l0: np.array([local[l0][c] for c in users[l0] if self.car_first[c // nd] == l0], int)
            for l0 in self.sources
        }

        # ---- passenger streams: one per (cohort, ride leg), delays in whole steps
        speed = cfg.walking_speed_mph
        self.pairs = tuple(net.stop_trip_pairs())
        self.pair_index = {(sv, line, j): i for i, (sv, line, j) in enumerate(self.pairs)}
        coh, board, alight, pre, nxt = [], [], [], [], []
        self.first_stream = np.full(self.n_coh, -1)
        self.final_delay = np.zeros(P, int)
        for k, p in enumerate(net.paths):
            if p.submode == "car":
                continue
            walked, rides, delays = 0.0, [], []
            for leg in p.legs:
                if leg.kind == "walk":
                    walked += net.walks[leg.ref].length
                elif leg.kind == "ride":
                    rides.append(leg)
                    delays.append(int(round(walked / speed * 3600.0 / dt)))
                    walked = 0.0
            self.final_delay[k] = int(round(walked / speed * 3600.0 / dt))
            for t in range(nd):
                c = k * nd + t
                base = len(coh)
                self.first_stream[c] = base
                for r, leg in enumerate(rides):
                    coh.append(c)
                    board.append(leg.board)
                    alight.append(leg.alight)
                    pre.append(delays[r])
                    nxt.append(base + r + 1 if r + 1 < len(rides) else -1)
        # order streams by boarding stop so each stop owns a contiguous slice
        order = sorted(range(len(coh)), key=lambda i: (board[i], i))
        new_of = np.empty(len(coh), int)
        new_of[order] = np.arange(len(coh))
        self.st_coh = np.array([coh[i] for i in order], int)
        self.st_board = [board[i] for i in order]
        self.st_alight = [alight[i] for i in order]
        self.st_pre = np.array([pre[i] for i in order], int)
        self.st_next = np.array([new_of[nxt[i]] if nxt[i] >= 0 else -1 for i in order], int)
        if len(coh):
            self.first_stream = np.where(self.first_stream >= 0, new_of[np.maximum(self.first_stream, 0)], -1)
        self.stop_streams = {}
        for i, v in enumerate(self.st_board):
            a, _ = self.stop_streams.get(v, (i, i))
            self.stop_streams[v] = (a, i + 1)

        # ---- bus stop places along each route: (route position, milepost)
        self.stop_place = {}
        for line in net.lines.values():
            if line.mode == "bus":
                route = list(line.route_links)
                self.stop_place[line.id] = [
                    (route.index(net.stops[v].host_link), net.stops[v].milepost) for v in line.stops
                ]
        self.boarding_steps = max(1, int(round(cfg.boarding_interval_s / dt)))

    # ------------------------------------------------------------------

    def run(self, flows, record_events: bool = False) -> DnlOutputs:
        f = np.asarray(flows, dtype=float)
        if f.ndim == 1:
            f = f.reshape(self.n_paths, self.n_dep) if f.size == self.n_coh else f
        if f.shape != (self.n_paths, self.n_dep):
            raise LoadingError(f"path flows must have shape {(self.n_paths, self.n_dep)}, got {f.shape}")
        if np.any(f < 0) or not np.all(np.isfinite(f)):
            raise LoadingError("path flows must be finite and >= 0")
        return _Run(self, f, record_events).execute()


class _Run:
    """State of one loading pass."""

    def __init__(self, ld: Loader, f, record_events):
        self.ld, self.cfg, self.net = ld, ld.cfg, ld.net
        self.fc = f.ravel().copy()
        self.f = f
        S, L, n_int = ld.S, len(ld.link_ids), ld.cfg.n_intervals
        n_coh = ld.n_coh
        self.occ = np.zeros(ld.lengths.size)
        self.bus_cells = np.zeros(ld.lengths.size)
        self.queues = [deque() for _ in range(L)]
        self.origin_q = {l: deque() for l in ld.sources}
        self.origin_tot = {l: 0.0 for l in ld.sources}
        self.A = np.zeros((L, S + 1))
        self.D = np.zeros((L, S + 1))
        self.occ_sum = np.zeros((L, n_int))
        self.entry_log = [np.zeros((n_int, ld.link_coh[l].size)) for l in range(L)]
        self.car_departed = np.zeros(n_coh)
        self.car_finished = np.zeros(n_coh)
        n_st = ld.st_coh.size
        self.arr = np.zeros((n_st, S))
        self.cum_arr = np.zeros((n_st, S))  # running arrivals through each step
        self.cum = self.cum_arr[:, 0]
        self.boarded = np.zeros(n_st)
        self.pax_departed = np.zeros(n_coh)
        self.pax_arrived = np.zeros(n_coh)
        self.pax_truncated = np.zeros(n_coh)
        self.pt_log = {}
        self.pair_arr = np.full(len(ld.pairs), np.nan)
        self.pair_dep = np.full(len(ld.pairs), np.nan)
        self.max_ratio = 0.0
        self.vehicles = []
        self.step = 0
        self.events = {"depart": {}, "arrive": {}} if record_events else None

    # ---- passengers

    def schedule(self, stream, step, amount, c):
        S = self.ld.S
        if step >= S:
            self.pax_truncated[c] += amount
            return
        if stream < 0:
            self.pax_arrived[c] += amount
            if self.events is not None:
                key = (c, step // self.cfg.steps_per_interval)
                self.events["arrive"][key] = self.events["arrive"].get(key, 0.0) + amount
            return
        self.arr[stream, step] += amount
        if step <= self.step:
            self.cum[stream] += amount

    def seed_transit(self):
        ld, spi, nd = self.ld, self.cfg.steps_per_interval, self.ld.n_dep
        S = ld.S
        for c in range(ld.n_coh):
            k = c // nd
            if ld.path_kind[k] != "transit" or self.fc[c] <= 0:
                continue
            t = c % nd
            s0 = ld.first_stream[c]
            amt = self.fc[c] / spi
            self.pax_departed[c] += self.fc[c]
            start = t * spi + ld.st_pre[s0]
            stop = min(start + spi, S)
            if start < S:
                self.arr[s0, start:stop] += amt
            self.pax_truncated[c] += amt * (spi - max(0, stop - start))

    # ---- main loop

    def execute(self) -> DnlOutputs:
        ld, cfg = self.ld, self.cfg
        S, dt, spi, nd = ld.S, cfg.step_s, cfg.steps_per_interval, ld.n_dep
        # per-step departure vector at each origin link, by departure interval
        car_dep = {}
        for l0, idx in ld.start_local.items():
            coh = ld.link_coh[l0][idx]
            for t in range(nd):
                sel = coh % nd == t
                vec = np.zeros(ld.link_coh[l0].size)
                vec[idx[sel]] = self.fc[coh[sel]] / spi
                if vec.sum() > 0:
                    car_dep.setdefault(t, []).append((l0, vec, coh[sel], self.fc[coh[sel]] / spi))
        self.seed_transit()
        trips = sorted((t0, lid, j) for lid, line in self.net.lines.items() for j, t0 in enumerate(line.trips))
        tq = 0
        for s in range(S):
            self.step = s
            interval = s // spi
            if s > 0:
                self.cum_arr[:, s] = self.cum_arr[:, s - 1]
            self.cum_arr[:, s] += self.arr[:, s]
            self.cum = self.cum_arr[:, s]
            for l0, vec, coh, amt in car_dep.get(interval, ()) if interval < nd else ():
                tot = float(vec.sum())
                self.origin_q[l0].append([tot, vec.copy()])
                self.origin_tot[l0] += tot
                self.car_departed[coh] += amt
            self.bus_cells[:] = 0.0
            for veh in self.vehicles:
                if veh["mode"] == "bus":
                    self.bus_cells[veh["cell"]] += ld.bus_pce
            self.road_step(s, interval)
            while tq < len(trips) and trips[tq][0] < (s + 1) * dt:
                self.dispatch(*trips[tq], s)
                tq += 1
            keep = []
            for veh in self.vehicles:
                if not self.advance(veh, s):
                    keep.append(veh)
                self.max_ratio = max(self.max_ratio, veh["load"] / veh["cap"])
            self.vehicles = keep
        return self.outputs()

    def road_step(self, s, interval):
        ld = self.ld
        occ, L = self.occ, len(ld.link_ids)
        Sd = sending(occ, ld.move, ld.cap)
        Rc = receiving(occ, ld.cap, ld.jam, ld.back, self.bus_cells)
        inner = np.minimum(Sd[ld.inner_up], Rc[ld.inner_down])
        demand_to = np.zeros(L + 1)  # slot 0: leaving the road network
        fronts = {}
        for l in range(L):
            q = self.queues[l]
            if not q:
                continue
            sl = Sd[ld.last_cell[l]]
            if sl <= 0:
                continue
            split = _peek_split(q, sl, ld.hop_slot[l], L + 1)
            fronts[l] = (sl, split)
            demand_to += split
        src = {}
        for l0, q in self.origin_q.items():
            if q and self.origin_tot[l0] > 0:
                src[l0] = self.origin_tot[l0]
                demand_to[l0 + 1] += src[l0]
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.minimum(1.0, Rc[ld.first_cell] / demand_to[1:])
        factor = np.where(demand_to[1:] > 0, factor, 1.0)
        incoming = {}
        outflow = np.zeros(L)
        for l, (sl, split) in fronts.items():
            amt = float(np.where(split[1:] > 0, factor, 1.0).min()) * sl
            if amt <= 0:
                continue
            comp = _take(self.queues[l], amt, ld.link_coh[l].size)
            outflow[l] = amt
            for nx, (src_i, dst) in ld.route_map[l].items():
                part = comp[src_i]
                if nx >= 0:
                    vec = incoming.get(nx)
                    if vec is None:
                        vec = incoming[nx] = np.zeros(ld.link_coh[nx].size)
                    vec[dst] += part
                    continue
                self.car_finished[dst] += part
                if l in ld.pnr_exit:
                    pos, glob = ld.pnr_exit[l]
                    for c, v in zip(glob.tolist(), part[pos].tolist()):
                        if v > 0:
                            s0 = ld.first_stream[c]
                            self.pax_departed[c] += v
                            self.schedule(s0, s + int(ld.st_pre[s0]), v, c)
        for l0, tot in src.items():
            amt = factor[l0] * tot
            if amt <= 0:
                continue
            comp = _take(self.origin_q[l0], amt, ld.link_coh[l0].size)
            self.origin_tot[l0] = max(0.0, tot - amt) if self.origin_q[l0] else 0.0
            vec = incoming.get(l0)
            if vec is None:
                incoming[l0] = comp
            else:
                vec += comp
        occ[ld.inner_up] -= inner
        occ[ld.inner_down] += inner
        occ[ld.last_cell] -= outflow
        entered = np.zeros(L)
        for l, vec in incoming.items():
            tot = float(vec.sum())
            if tot <= 0:
                continue
            entered[l] = tot
            occ[ld.first_cell[l]] += tot
            self.queues[l].append([tot, vec])
            self.entry_log[l][interval] += vec
        self.A[:, s + 1] = self.A[:, s] + entered
        self.D[:, s + 1] = self.D[:, s] + outflow
        self.occ_sum[:, interval] += np.bincount(ld.cell_link, weights=occ + self.bus_cells, minlength=L)

    # ---- transit vehicles

    def dispatch(self, t0, lid, j, s):
        line = self.net.lines[lid]
        veh = dict(mode=line.mode, line=line, j=j, cap=line.capacity, next=0, onboard={}, load=0.0,
                   state="move", arr_time=None, n_alight=0.0, n_board=0.0, recent=[])
        if line.mode == "bus":
            li = self.ld.link_pos[line.route_links[0]]
            veh.update(route_i=0, pos=0.0, cell=int(self.ld.first_cell[li]), clock=max(t0, s * self.cfg.step_s))
        else:
            veh.update(arrive_at=float(t0))
        self.vehicles.append(veh)

    def advance(self, veh, s) -> bool:
        """Move or dwell one step; True once the vehicle has left its last stop."""
        if veh["state"] == "dwell":
            nb = self.board(veh, s)
            veh["n_board"] += nb
            veh["recent"].append(nb)
            return self.maybe_depart(veh, s)
        if veh["mode"] == "metro":
            if veh["arrive_at"] < (s + 1) * self.cfg.step_s:
                self.arrive(veh, s, veh["arrive_at"], halt=True)
                return self.maybe_depart(veh, s)
            return False
        return self.drive(veh, s)

    def drive(self, veh, s) -> bool:
        ld, dt = self.ld, self.cfg.step_s
        line = veh["line"]
        route = line.route_links
        places = ld.stop_place[line.id]
        t = max(veh["clock"], s * dt)
        end = (s + 1) * dt
        while t < end - 1e-9:
            li = ld.link_pos[route[veh["route_i"]]]
            bounds = ld.cell_bounds[li]
            ci = min(bisect.bisect_right(bounds, veh["pos"]), len(bounds) - 1)
            cell = ld.first_cell_list[li] + ci
            veh["cell"] = cell
            k = (self.occ[cell] + self.bus_cells[cell]) / ld.cell_len[cell]
            vf = ld.cell_vf[cell]
            v = vf if k <= 0 else min(vf, ld.cell_wave[cell] * (ld.cell_kjam[cell] - k) / k)
            v = max(v, 0.5)  # mph; a bus creeps through a jammed cell
            cell_end = bounds[ci]
            target = cell_end
            stop_here = veh["next"] < len(places) and places[veh["next"]][0] == veh["route_i"]
            if stop_here:
                target = min(target, places[veh["next"]][1])
            reach = veh["pos"] + v * (end - t) / 3600.0
            if reach < target - 1e-12:
                veh["pos"] = reach
                t = end
                break
            t += (target - veh["pos"]) / v * 3600.0
            veh["pos"] = target
            if stop_here and abs(target - places[veh["next"]][1]) <= 1e-12:
                stop = line.stops[veh["next"]]
                if self.should_halt(veh, stop):
                    self.arrive(veh, s, t, halt=True)
                    return self.maybe_depart(veh, s)
                pair = ld.pair_index[(stop, line.id, veh["j"])]
                self.pair_arr[pair] = self.pair_dep[pair] = t
                veh["next"] += 1
                if veh["next"] == len(places):
                    return True
                continue
            if ci == len(bounds) - 1 and veh["pos"] >= bounds[-1] - 1e-12:
                veh["route_i"] += 1
                veh["pos"] = 0.0
                if veh["route_i"] == len(route):
                    return True
        veh["clock"] = end
        return False

    def should_halt(self, veh, stop) -> bool:
        thr = self.cfg.halt_threshold
        group = veh["onboard"].get(stop)
        if group and sum(group.values()) > thr:
            return True
        span = self.ld.stop_streams.get(stop)
        if span is None or veh["load"] >= veh["cap"] - thr:
            return False
        a, b = span
        return float((self.cum[a:b] - self.boarded[a:b]).sum()) > thr

    def arrive(self, veh, s, t_arr, halt):
        line = veh["line"]
        stop = line.stops[veh["next"]]
        pair = self.ld.pair_index[(stop, line.id, veh["j"])]
        self.pair_arr[pair] = t_arr
        veh.update(state="dwell", arr_time=t_arr, pair=pair, stop=stop, recent=[])
        veh["n_alight"] = self.alight(veh, stop, pair, s)
        veh["n_board"] = self.board(veh, s)

    def alight(self, veh, stop, pair, s) -> float:
        ld = self.ld
        group = veh["onboard"].pop(stop, None)
        if not group:
            return 0.0
        total = 0.0
        for i, v in group.items():
            c = int(ld.st_coh[i])
            total += v
            key = (2 * pair + 1, c)
            self.pt_log[key] = self.pt_log.get(key, 0.0) + v
            nx = int(ld.st_next[i])
            delay = ld.st_pre[nx] if nx >= 0 else ld.final_delay[c // ld.n_dep]
            self.schedule(nx, s + int(delay), v, c)
        veh["load"] = max(0.0, veh["load"] - total)
        return total

    def board(self, veh, s) -> float:
        ld = self.ld
        stop = veh["stop"]
        span = ld.stop_streams.get(stop)
        if span is None:
            return 0.0
        lo, hi = span
        waiting = self.cum[lo:hi] - self.boarded[lo:hi]
        if waiting.sum() <= EPS:
            return 0.0
        headroom = max(veh["cap"] - veh["load"], 0.0)
        if waiting.sum() <= headroom:
            new = np.maximum(waiting, 0.0)
        else:
            new = fifo_board(self.cum_arr[lo:hi], self.boarded[lo:hi], s, headroom, cumulative=True)
        pair = veh["pair"]
        total = 0.0
        for r in np.flatnonzero(new > 0):
            i = lo + int(r)
            b = float(new[r])
            self.boarded[i] += b
            total += b
            c = int(ld.st_coh[i])
            key = (2 * pair, c)
            self.pt_log[key] = self.pt_log.get(key, 0.0) + b
            grp = veh["onboard"].setdefault(ld.st_alight[i], {})
            grp[i] = grp.get(i, 0.0) + b
        veh["load"] += total
        return total

    def maybe_depart(self, veh, s) -> bool:
        cfg = self.cfg
        end = (s + 1) * cfg.step_s
        need = dwell_time(veh["mode"], veh["n_alight"], veh["n_board"], cfg)
        elapsed = end - veh["arr_time"]
        if elapsed < cfg.max_dwell_s - 1e-9:
            if end < veh["arr_time"] + need - 1e-9:
                return False
            recent = sum(veh["recent"][-self.ld.boarding_steps:])
            if recent >= cfg.continue_threshold and veh["load"] < veh["cap"] - cfg.halt_threshold:
                return False
        self.pair_dep[veh["pair"]] = end
        veh["state"] = "move"
        veh["next"] += 1
        line = veh["line"]
        if veh["next"] == len(line.stops):
            return True
        if veh["mode"] == "metro":
            veh["arrive_at"] = end + line.station_times[veh["next"] - 1]
        else:
            veh["clock"] = end
        return False

    # ---- results

    def outputs(self) -> DnlOutputs:
        ld, cfg = self.ld, self.cfg
        L, n_int, spi, nd, dt = len(ld.link_ids), cfg.n_intervals, cfg.steps_per_interval, ld.n_dep, cfg.step_s
        fc = self.fc
        x_c = np.zeros((L, n_int))
        rows, cols, vals = [], [], []
        for l in range(L):
            coh = ld.link_coh[l]
            x_c[l] = self.entry_log[l].sum(axis=1)
            for i in range(n_int):
                keep = (self.entry_log[l][i] > 0) & (fc[coh] > 0)
                rows.extend([l * n_int + i] * int(keep.sum()))
                cols.extend(coh[keep].tolist())
                vals.extend((self.entry_log[l][i][keep] / fc[coh[keep]]).tolist())
        rho_car = sp.csr_matrix((vals, (rows, cols)), shape=(L * n_int, ld.n_coh))
        exit_flow = np.diff(self.D[:, ::spi], axis=1)
        t_c = np.array([
            _interval_travel_times(self.A[l], self.D[l], n_int, spi, ld.free_flow_min[l], dt,
                                   ld.link_cap_step[l], cfg.min_tt_vehicles) for l in range(L)
        ])
        density = self.occ_sum / spi / ld.link_len[:, None]
        congested = density > ld.k_crit[:, None]

        n_pairs = len(ld.pairs)
        x_pt = np.zeros(2 * n_pairs)
        rows, cols, vals = [], [], []
        for (row, c), v in sorted(self.pt_log.items()):
            x_pt[row] += v
            if fc[c] > 0:
                rows.append(row)
                cols.append(c)
                vals.append(v / fc[c])
        rho_transit = sp.csr_matrix((vals, (rows, cols)), shape=(2 * n_pairs, ld.n_coh))

        car_in = np.zeros(ld.n_coh)
        queued = [(l, q) for l, q in enumerate(self.queues)] + list(self.origin_q.items())
        for l, q in queued:
            for _, vec in q:
                car_in[ld.link_coh[l]] += vec
        pax_in = np.zeros(ld.n_coh)
        np.add.at(pax_in, ld.st_coh, self.cum - self.boarded)
        for veh in self.vehicles:
            for grp in veh["onboard"].values():
                for i, v in grp.items():
                    pax_in[ld.st_coh[i]] += v

        events = self.events
        if events is not None:
            events["link_entry"] = {
                (c, ld.link_ids[l], i): v
                for l in range(L) for i in range(n_int)
                for c, v in zip(ld.link_coh[l].tolist(), self.entry_log[l][i].tolist()) if v > 0
            }
            events["board"] = {(c, ld.pairs[r // 2]): v for (r, c), v in self.pt_log.items() if r % 2 == 0}
            events["alight"] = {(c, ld.pairs[r // 2]): v for (r, c), v in self.pt_log.items() if r % 2 == 1}
            for c in range(ld.n_coh):
                kind = ld.path_kind[c // nd]
                if fc[c] > 0:
                    events["depart"][(c, c % nd)] = fc[c] if kind == "transit" else self.car_departed[c]
                if kind == "car" and self.car_finished[c] > 0:
                    events["arrive"][(c, None)] = self.car_finished[c]

        return DnlOutputs(
            link_ids=ld.link_ids, step_s=dt, interval_s=cfg.interval_s, n_dep=nd, flows=self.f.copy(),
            x_c=x_c, t_c=t_c, congested=congested, exit_flow=exit_flow, entries_cum=self.A, exits_cum=self.D,
            rho_car=rho_car, x_pt=x_pt, rho_transit=rho_transit, pairs=ld.pairs,
            pair_arrival=self.pair_arr, pair_departure=self.pair_dep, max_load_ratio=self.max_ratio,
            car_departed=self.car_departed, car_finished=self.car_finished, car_in_network=car_in,
            pax_departed=self.pax_departed, pax_arrived=self.pax_arrived, pax_in_network=pax_in,
            pax_truncated=self.pax_truncated, free_flow_min=ld.free_flow_min, path_kind=ld.path_kind,
            events=events,
        )


def load(net: MultiModalNetwork, flows, cfg: LoadingConfig | None = None, record_events=False) -> DnlOutputs:
    """Load path flows ``(n_paths, n_dep)`` onto the network once."""
    return Loader(net, cfg).run(flows, record_events=record_events)


def write_trajectory(out: DnlOutputs, net: MultiModalNetwork, path) -> None:
    """Dump the per-cohort event log as tab-separated text (needs ``record_events=True``)."""
    if out.events is None:
        raise LoadingError("load was run without record_events")
    nd = out.n_dep
    with open(path, "w") as fh:
        fh.write("path\tdep_interval\tevent\twhere\tinterval_or_trip\tamount\n")
        for (c, t), v in sorted(out.events["depart"].items()):
            fh.write(f"{net.paths[c // nd].id}\t{c % nd}\tdepart\t{net.paths[c // nd].origin}\t{t}\t{float(v)!r}\n")
        for (c, lid, i), v in sorted(out.events["link_entry"].items(), key=lambda kv: (kv[0][0], kv[0][2], kv[0][1])):
            fh.write(f"{net.paths[c // nd].id}\t{c % nd}\tlink-entry\t{lid}\t{i}\t{float(v)!r}\n")
        for kind in ("board", "alight"):
            for (c, (stop, line, j)), v in sorted(out.events[kind].items()):
                fh.write(f"{net.paths[c // nd].id}\t{c % nd}\t{kind}\t{stop}\t{line}:{j}\t{float(v)!r}\n")
        for (c, i), v in sorted(out.events["arrive"].items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1])):
            fh.write(f"{net.paths[c // nd].id}\t{c % nd}\tarrive\t{net.paths[c // nd].dest}\t{'-' if i is None else i}\t{float(v)!r}\n")
