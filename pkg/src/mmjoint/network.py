"""Combined multi-modal network: auto links, transit stops/lines, walking links, paths.

A network bundle is a directory of tab-separated files plus a ``manifest.txt``
of ``key = value`` settings::

    links.tsv   id from_node to_node length_mi speed_mph cap_car_vph cap_bus_vph
                jam_car_vpm jam_bus_vpm lanes
    stops.tsv   id kind parent host_link milepost_mi x y
    walks.tsv   id from_node to_node category length_mi
    lines.tsv   id mode capacity stops route_links station_times_s trips_s
    zones.tsv   id kind origin dest income density parking_fee pnr_fee
    paths.tsv   id origin dest submode tau delta legs

List-valued columns are comma separated; empty cells are written as ``-``.
Path legs are ``|``-separated tokens ``D:<link>``, ``P:<node>``, ``W:<walk>``
and ``R:<line>:<board stop>:<alight stop>``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path as FsPath

from .kv import read_kv, write_kv

FIRST_LEVEL = ("driving", "transit", "pnr")
SECOND_LEVEL = {
    "driving": ("car",),
    "transit": ("bus", "metro", "bus+metro"),
    "pnr": ("car+bus", "car+metro", "car+bus+metro"),
}
SUBMODES = tuple(g for m in FIRST_LEVEL for g in SECOND_LEVEL[m])
NEST_OF = {g: m for m, gs in SECOND_LEVEL.items() for g in gs}

STOP_KINDS = ("physical-bus", "virtual-bus", "physical-metro", "virtual-metro")
WALK_CATEGORIES = ("origin-access", "transfer", "parking-access", "board-alight")

DEFAULT_MANIFEST = {
    "name": "network",
    "walking_speed_mph": 3.1,
    "loading_step_s": 5,
    "aggregation_interval_s": 900,
    "horizon_s": 3600,
    "demand_intervals": 4,
    "time_unit": "minutes",
    "money_unit": "dollars",
    # multipliers applied when assembling disutility inputs
    "time_scale": 1.0,
    "money_scale": 1.0,
    "income_scale": 1.0,
    "density_scale": 1.0,
}


class NetworkError(ValueError):
    pass


class NetworkStructureError(NetworkError):
    """A bundle is missing data or references an id that does not exist."""


class NetworkValidationError(NetworkError):
    def __init__(self, failures):
        self.failures = list(failures)
        super().__init__("network validation failed:\n  " + "\n  ".join(self.failures))


@dataclass(frozen=True)
class AutoLink:
    id: str
    from_node: str
    to_node: str
    length: float  # miles
    speed_limit: float  # mph
    capacity_car: float  # veh/hr
    capacity_bus: float
    jam_density_car: float  # veh/mile/lane
    jam_density_bus: float
    lanes: int = 1

    @property
    def free_flow_time_s(self) -> float:
        return self.length / self.speed_limit * 3600.0


@dataclass(frozen=True)
class TransitStop:
    id: str
    kind: str
    parent_physical: str | None = None
    host_link: str | None = None
    milepost: float | None = None
    x: float = 0.0
    y: float = 0.0

    @property
    def is_virtual(self) -> bool:
        return self.kind.startswith("virtual")

    @property
    def is_metro(self) -> bool:
        return self.kind.endswith("metro")


@dataclass(frozen=True)
class WalkLink:
    id: str
    from_node: str
    to_node: str
    category: str
    length: float  # miles


@dataclass(frozen=True)
class TransitLine:
    id: str
    mode: str  # bus | metro
    stops: tuple  # virtual stop ids in service order
    trips: tuple  # departure times (s) from the first stop
    capacity: float
    route_links: tuple = ()  # bus only
    station_times: tuple = ()  # metro only, seconds between consecutive stations

    def serves(self, stop_id: str) -> bool:
        return stop_id in self.stops


@dataclass(frozen=True)
class Leg:
    kind: str  # drive | park | walk | ride
    ref: str
    board: str | None = None
    alight: str | None = None

    def encode(self) -> str:
        tag = {"drive": "D", "park": "P", "walk": "W", "ride": "R"}[self.kind]
        if self.kind == "ride":
            return f"R:{self.ref}:{self.board}:{self.alight}"
        return f"{tag}:{self.ref}"

    @classmethod
    def decode(cls, token: str) -> "Leg":
        parts = token.split(":")
        kinds = {"D": "drive", "P": "park", "W": "walk", "R": "ride"}
        if parts[0] not in kinds:
            raise NetworkStructureError(f"bad leg token {token!r}")
        if parts[0] == "R":
            if len(parts) != 4:
                raise NetworkStructureError(f"bad ride leg {token!r}")
            return cls("ride", parts[1], parts[2], parts[3])
        if len(parts) != 2:
            raise NetworkStructureError(f"bad leg token {token!r}")
        return cls(kinds[parts[0]], parts[1])


@dataclass(frozen=True)
class Path:
    id: str
    origin: str
    dest: str
    submode: str
    legs: tuple
    tau: float = 0.0  # parking fee
    delta: float = 0.0  # transit fare

    @property
    def mode(self) -> str:
        return NEST_OF[self.submode]

    @property
    def od(self) -> tuple:
        return (self.origin, self.dest)

    def links(self) -> list:
        return [leg.ref for leg in self.legs if leg.kind == "drive"]

    def rides(self) -> list:
        return [leg for leg in self.legs if leg.kind == "ride"]

    @property
    def has_car(self) -> bool:
        return any(leg.kind == "drive" for leg in self.legs)


@dataclass(frozen=True)
class Zone:
    id: str
    kind: str  # zone | parking
    income: float = 0.0  # $/hr
    density: float = 0.0  # persons / 100 m^2
    parking_fee: float = 0.0
    pnr_fee: float = 0.0


@dataclass(frozen=True)
class NetworkSummary:
    nodes: int
    links: int
    od_pairs: int
    bus_lines: int
    metro_lines: int
    physical_stops: int
    virtual_stops: int
    stop_trip_pairs: int
    walk_links: int
    paths_driving: int
    paths_transit: int
    paths_pnr: int
    parking_lots: int
    estimating_variables: int


@dataclass(frozen=True, eq=False)
class MultiModalNetwork:
    """Cross-referenced network.  Treat as read-only after construction."""

    links: dict
    stops: dict
    walks: dict
    lines: dict
    zones: dict
    od_income: dict
    paths: tuple
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        nodes = []
        for link in self.links.values():
            for n in (link.from_node, link.to_node):
                if n not in nodes:
                    nodes.append(n)
        ods = []
        for p in self.paths:
            if p.od not in ods:
                ods.append(p.od)
        object.__setattr__(self, "nodes", tuple(nodes))
        object.__setattr__(self, "od_pairs", tuple(ods))
        object.__setattr__(self, "path_index", {p.id: i for i, p in enumerate(self.paths)})
        by_od = {od: [] for od in ods}
        for i, p in enumerate(self.paths):
            by_od[p.od].append(i)
        object.__setattr__(self, "paths_by_od", {k: tuple(v) for k, v in by_od.items()})

    def setting(self, key):
        if key in self.manifest:
            return self.manifest[key]
        return DEFAULT_MANIFEST[key]

    @property
    def link_ids(self) -> list:
        return list(self.links)

    @property
    def parking_nodes(self) -> list:
        return [z.id for z in self.zones.values() if z.kind == "parking"]

    def stop_trip_pairs(self) -> list:
        """(virtual stop, line, trip index) for every scheduled stop visit, in line order."""
        pairs = []
        for line in self.lines.values():
            for j in range(len(line.trips)):
                for s in line.stops:
                    pairs.append((s, line.id, j))
        return pairs


def enumerate_counts(net: MultiModalNetwork, n_params: int = 34) -> NetworkSummary:
    stops = net.stops.values()
    modes = [p.mode for p in net.paths]
    return NetworkSummary(
        nodes=len(net.nodes),
        links=len(net.links),
        od_pairs=len(net.od_pairs),
        bus_lines=sum(1 for l in net.lines.values() if l.mode == "bus"),
        metro_lines=sum(1 for l in net.lines.values() if l.mode == "metro"),
        physical_stops=sum(1 for s in stops if not s.is_virtual),
        virtual_stops=sum(1 for s in stops if s.is_virtual),
        stop_trip_pairs=sum(len(l.trips) * len(l.stops) for l in net.lines.values()),
        walk_links=len(net.walks),
        paths_driving=modes.count("driving"),
        paths_transit=modes.count("transit"),
        paths_pnr=modes.count("pnr"),
        parking_lots=len(net.parking_nodes),
        estimating_variables=len(net.od_pairs) * int(net.setting("demand_intervals")) + n_params,
    )


def path_mode_indicators(path: Path, lines: dict | None = None) -> tuple:
    """(xi_bus, xi_metro) for a path, read off its boarding legs.

    Without ``lines`` the ride leg's line mode is inferred from the path's
    second-level mode label, which is only unambiguous for single-mode paths;
    pass the network's lines to read the actual line modes.
    """
    bus = metro = 0
    for leg in path.rides():
        if lines is not None:
            mode = lines[leg.ref].mode
        else:
            mode = "metro" if "metro" in path.submode and "bus" not in path.submode else "bus"
            if "bus" in path.submode and "metro" in path.submode:
                raise ValueError("mixed bus+metro path needs the line table")
        if mode == "bus":
            bus = 1
        else:
            metro = 1
    return bus, metro


def submode_label(has_car: bool, xi_bus: int, xi_metro: int) -> str | None:
    parts = []
    if has_car:
        parts.append("car")
    if xi_bus:
        parts.append("bus")
    if xi_metro:
        parts.append("metro")
    label = "+".join(parts)
    return label if label in SUBMODES else None


def cell_layout(link: AutoLink, step_s: float) -> list:
    """Cell lengths (miles): one free-flow step per cell, last cell takes the remainder."""
    unit = link.speed_limit * step_s / 3600.0
    n = max(1, int(math.floor(link.length / unit + 1e-9)))
    lengths = [unit] * n
    lengths[-1] = link.length - unit * (n - 1)
    return lengths


def host_cell(link: AutoLink, milepost: float, step_s: float) -> int:
    """Index of the cell containing ``milepost``; a point on a boundary belongs upstream."""
    bounds = 0.0
    lengths = cell_layout(link, step_s)
    for i, ell in enumerate(lengths):
        bounds += ell
        if milepost <= bounds + 1e-12:
            return i
    return len(lengths) - 1


# ----------------------------------------------------------------------------
# validation


def validate(net: MultiModalNetwork) -> list:
    """Return every invariant failure as a message; empty list means valid."""
    bad = []
    step = float(net.setting("loading_step_s"))
    for l in net.links.values():
        if not l.length > 0:
            bad.append(f"link {l.id}: length must be > 0")
        if not l.speed_limit > 0:
            bad.append(f"link {l.id}: speed limit must be > 0")
        if not (l.capacity_car > 0 and l.capacity_bus > 0):
            bad.append(f"link {l.id}: capacities must be > 0")
        if not (l.jam_density_car > 0 and l.jam_density_bus > 0):
            bad.append(f"link {l.id}: jam densities must be > 0")
        if l.lanes < 1:
            bad.append(f"link {l.id}: lanes must be >= 1")

    for s in net.stops.values():
        if s.kind not in STOP_KINDS:
            bad.append(f"stop {s.id}: unknown kind {s.kind!r}")
            continue
        if s.is_virtual:
            parent = net.stops.get(s.parent_physical) if s.parent_physical else None
            if parent is None:
                bad.append(f"stop {s.id}: virtual stop lacks a parent physical stop")
            elif parent.is_virtual or parent.is_metro != s.is_metro:
                bad.append(f"stop {s.id}: parent {parent.id} is not a matching physical stop")
        elif s.parent_physical:
            bad.append(f"stop {s.id}: physical stop must not have a parent")
        if s.kind == "virtual-bus":
            if s.host_link not in net.links:
                bad.append(f"stop {s.id}: bus stop needs a host link")
            elif s.milepost is None or not 0 <= s.milepost <= net.links[s.host_link].length:
                bad.append(f"stop {s.id}: milepost outside host link")
        if s.is_metro and s.host_link:
            bad.append(f"stop {s.id}: metro stop must not reference an auto link")

    for w in net.walks.values():
        if w.category not in WALK_CATEGORIES:
            bad.append(f"walk {w.id}: unknown category {w.category!r}")
        if w.length < 0:
            bad.append(f"walk {w.id}: negative length")
        if w.category == "board-alight":
            a, b = net.stops.get(w.from_node), net.stops.get(w.to_node)
            ok = a is not None and b is not None and (
                (b.is_virtual and b.parent_physical == a.id)
                or (a.is_virtual and a.parent_physical == b.id)
            )
            if not ok:
                bad.append(f"walk {w.id}: board-alight link must join a physical stop and its virtual stop")

    for line in net.lines.values():
        if line.mode not in ("bus", "metro"):
            bad.append(f"line {line.id}: unknown mode {line.mode!r}")
        if len(line.stops) < 2:
            bad.append(f"line {line.id}: needs at least two stops")
        if any(b <= a for a, b in zip(line.trips, line.trips[1:])):
            bad.append(f"line {line.id}: trip times must be strictly increasing")
        if line.capacity <= 0:
            bad.append(f"line {line.id}: capacity must be > 0")
        want = "virtual-" + line.mode
        for s in line.stops:
            st = net.stops.get(s)
            if st is None or st.kind != want:
                bad.append(f"line {line.id}: stop {s} is not a {want} stop")
        if line.mode == "metro":
            if len(line.station_times) != len(line.stops) - 1:
                bad.append(f"line {line.id}: metro line needs {len(line.stops) - 1} station times")
            if line.route_links:
                bad.append(f"line {line.id}: metro line must not use auto links")
        else:
            if line.station_times:
                bad.append(f"line {line.id}: bus line must not carry a fixed-time table")
            bad.extend(_check_bus_route(net, line, step))

    for z in net.zones.values():
        for name in ("income", "density", "parking_fee", "pnr_fee"):
            if getattr(z, name) < 0:
                bad.append(f"zone {z.id}: {name} must be >= 0")
    for od, inc in net.od_income.items():
        if inc < 0:
            bad.append(f"od {od}: income must be >= 0")

    parking = set(net.parking_nodes)
    for p in net.paths:
        bad.extend(_check_path(net, p, parking))
    return bad


def _check_bus_route(net, line, step):
    bad = []
    route = list(line.route_links)
    for a, b in zip(route, route[1:]):
        if net.links[a].to_node != net.links[b].from_node:
            bad.append(f"line {line.id}: route links {a} -> {b} are not connected")
    pos = []
    for s in line.stops:
        st = net.stops.get(s)
        if st is None or st.host_link not in route:
            bad.append(f"line {line.id}: stop {s} is not on the line's route")
            return bad
        pos.append((route.index(st.host_link), st.milepost))
    if pos != sorted(pos):
        bad.append(f"line {line.id}: stops are not in route order")
    return bad


def _check_path(net, p, parking):
    bad = []
    if p.submode not in SUBMODES:
        return [f"path {p.id}: unknown second-level mode {p.submode!r}"]
    here = p.origin
    for leg in p.legs:
        if leg.kind == "drive":
            link = net.links[leg.ref]
            if link.from_node != here:
                bad.append(f"path {p.id}: link {leg.ref} does not start at {here}")
            here = link.to_node
        elif leg.kind == "park":
            if leg.ref not in parking or leg.ref != here:
                bad.append(f"path {p.id}: parking leg at {leg.ref} but vehicle is at {here}")
        elif leg.kind == "walk":
            w = net.walks[leg.ref]
            if w.from_node != here:
                bad.append(f"path {p.id}: walk {leg.ref} does not start at {here}")
            here = w.to_node
        else:
            line = net.lines[leg.ref]
            if here != leg.board:
                bad.append(f"path {p.id}: boards {leg.ref} at {leg.board} but is at {here}")
            if not (line.serves(leg.board) and line.serves(leg.alight)) or (
                line.stops.index(leg.board) >= line.stops.index(leg.alight)
            ):
                bad.append(f"path {p.id}: line {leg.ref} does not run {leg.board} -> {leg.alight}")
            here = leg.alight
    if here != p.dest:
        bad.append(f"path {p.id}: ends at {here}, not at destination {p.dest}")
    xb, xm = path_mode_indicators(p, net.lines)
    label = submode_label(p.has_car, xb, xm)
    if label != p.submode:
        bad.append(f"path {p.id}: legs imply mode {label!r} but labelled {p.submode!r}")
    if p.has_car and p.submode != "car" and not any(l.kind == "park" for l in p.legs):
        bad.append(f"path {p.id}: park-and-ride path has no parking leg")
    if p.tau < 0 or p.delta < 0:
        bad.append(f"path {p.id}: fees must be >= 0")
    return bad


# ----------------------------------------------------------------------------
# bundle IO


def _rows(path: FsPath):
    if not path.exists():
        raise NetworkStructureError(f"missing bundle file {path.name}")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    return rows


def _opt(text):
    return None if text in ("", "-", None) else text


def _floats(text):
    text = _opt(text)
    return tuple(float(t) for t in text.split(",")) if text else ()


def _ids(text):
    text = _opt(text)
    return tuple(text.split(",")) if text else ()


def load_network(bundle, validate_bundle: bool = True) -> MultiModalNetwork:
    bundle = FsPath(bundle)
    manifest_path = bundle / "manifest.txt"
    manifest = read_kv(manifest_path) if manifest_path.exists() else {}

    link_rows = _rows(bundle / "links.tsv")
    if not link_rows:
        raise NetworkStructureError("links.tsv contains no links")
    links = {}
    for r in link_rows:
        links[r["id"]] = AutoLink(
            r["id"], r["from_node"], r["to_node"], float(r["length_mi"]), float(r["speed_mph"]),
            float(r["cap_car_vph"]), float(r["cap_bus_vph"]), float(r["jam_car_vpm"]),
            float(r["jam_bus_vpm"]), int(r["lanes"]),
        )
    stops = {}
    for r in _rows(bundle / "stops.tsv"):
        mp = _opt(r["milepost_mi"])
        stops[r["id"]] = TransitStop(
            r["id"], r["kind"], _opt(r["parent"]), _opt(r["host_link"]),
            float(mp) if mp is not None else None, float(r["x"]), float(r["y"]),
        )
    zones, od_income = {}, {}
    for r in _rows(bundle / "zones.tsv"):
        if r["kind"] == "od":
            od_income[(r["origin"], r["dest"])] = float(r["income"])
        else:
            zones[r["id"]] = Zone(
                r["id"], r["kind"], float(r["income"]), float(r["density"]),
                float(r["parking_fee"]), float(r["pnr_fee"]),
            )
    known_nodes = {n for l in links.values() for n in (l.from_node, l.to_node)}
    known_nodes |= set(stops) | set(zones)
    walks = {}
    for r in _rows(bundle / "walks.tsv"):
        for end in (r["from_node"], r["to_node"]):
            if end not in known_nodes:
                raise NetworkStructureError(f"walk {r['id']}: unknown node {end}")
        walks[r["id"]] = WalkLink(r["id"], r["from_node"], r["to_node"], r["category"], float(r["length_mi"]))
    lines = {}
    for r in _rows(bundle / "lines.tsv"):
        line = TransitLine(
            r["id"], r["mode"], _ids(r["stops"]), _floats(r["trips_s"]), float(r["capacity"]),
            _ids(r["route_links"]), _floats(r["station_times_s"]),
        )
        for s in line.stops:
            if s not in stops:
                raise NetworkStructureError(f"line {line.id}: unknown stop {s}")
        for l in line.route_links:
            if l not in links:
                raise NetworkStructureError(f"line {line.id}: unknown link {l}")
        lines[line.id] = line
    for s in stops.values():
        if s.host_link and s.host_link not in links:
            raise NetworkStructureError(f"stop {s.id}: unknown host link {s.host_link}")
        if s.parent_physical and s.parent_physical not in stops:
            raise NetworkStructureError(f"stop {s.id}: unknown parent stop {s.parent_physical}")
    paths = []
    for r in _rows(bundle / "paths.tsv"):
        legs = tuple(Leg.decode(t) for t in r["legs"].split("|"))
        for leg in legs:
            table = {"drive": links, "walk": walks, "ride": lines, "park": zones}[leg.kind]
            if leg.ref not in table:
                raise NetworkStructureError(f"path {r['id']}: unknown {leg.kind} reference {leg.ref}")
            if leg.kind == "ride" and (leg.board not in stops or leg.alight not in stops):
                raise NetworkStructureError(f"path {r['id']}: unknown stop in {leg.encode()}")
        paths.append(Path(r["id"], r["origin"], r["dest"], r["submode"], legs, float(r["tau"]), float(r["delta"])))
    for p in paths:
        if p.od not in od_income:
            raise NetworkStructureError(f"path {p.id}: no zone record for O-D {p.od}")
        for z in p.od:
            if z not in zones:
                raise NetworkStructureError(f"path {p.id}: unknown zone {z}")
    net = MultiModalNetwork(links, stops, walks, lines, zones, od_income, tuple(paths), manifest)
    if validate_bundle:
        failures = validate(net)
        if failures:
            raise NetworkValidationError(failures)
    return net


def _fmt(x):
    if x is None:
        return "-"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _join(vals):
    return ",".join(_fmt(v) for v in vals) if vals else "-"


def write_network(net: MultiModalNetwork, bundle) -> None:
    bundle = FsPath(bundle)
    bundle.mkdir(parents=True, exist_ok=True)
    _write(bundle / "links.tsv",
           ["id", "from_node", "to_node", "length_mi", "speed_mph", "cap_car_vph", "cap_bus_vph",
            "jam_car_vpm", "jam_bus_vpm", "lanes"],
           [[l.id, l.from_node, l.to_node, l.length, l.speed_limit, l.capacity_car, l.capacity_bus,
             l.jam_density_car, l.jam_density_bus, l.lanes] for l in net.links.values()])
    _write(bundle / "stops.tsv", ["id", "kind", "parent", "host_link", "milepost_mi", "x", "y"],
           [[s.id, s.kind, s.parent_physical, s.host_link, s.milepost, s.x, s.y] for s in net.stops.values()])
    _write(bundle / "walks.tsv", ["id", "from_node", "to_node", "category", "length_mi"],
           [[w.id, w.from_node, w.to_node, w.category, w.length] for w in net.walks.values()])
    _write(bundle / "lines.tsv",
           ["id", "mode", "capacity", "stops", "route_links", "station_times_s", "trips_s"],
           [[l.id, l.mode, l.capacity, _join(l.stops), _join(l.route_links), _join(l.station_times),
             _join(l.trips)] for l in net.lines.values()])
    zone_rows = [[z.id, z.kind, None, None, z.income, z.density, z.parking_fee, z.pnr_fee]
                 for z in net.zones.values()]
    zone_rows += [[f"{o}>{d}", "od", o, d, inc, 0.0, 0.0, 0.0] for (o, d), inc in net.od_income.items()]
    _write(bundle / "zones.tsv",
           ["id", "kind", "origin", "dest", "income", "density", "parking_fee", "pnr_fee"], zone_rows)
    _write(bundle / "paths.tsv", ["id", "origin", "dest", "submode", "tau", "delta", "legs"],
           [[p.id, p.origin, p.dest, p.submode, p.tau, p.delta, "|".join(l.encode() for l in p.legs)]
            for p in net.paths])
    write_kv(bundle / "manifest.txt", net.manifest)
