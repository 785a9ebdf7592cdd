"""Programmatic builders for the shipped networks.

``build_nguyen_dupuis`` constructs the 13-node benchmark with a bus and metro
layer on top; ``scripts/build_nguyen_dupuis.py`` writes it to the packaged
bundle.  The small builders (corridor, parallel routes, toy multimodal) back
the unit tests and the statistical checks.
"""

from __future__ import annotations

import itertools
import math
from importlib import resources

import numpy as np

from .network import (
    AutoLink,
    Leg,
    MultiModalNetwork,
    Path,
    TransitLine,
    TransitStop,
    WalkLink,
    Zone,
    load_network,
    submode_label,
)

# ----------------------------------------------------------------------------
# Nguyen-Dupuis geometry

ND_LINKS = {
    "1": ("1", "5"), "2": ("1", "12"), "3": ("4", "5"), "4": ("4", "9"), "5": ("5", "6"),
    "6": ("5", "9"), "7": ("6", "7"), "8": ("6", "10"), "9": ("7", "8"), "10": ("7", "11"),
    "11": ("8", "2"), "12": ("9", "10"), "13": ("9", "13"), "14": ("10", "11"), "15": ("11", "2"),
    "16": ("11", "3"), "17": ("12", "6"), "18": ("12", "8"), "19": ("13", "3"),
}
# grid coordinates; one unit is GRID_MI miles
ND_NODES = {
    "1": (1, 3), "12": (3, 3), "4": (0, 2), "5": (1, 2), "6": (2, 2), "7": (3, 2), "8": (4, 2),
    "9": (1, 1), "10": (2, 1), "11": (3, 1), "2": (4, 1), "13": (2, 0), "3": (3, 0),
}
GRID_MI = 0.6
ND_OD = (("1", "2"), ("1", "3"), ("4", "2"), ("4", "3"))
ND_PARKING = "6"

# (length mi, speed mph, car vph, bus vph, lanes); jam densities are per lane
_ND_DEFAULT_LINK = (0.6, 30.0, 900.0, 700.0, 1)
_ND_SPECIAL_LINKS = {
    "4": (1.2, 40.0, 1200.0, 1000.0, 2),
    "8": (1.2, 40.0, 1200.0, 1000.0, 2),
    "10": (2.0, 50.0, 1600.0, 1400.0, 2),
}
ND_JAM_CAR = 250.0
ND_JAM_BUS = 200.0

# income $/hr, density persons/100 m^2, parking fee $, PNR fee $
ND_ZONES = {
    "1": (20.0, 21.0, 10.0, 3.0),
    "2": (18.0, 22.0, 10.0, 3.0),
    "3": (22.0, 18.0, 10.0, 3.0),
    "4": (25.0, 15.0, 10.0, 3.0),
}
ND_PNR_FEE = 3.0

ND_BUS_LINES = {
    "B1": ("1", "5", "7", "9", "11"),
    "B2": ("2", "18", "11"),
    "B3": ("3", "5", "8", "14", "16"),
    "B4": ("4", "13", "19"),
    "B5": ("2", "17", "8", "14", "15"),
    "B6": ("4", "12", "14", "15"),
}
# metro stations sit next to a road node, offset so walks have nonzero length
ND_STATIONS = {
    "A": "1", "B": "4", "C": "6", "D": "10", "E": "2", "F": "3", "G": "12", "H": "9", "I": "7", "J": "11",
}
ND_METRO_LINES = {
    "M1": ("A", "G", "C", "I", "E"),
    "M2": ("B", "H", "D", "J", "F"),
    "M3": ("C", "D", "J", "E"),
}
STATION_OFFSET = (0.15, 0.15)

ND_TRIPS = 30
ND_HEADWAY_S = 180.0
BUS_CAPACITY = 60.0
METRO_CAPACITY = 600.0
METRO_SPEED_MPH = 35.0
METRO_MIN_HOP_S = 60.0
BUS_FARE = 1.5
METRO_FARE = 2.5

ACCESS_RADIUS_MI = 0.45
TRANSFER_RADIUS_MI = 0.75
ND_WALK_LINKS = 220
ND_TRANSIT_PATHS = 177
ND_PNR_PATHS = 84

ND_MANIFEST = {
    "name": "nguyen-dupuis",
    "walking_speed_mph": 3.1,
    "loading_step_s": 5,
    "aggregation_interval_s": 900,
    "horizon_s": 5400,
    "demand_intervals": 4,
    "time_unit": "minutes",
    "money_unit": "dollars",
    "time_scale": 0.1,
    "money_scale": 0.1,
    "income_scale": 0.01,
    "density_scale": 0.1,
}


def _dist(a, b):
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _xy(node):
    x, y = ND_NODES[node]
    return (x * GRID_MI, y * GRID_MI)


def _nd_links():
    links = {}
    for lid, (a, b) in ND_LINKS.items():
        length, speed, cap, cap_bus, lanes = _ND_SPECIAL_LINKS.get(lid, _ND_DEFAULT_LINK)
        links[lid] = AutoLink(lid, a, b, length, speed, cap, cap_bus, ND_JAM_CAR, ND_JAM_BUS, lanes)
    return links


def _car_routes(links, origin, dest):
    out = {}
    for l in links.values():
        out.setdefault(l.from_node, []).append(l)

    def walk(node, seen):
        if node == dest:
            yield []
            return
        for l in out.get(node, []):
            if l.to_node in seen:
                continue
            for rest in walk(l.to_node, seen | {l.to_node}):
                yield [l.id] + rest

    return list(walk(origin, {origin}))


def _nd_transit(links):
    stops, lines = {}, {}
    for line_id, route in ND_BUS_LINES.items():
        vs = []
        for lid in route:
            link = links[lid]
            pid = f"PB{lid}"
            if pid not in stops:
                a, b = _xy(link.from_node), _xy(link.to_node)
                stops[pid] = TransitStop(pid, "physical-bus", x=(a[0] + b[0]) / 2, y=(a[1] + b[1]) / 2)
            vid = f"{line_id}@{lid}"
            p = stops[pid]
            stops[vid] = TransitStop(vid, "virtual-bus", pid, lid, link.length / 2, p.x, p.y)
            vs.append(vid)
        trips = tuple(ND_HEADWAY_S * j for j in range(ND_TRIPS))
        lines[line_id] = TransitLine(line_id, "bus", tuple(vs), trips, BUS_CAPACITY, tuple(route))
    for name, node in ND_STATIONS.items():
        x, y = _xy(node)
        stops[f"PM{name}"] = TransitStop(f"PM{name}", "physical-metro", x=x + STATION_OFFSET[0], y=y + STATION_OFFSET[1])
    for line_id, seq in ND_METRO_LINES.items():
        vs, hops = [], []
        for name in seq:
            p = stops[f"PM{name}"]
            vid = f"{line_id}@{name}"
            stops[vid] = TransitStop(vid, "virtual-metro", p.id, None, None, p.x, p.y)
            vs.append(vid)
        for a, b in zip(seq, seq[1:]):
            d = _dist((stops[f"PM{a}"].x, stops[f"PM{a}"].y), (stops[f"PM{b}"].x, stops[f"PM{b}"].y))
            hops.append(float(max(METRO_MIN_HOP_S, round(d / METRO_SPEED_MPH * 3600.0 / 5.0) * 5.0)))
        trips = tuple(ND_HEADWAY_S * j for j in range(ND_TRIPS))
        lines[line_id] = TransitLine(line_id, "metro", tuple(vs), trips, METRO_CAPACITY, (), tuple(hops))
    return stops, lines


def _ride_seconds(line, links, i, j):
    """Free-flow in-vehicle seconds between stop positions i < j of a line."""
    if line.mode == "metro":
        return sum(line.station_times[i:j])
    route = list(line.route_links)
    a = route.index(line.stops[i].split("@")[1])
    b = route.index(line.stops[j].split("@")[1])
    total = links[route[a]].free_flow_time_s / 2 + links[route[b]].free_flow_time_s / 2
    total += sum(links[route[k]].free_flow_time_s for k in range(a + 1, b))
    return total


class _WalkBook:
    """Candidate walking links keyed by (from, to); ids assigned on first use."""

    def __init__(self):
        self.cands = {}
        self.used = {}

    def add(self, a, b, category, length):
        self.cands.setdefault((a, b), (category, length))

    def get(self, a, b):
        return self.cands.get((a, b))


def _transit_candidates(start, dest, start_kind, stops, lines, links, walks, speed_mph, max_rides=2):
    """Enumerate walk/ride sequences from ``start`` to ``dest`` with at most ``max_rides`` rides.

    Returns (legs as (kind, a, b[, line]) tuples, free-flow minutes, rides) for every
    loop-free itinerary.
    """
    physical = [s for s in stops.values() if not s.is_virtual]
    virtuals_of = {}
    for s in stops.values():
        if s.is_virtual:
            virtuals_of.setdefault(s.parent_physical, []).append(s.id)
    out = []
    wait_min = ND_HEADWAY_S / 60.0 / 2.0

    def walk_min(length):
        return length / speed_mph * 60.0

    def extend(at_phys, legs, minutes, used_lines, visited, rides):
        if rides:
            egress = walks.get(at_phys, dest)
            if egress is not None:
                out.append((legs + [("walk", at_phys, dest)], minutes + walk_min(egress[1]), rides))
        if rides >= max_rides:
            return
        # board here or after one transfer walk
        options = [(at_phys, [], 0.0)]
        if rides:
            for p in physical:
                w = walks.get(at_phys, p.id)
                if w is not None and w[0] == "transfer" and p.id not in visited:
                    options.append((p.id, [("walk", at_phys, p.id)], walk_min(w[1])))
        for phys, pre, pre_min in options:
            for v in virtuals_of.get(phys, []):
                for line in lines.values():
                    if v not in line.stops or line.id in used_lines:
                        continue
                    i = line.stops.index(v)
                    for j in range(i + 1, len(line.stops)):
                        alight = line.stops[j]
                        p2 = stops[alight].parent_physical
                        if p2 in visited or p2 == phys:
                            continue
                        ride = _ride_seconds(line, links, i, j) / 60.0
                        new_legs = legs + pre + [("walk", phys, v), ("ride", v, alight, line.id), ("walk", alight, p2)]
                        extend(p2, new_legs, minutes + pre_min + wait_min + ride,
                               used_lines | {line.id}, visited | {phys, p2}, rides + 1)

    for p in physical:
        w = walks.get(start, p.id)
        if w is not None and w[0] == start_kind:
            extend(p.id, [("walk", start, p.id)], walk_min(w[1]), frozenset(), {p.id}, 0)
    return out


def _round_robin(cands, target):
    """Pick ``target`` itineraries: best of each group first, then second best, ..."""
    groups = {}
    for c in cands:
        groups.setdefault(c["group"], []).append(c)
    ranked = []
    for g, items in groups.items():
        items.sort(key=lambda c: (c["minutes"], c["key"]))
        for r, c in enumerate(items):
            ranked.append((r, c["minutes"], c["key"], c))
    ranked.sort(key=lambda t: t[:3])
    if len(ranked) < target:
        raise ValueError(f"only {len(ranked)} candidate itineraries for a target of {target}")
    return [t[3] for t in ranked[:target]]


def build_nguyen_dupuis() -> MultiModalNetwork:
    links = _nd_links()
    stops, lines = _nd_transit(links)
    speed = ND_MANIFEST["walking_speed_mph"]

    book = _WalkBook()
    physical = [s for s in stops.values() if not s.is_virtual]
    for z in list(ND_ZONES) + [ND_PARKING]:
        zxy = _xy(z)
        cat = "parking-access" if z == ND_PARKING else "origin-access"
        for p in physical:
            d = _dist(zxy, (p.x, p.y))
            if d <= ACCESS_RADIUS_MI:
                book.add(z, p.id, cat, round(d, 4))
                book.add(p.id, z, cat, round(d, 4))
    for a, b in itertools.permutations(physical, 2):
        d = _dist((a.x, a.y), (b.x, b.y))
        if 0 < d <= TRANSFER_RADIUS_MI:
            book.add(a.id, b.id, "transfer", round(d, 4))
    for s in stops.values():
        if s.is_virtual:
            book.add(s.parent_physical, s.id, "board-alight", 0.0)
            book.add(s.id, s.parent_physical, "board-alight", 0.0)

    def mode_of(rides):
        kinds = {lines[r[3]].mode for r in rides}
        return ("bus" in kinds, "metro" in kinds)

    car_paths = []
    for o, d in ND_OD:
        for route in _car_routes(links, o, d):
            car_paths.append((o, d, route))

    transit_cands, pnr_cands = [], []
    for o, d in ND_OD:
        for legs, minutes, _ in _transit_candidates(o, d, "origin-access", stops, lines, links, book, speed):
            xb, xm = mode_of([l for l in legs if l[0] == "ride"])
            label = submode_label(False, xb, xm)
            key = "|".join(":".join(l[1:]) for l in legs)
            transit_cands.append(dict(od=(o, d), group=(o, d, label), submode=label, legs=legs,
                                      minutes=minutes, key=key, drive=()))
        drives = _car_routes(links, o, ND_PARKING)
        tails = _transit_candidates(ND_PARKING, d, "parking-access", stops, lines, links, book, speed)
        for route in drives:
            drive_min = sum(links[l].free_flow_time_s for l in route) / 60.0
            for legs, minutes, _ in tails:
                xb, xm = mode_of([l for l in legs if l[0] == "ride"])
                label = submode_label(True, xb, xm)
                key = ",".join(route) + "|" + "|".join(":".join(l[1:]) for l in legs)
                pnr_cands.append(dict(od=(o, d), group=(o, d, label), submode=label, legs=legs,
                                      minutes=minutes + drive_min, key=key, drive=tuple(route)))

    chosen_transit = _round_robin(transit_cands, ND_TRANSIT_PATHS)
    chosen_pnr = _round_robin(pnr_cands, ND_PNR_PATHS)

    walk_ids = {}
    walks = {}

    def walk_id(a, b):
        if (a, b) not in walk_ids:
            cat, length = book.get(a, b)
            wid = f"W{len(walk_ids) + 1:03d}"
            walk_ids[(a, b)] = wid
            walks[wid] = WalkLink(wid, a, b, cat, length)
        return walk_ids[(a, b)]

    # board-alight links first, then walks used by paths, then the shortest unused
    for s in stops.values():
        if s.is_virtual:
            walk_id(s.parent_physical, s.id)
            walk_id(s.id, s.parent_physical)

    def to_legs(c):
        legs = [Leg("drive", l) for l in c["drive"]]
        if c["drive"]:
            legs.append(Leg("park", ND_PARKING))
        for l in c["legs"]:
            if l[0] == "walk":
                legs.append(Leg("walk", walk_id(l[1], l[2])))
            else:
                legs.append(Leg("ride", l[3], l[1], l[2]))
        return tuple(legs)

    paths = []
    zone_fee = {z: v[2] for z, v in ND_ZONES.items()}
    for i, (o, d, route) in enumerate(car_paths):
        paths.append(Path(f"C{i + 1:03d}", o, d, "car", tuple(Leg("drive", l) for l in route), tau=zone_fee[d]))
    order = sorted(chosen_transit, key=lambda c: (ND_OD.index(c["od"]), c["submode"], c["minutes"], c["key"]))
    for i, c in enumerate(order):
        paths.append(Path(f"T{i + 1:03d}", *c["od"], c["submode"], to_legs(c), delta=_fare(c, lines)))
    order = sorted(chosen_pnr, key=lambda c: (ND_OD.index(c["od"]), c["submode"], c["minutes"], c["key"]))
    for i, c in enumerate(order):
        paths.append(Path(f"R{i + 1:03d}", *c["od"], c["submode"], to_legs(c), tau=ND_PNR_FEE,
                          delta=_fare(c, lines)))

    spare = sorted((length, a, b) for (a, b), (cat, length) in book.cands.items() if (a, b) not in walk_ids)
    if len(walk_ids) > ND_WALK_LINKS:
        raise ValueError(f"paths use {len(walk_ids)} walking links, more than {ND_WALK_LINKS}")
    for _, a, b in spare[: ND_WALK_LINKS - len(walk_ids)]:
        walk_id(a, b)

    zones = {z: Zone(z, "zone", inc, dens, fee, pnr) for z, (inc, dens, fee, pnr) in ND_ZONES.items()}
    zones[ND_PARKING] = Zone(ND_PARKING, "parking", pnr_fee=ND_PNR_FEE)
    od_income = {(o, d): (ND_ZONES[o][0] + ND_ZONES[d][0]) / 2 for o, d in ND_OD}
    return MultiModalNetwork(links, stops, walks, lines, zones, od_income, tuple(paths), dict(ND_MANIFEST))


def _fare(c, lines):
    return sum(BUS_FARE if lines[l[3]].mode == "bus" else METRO_FARE for l in c["legs"] if l[0] == "ride")


def nguyen_dupuis() -> MultiModalNetwork:
    """Load the packaged Nguyen-Dupuis bundle."""
    bundle = resources.files("mmjoint") / "data" / "nguyen_dupuis"
    with resources.as_file(bundle) as path:
        return load_network(path)


# ----------------------------------------------------------------------------
# small networks for tests


def _zones_for(nodes, income=20.0, density=20.0, parking_fee=0.0):
    return {n: Zone(n, "zone", income, density, parking_fee, 0.0) for n in nodes}


def build_corridor(n_links=3, length=0.6, speed=30.0, capacity=900.0, lanes=1, horizon_s=1800,
                   interval_s=300, demand_intervals=2) -> MultiModalNetwork:
    """Single O-D car corridor o -> n1 -> ... -> d with one path."""
    nodes = ["o"] + [f"n{i}" for i in range(1, n_links)] + ["d"]
    links = {}
    for i, (a, b) in enumerate(zip(nodes, nodes[1:])):
        lid = f"L{i + 1}"
        links[lid] = AutoLink(lid, a, b, length, speed, capacity, capacity, ND_JAM_CAR, ND_JAM_BUS, lanes)
    path = Path("P1", "o", "d", "car", tuple(Leg("drive", l) for l in links))
    manifest = dict(name="corridor", horizon_s=horizon_s, aggregation_interval_s=interval_s,
                    demand_intervals=demand_intervals)
    return MultiModalNetwork(links, {}, {}, {}, _zones_for(["o", "d"]), {("o", "d"): 20.0}, (path,), manifest)


def build_parallel(length=0.6, speed=30.0, capacity=900.0, horizon_s=1800, interval_s=300,
                   demand_intervals=2) -> MultiModalNetwork:
    """Two identical parallel car routes o -> a -> d and o -> b -> d."""
    spec = {"L1": ("o", "a"), "L2": ("a", "d"), "L3": ("o", "b"), "L4": ("b", "d")}
    links = {k: AutoLink(k, a, b, length, speed, capacity, capacity, ND_JAM_CAR, ND_JAM_BUS, 1)
             for k, (a, b) in spec.items()}
    paths = (
        Path("P1", "o", "d", "car", (Leg("drive", "L1"), Leg("drive", "L2"))),
        Path("P2", "o", "d", "car", (Leg("drive", "L3"), Leg("drive", "L4"))),
    )
    manifest = dict(name="parallel", horizon_s=horizon_s, aggregation_interval_s=interval_s,
                    demand_intervals=demand_intervals)
    return MultiModalNetwork(links, {}, {}, {}, _zones_for(["o", "d"]), {("o", "d"): 20.0}, paths, manifest)


def build_toy_multimodal(horizon_s=2400, interval_s=600, demand_intervals=2, headway_s=120.0,
                         n_trips=None, bus_capacity=60.0, metro_capacity=600.0,
                         capacity=900.0, two_od=True) -> MultiModalNetwork:
    """Small network exercising all seven second-level modes.

    Road: o1 -> a -> b -> d with a parking node at ``a`` and a second
    origin o2 -> a.  A bus runs o1 -> a -> b -> d with a stop on every
    link; a metro runs alongside a -> b -> d with a station at each.
    """
    spec = {
        "L1": ("o1", "a", 0.6, 30.0), "L2": ("a", "b", 0.6, 30.0), "L3": ("b", "d", 0.6, 30.0),
        "L4": ("o1", "d", 1.5, 45.0), "L5": ("o2", "a", 0.6, 30.0),
    }
    links = {k: AutoLink(k, a, b, ln, sp, capacity, capacity * 0.8, ND_JAM_CAR, ND_JAM_BUS, 1)
             for k, (a, b, ln, sp) in spec.items()}
    xy = {"o1": (0.0, 0.0), "o2": (0.0, 0.6), "a": (0.6, 0.0), "b": (1.2, 0.0), "d": (1.8, 0.0)}
    stops = {}
    bus_route = ("L1", "L2", "L3")
    vs = []
    for lid in bus_route:
        l = links[lid]
        x = (xy[l.from_node][0] + xy[l.to_node][0]) / 2
        y = (xy[l.from_node][1] + xy[l.to_node][1]) / 2
        stops[f"PB{lid}"] = TransitStop(f"PB{lid}", "physical-bus", x=x, y=y)
        stops[f"BUS@{lid}"] = TransitStop(f"BUS@{lid}", "virtual-bus", f"PB{lid}", lid, l.length / 2, x, y)
        vs.append(f"BUS@{lid}")
    if n_trips is None:
        n_trips = int(horizon_s // headway_s)
    trips = tuple(headway_s * j for j in range(n_trips))
    lines = {"BUS": TransitLine("BUS", "bus", tuple(vs), trips, bus_capacity, bus_route)}
    for name, node in (("MA", "a"), ("MB", "b"), ("MD", "d")):
        x, y = xy[node]
        stops[f"P{name}"] = TransitStop(f"P{name}", "physical-metro", x=x + 0.05, y=y + 0.05)
        stops[f"MET@{name}"] = TransitStop(f"MET@{name}", "virtual-metro", f"P{name}", None, None, x + 0.05, y + 0.05)
    lines["MET"] = TransitLine("MET", "metro", ("MET@MA", "MET@MB", "MET@MD"), trips, metro_capacity, (), (75.0, 75.0))

    walks = {}

    def w(a, b, cat, length):
        wid = f"W{len(walks) + 1:02d}"
        walks[wid] = WalkLink(wid, a, b, cat, length)
        return wid

    ba = {}
    for s in stops.values():
        if s.is_virtual:
            ba[(s.parent_physical, s.id)] = w(s.parent_physical, s.id, "board-alight", 0.0)
            ba[(s.id, s.parent_physical)] = w(s.id, s.parent_physical, "board-alight", 0.0)
    acc = {
        ("o1", "PBL1"): w("o1", "PBL1", "origin-access", 0.3),
        ("o2", "PBL1"): w("o2", "PBL1", "origin-access", 0.5),
        ("o2", "PMA"): w("o2", "PMA", "origin-access", 0.7),
        ("o1", "PMA"): w("o1", "PMA", "origin-access", 0.65),
        ("PBL3", "d"): w("PBL3", "d", "origin-access", 0.3),
        ("PMD", "d"): w("PMD", "d", "origin-access", 0.07),
        ("a", "PBL2"): w("a", "PBL2", "parking-access", 0.3),
        ("a", "PMA"): w("a", "PMA", "parking-access", 0.07),
        ("PBL1", "PMA"): w("PBL1", "PMA", "transfer", 0.32),
        ("PBL2", "PMA"): w("PBL2", "PMA", "transfer", 0.32),
        ("PBL3", "PMB"): w("PBL3", "PMB", "transfer", 0.32),
    }

    def ride(line, a, b):
        return Leg("ride", line, a, b)

    def walk(a, b):
        return Leg("walk", acc.get((a, b)) or ba[(a, b)])

    paths = []

    def add(origin, submode, legs, tau=0.0, delta=0.0):
        paths.append(Path(f"{origin}-{len(paths) + 1:02d}", origin, "d", submode, tuple(legs), tau, delta))

    for o in (["o1", "o2"] if two_od else ["o1"]):
        head = [] if o == "o1" else [Leg("drive", "L5")]
        if o == "o1":
            add(o, "car", [Leg("drive", "L1"), Leg("drive", "L2"), Leg("drive", "L3")], tau=2.0)
            add(o, "car", [Leg("drive", "L4")], tau=2.0)
        else:
            add(o, "car", head + [Leg("drive", "L2"), Leg("drive", "L3")], tau=2.0)
        bus_tail = [walk("PBL1", "BUS@L1"), ride("BUS", "BUS@L1", "BUS@L3"), walk("BUS@L3", "PBL3"), walk("PBL3", "d")]
        add(o, "bus", [walk(o, "PBL1")] + bus_tail, delta=1.5)
        met_tail = [walk("PMA", "MET@MA"), ride("MET", "MET@MA", "MET@MD"), walk("MET@MD", "PMD"), walk("PMD", "d")]
        add(o, "metro", [walk(o, "PMA")] + met_tail, delta=2.5)
        add(o, "bus+metro", [walk(o, "PBL1"), walk("PBL1", "BUS@L1"), ride("BUS", "BUS@L1", "BUS@L2"),
                             walk("BUS@L2", "PBL2"), walk("PBL2", "PMA")] + met_tail, delta=4.0)
        drive_a = [Leg("drive", "L1")] if o == "o1" else head
        park = drive_a + [Leg("park", "a")]
        add(o, "car+bus", park + [walk("a", "PBL2"), walk("PBL2", "BUS@L2"), ride("BUS", "BUS@L2", "BUS@L3"),
                                  walk("BUS@L3", "PBL3"), walk("PBL3", "d")], tau=1.0, delta=1.5)
        add(o, "car+metro", park + [walk("a", "PMA")] + met_tail, tau=1.0, delta=2.5)
        add(o, "car+bus+metro", park + [walk("a", "PBL2"), walk("PBL2", "BUS@L2"), ride("BUS", "BUS@L2", "BUS@L3"),
                                        walk("BUS@L3", "PBL3"), walk("PBL3", "PMB"), walk("PMB", "MET@MB"),
                                        ride("MET", "MET@MB", "MET@MD"), walk("MET@MD", "PMD"), walk("PMD", "d")],
            tau=1.0, delta=4.0)

    zones = {
        "o1": Zone("o1", "zone", 20.0, 21.0, 0.0, 0.0),
        "o2": Zone("o2", "zone", 25.0, 15.0, 0.0, 0.0),
        "d": Zone("d", "zone", 18.0, 22.0, 2.0, 1.0),
        "a": Zone("a", "parking", pnr_fee=1.0),
    }
    od_income = {("o1", "d"): 19.0}
    if two_od:
        od_income[("o2", "d")] = 21.5
    manifest = dict(name="toy-multimodal", horizon_s=horizon_s, aggregation_interval_s=interval_s,
                    demand_intervals=demand_intervals, time_scale=0.1, money_scale=0.1,
                    income_scale=0.01, density_scale=0.1)
    return MultiModalNetwork(links, stops, walks, lines, zones, od_income, tuple(paths), manifest)


# ----------------------------------------------------------------------------
# ground truth for the recovery experiments

ND_TRUTH_FULL = {
    "beta1_car": 1.0, "beta1_bus": 1.2, "beta1_metro": 0.8, "beta2": 1.5,
    "beta3_bus": 1.5, "beta3_metro": 0.8, "beta4": 1.5,
    "gamma1_car": 0.0, "gamma1_bus": 1.0, "gamma1_metro": 0.8, "gamma1_bus+metro": 1.0,
    "gamma1_car+bus": 0.3, "gamma1_car+metro": 0.2, "gamma1_car+bus+metro": 0.3,
    "gamma2_car": 0.1, "gamma2_bus": -0.3, "gamma2_metro": -0.4, "gamma2_bus+metro": -0.3,
    "gamma2_car+bus": 0.1, "gamma2_car+metro": 0.1, "gamma2_car+bus+metro": 0.1,
    "gamma3_car": 0.3, "gamma3_bus": 0.0, "gamma3_metro": 0.0, "gamma3_bus+metro": 0.0,
    "gamma3_car+bus": 0.0, "gamma3_car+metro": 0.0, "gamma3_car+bus+metro": 0.0,
    "alpha_bus": 2.0, "alpha_metro": 1.0, "alpha_bus+metro": 1.5,
    "alpha_car+bus": 1.0, "alpha_car+metro": 0.5, "alpha_car+bus+metro": 1.0,
}

# simplified model: only the seven time and money coefficients are free
ND_TRUTH_SIMPLE = {
    "beta1_car": 1.0, "beta1_bus": 1.5, "beta1_metro": 0.8, "beta2": 2.0,
    "beta3_bus": 2.0, "beta3_metro": 1.0, "beta4": 2.0,
}

# trips per O-D pair per 15-minute departure interval
ND_DEMAND = np.array([
    [190.0, 255.0, 290.0, 225.0],
    [145.0, 210.0, 240.0, 175.0],
    [160.0, 225.0, 255.0, 190.0],
    [175.0, 240.0, 270.0, 210.0],
])
