"""Tab-separated readers and writers for demand, parameters, path flows and observations."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .choice import PARAM_NAMES, ParamVector
from .estimation import ObservationSet
from .network import MultiModalNetwork


class ArtifactError(ValueError):
    pass


def _write(path, header, rows, delimiter="\t"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read(path, required):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    if rows and not set(required) <= set(rows[0]):
        raise ArtifactError(f"{path}: expected columns {required}")
    return rows


def write_demand(path, net: MultiModalNetwork, q) -> None:
    q = np.asarray(q, dtype=float)
    _write(path, ["origin", "dest", "interval", "trips"],
           [[o, d, t, repr(float(q[i, t]))] for i, (o, d) in enumerate(net.od_pairs) for t in range(q.shape[1])])


def read_demand(path, net: MultiModalNetwork, n_dep: int) -> np.ndarray:
    pos = {od: i for i, od in enumerate(net.od_pairs)}
    q = np.full((len(pos), n_dep), np.nan)
    for r in _read(path, ["origin", "dest", "interval", "trips"]):
        od = (r["origin"], r["dest"])
        if od not in pos:
            raise ArtifactError(f"{path}: unknown O-D pair {od}")
        q[pos[od], int(r["interval"])] = float(r["trips"])
    if np.isnan(q).any():
        raise ArtifactError(f"{path}: demand missing for some (O-D, interval)")
    return q


def write_params(path, theta: ParamVector) -> None:
    _write(path, ["parameter", "value", "free"],
           [[n, repr(float(v)), int(f)] for n, v, f in zip(theta.names, theta.values, theta.free)])


def read_params(path) -> ParamVector:
    rows = _read(path, ["parameter", "value", "free"])
    names = [r["parameter"] for r in rows]
    unknown = [n for n in names if n not in PARAM_NAMES]
    if unknown:
        raise ArtifactError(f"{path}: unknown parameters {unknown}")
    order = sorted(range(len(rows)), key=lambda i: PARAM_NAMES.index(names[i]))
    return ParamVector(tuple(names[i] for i in order), [float(rows[i]["value"]) for i in order],
                       [bool(int(rows[i]["free"])) for i in order])


def write_flows(path, net: MultiModalNetwork, f) -> None:
    f = np.asarray(f, dtype=float)
    _write(path, ["path", "interval", "flow"],
           [[p.id, t, repr(float(f[k, t]))] for k, p in enumerate(net.paths) for t in range(f.shape[1])])


def read_flows(path, net: MultiModalNetwork, n_dep: int) -> np.ndarray:
    f = np.zeros((len(net.paths), n_dep))
    for r in _read(path, ["path", "interval", "flow"]):
        if r["path"] not in net.path_index:
            raise ArtifactError(f"{path}: unknown path {r['path']}")
        f[net.path_index[r["path"]], int(r["interval"])] = float(r["flow"])
    return f


def write_observations(directory, net: MultiModalNetwork, obs: ObservationSet, pairs, n_int: int) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    links = list(net.links)
    rows = [[links[i // n_int], i % n_int, repr(float(obs.link_flow[i]))] for i in np.flatnonzero(obs.link_flow_mask)]
    _write(d / "link_flow.tsv", ["link", "interval", "vehicles"], rows)
    rows = [[links[i // n_int], i % n_int, repr(float(obs.travel_time[i]))]
            for i in np.flatnonzero(obs.travel_time_mask)]
    _write(d / "travel_time.tsv", ["link", "interval", "minutes"], rows)
    rows = []
    for i in np.flatnonzero(obs.pt_mask):
        stop, line, trip = pairs[i // 2]
        rows.append([stop, line, trip, "board" if i % 2 == 0 else "alight", repr(float(obs.pt_counts[i]))])
    _write(d / "pt_counts.tsv", ["stop", "line", "trip", "kind", "passengers"], rows)


def read_observations(directory, net: MultiModalNetwork, pairs, n_int: int) -> ObservationSet:
    d = Path(directory)
    link_pos = {l: i for i, l in enumerate(net.links)}
    pair_pos = {(s, l, int(j)): i for i, (s, l, j) in enumerate(pairs)}
    n_c = len(link_pos) * n_int

    def link_table(name, col):
        vals, mask = np.zeros(n_c), np.zeros(n_c, bool)
        for r in _read(d / name, ["link", "interval", col]):
            if r["link"] not in link_pos:
                raise ArtifactError(f"{name}: unknown link {r['link']}")
            i = link_pos[r["link"]] * n_int + int(r["interval"])
            vals[i], mask[i] = float(r[col]), True
        return vals, mask

    x, xm = link_table("link_flow.tsv", "vehicles")
    t, tm = link_table("travel_time.tsv", "minutes")
    pt, pm = np.zeros(2 * len(pairs)), np.zeros(2 * len(pairs), bool)
    for r in _read(d / "pt_counts.tsv", ["stop", "line", "trip", "kind", "passengers"]):
        key = (r["stop"], r["line"], int(r["trip"]))
        if key not in pair_pos:
            raise ArtifactError(f"pt_counts.tsv: unknown (stop, trip) pair {key}")
        i = 2 * pair_pos[key] + (0 if r["kind"] == "board" else 1)
        pt[i], pm[i] = float(r["passengers"]), True
    return ObservationSet(x, xm, pt, pm, t, tm)


def write_scatter(path, observed, simulated) -> None:
    rows = [[repr(float(a)), repr(float(b))] for a, b in zip(observed, simulated)]
    _write(path, ["observed", "simulated"], rows, delimiter=",")
