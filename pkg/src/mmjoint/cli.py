"""Command line entry point: ``mmjoint {generate,estimate,select,dnl,validate}``.

Exit codes: 0 success, 2 invalid input (network, config or data files),
3 numerical abort (non-finite costs, diverging estimation).
"""

from __future__ import annotations

import argparse
import hashlib
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import fixtures
from .artifacts import (ArtifactError, read_demand, read_flows, read_observations, read_params, write_demand,
                        write_flows, write_observations, write_params, write_scatter)
from .choice import ChoiceError, ParamVector
from .dnl import LoadingConfig, LoadingError, load, write_trajectory
from .equilibrium import EquilibriumConfig, EquilibriumError, EquilibriumSolver, write_convergence_log
from .estimation import (COMPONENTS, EstimationConfig, EstimationDiverged, EstimationError, Model,
                         ObservationSet, estimate, simulated, write_fit_report, write_trace)
from .kv import read_kv, write_kv
from .network import NetworkError, enumerate_counts, load_network, validate
from .stats import StatsError, select_variables, test_all_components, write_selection_history, write_wald_report

VERSION = "0.1.0"

DEFAULTS = {
    "network": "nguyen-dupuis",
    "truth": "full",  # full | simple | path to a parameter table
    "demand": "",  # path to a demand table; empty uses the fixture demand
    "demand_scale": 1.0,
    "demand_noise": 0.5,
    "param_noise": 0.1,
    "observation_noise": 0.0,  # relative Gaussian noise added to every observation
    "observe_links": 1.0,
    "observe_pt": 1.0,
    "observe_tt": 1.0,
    "eq_max_iterations": 500,
    "eq_tolerance": 1e-3,
    "iterations": 300,
    "lr_demand": 5.0,
    "lr_params": 0.005,
    "optimizer": "adam",
    "equilibrium_iterations": 1,
    "weights": [1.0, 1.0, 1.0],
    "normalize_weights": True,
    "alpha": 0.05,
    "rounds": 3,
}


class UsageError(ValueError):
    pass


# ----------------------------------------------------------------------------
# helpers


def load_config(path, overrides=None) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        given = read_kv(path)
        unknown = set(given) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(given)
    cfg.update(overrides or {})
    return cfg


def config_hash(cfg: dict) -> str:
    text = "\n".join(f"{k}={cfg[k]!r}" for k in sorted(cfg))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def write_manifest(out: Path, cfg: dict, command: str, seed: int) -> None:
    write_kv(out / "manifest.txt", {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "mmjoint": VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    })


def open_network(ref: str):
    if ref in ("nguyen-dupuis", "nd"):
        return fixtures.nguyen_dupuis()
    return load_network(ref)


def truth_params(ref: str) -> ParamVector:
    if ref == "full":
        return ParamVector.full(fixtures.ND_TRUTH_FULL)
    if ref == "simple":
        return ParamVector.from_dict(fixtures.ND_TRUTH_SIMPLE)
    return read_params(ref)


def make_solver(net, cfg):
    eq = EquilibriumConfig(max_iterations=int(cfg["eq_max_iterations"]), tolerance=float(cfg["eq_tolerance"]))
    return EquilibriumSolver(net, eq, LoadingConfig.for_network(net))


def estimation_config(cfg: dict, seed: int) -> EstimationConfig:
    return EstimationConfig(
        weights=tuple(float(w) for w in cfg["weights"]),
        normalize_weights=bool(cfg["normalize_weights"]),
        lr_demand=float(cfg["lr_demand"]),
        lr_params=float(cfg["lr_params"]),
        iterations=int(cfg["iterations"]),
        optimizer=str(cfg["optimizer"]),
        equilibrium_iterations=int(cfg["equilibrium_iterations"]),
        seed=seed,
    )


def noisy_start(truth_q, truth_theta: ParamVector, cfg: dict, rng):
    """Demand scaled by a uniform factor in the noise band (clamped at 0); parameters raised by ``param_noise``."""
    band = float(cfg["demand_noise"])
    if band <= -1:
        raise UsageError("demand_noise must exceed -1")
    q0 = np.maximum(truth_q * rng.uniform(1.0 - band, 1.0 + band, truth_q.shape), 0.0)
    th0 = truth_theta.with_values(truth_theta.values * (1.0 + float(cfg["param_noise"])))
    return q0, th0


def observation_masks(out, cfg, rng):
    n_links, n_int = out.x_c.shape
    link_keep = rng.random(n_links) < float(cfg["observe_links"])
    tt_keep = rng.random(n_links) < float(cfg["observe_tt"])
    pair_keep = rng.random(len(out.pairs)) < float(cfg["observe_pt"])
    return np.repeat(link_keep, n_int), np.repeat(pair_keep, 2), np.repeat(tt_keep, n_int)


# ----------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg) -> int:
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    net = open_network(cfg["network"])
    solver = make_solver(net, cfg)
    n_dep = solver.n_dep
    if cfg["demand"]:
        q = read_demand(cfg["demand"], net, n_dep)
    else:
        q = fixtures.ND_DEMAND[:, :n_dep] * float(cfg["demand_scale"])
        if q.shape != (len(net.od_pairs), n_dep):
            raise UsageError("fixture demand does not fit this network; give a demand table")
    theta = truth_params(cfg["truth"])
    state = solver.solve(q, theta)
    sim = state.dnl
    masks = observation_masks(sim, cfg, rng)
    obs = ObservationSet.from_outputs(sim, *masks)
    sd = float(cfg["observation_noise"])
    if sd > 0:
        obs.link_flow = np.maximum(obs.link_flow * (1 + sd * rng.standard_normal(obs.link_flow.size)), 0.0)
        obs.pt_counts = np.maximum(obs.pt_counts * (1 + sd * rng.standard_normal(obs.pt_counts.size)), 0.0)
        obs.travel_time = obs.travel_time * (1 + sd * rng.standard_normal(obs.travel_time.size))
    q0, th0 = noisy_start(q, theta, cfg, rng)

    (out / "ground_truth").mkdir(parents=True, exist_ok=True)
    (out / "initial").mkdir(parents=True, exist_ok=True)
    write_demand(out / "ground_truth" / "demand.tsv", net, q)
    write_params(out / "ground_truth" / "theta.tsv", theta)
    write_flows(out / "ground_truth" / "flows.tsv", net, state.flows)
    write_convergence_log(state, out / "ground_truth" / "convergence.tsv")
    write_observations(out / "observations", net, obs, sim.pairs, sim.n_intervals)
    write_demand(out / "initial" / "demand.tsv", net, q0)
    write_params(out / "initial" / "theta.tsv", th0)
    write_kv(out / "run.txt", cfg)
    write_manifest(out, cfg, "generate", args.seed)
    print(f"equilibrium: {state.iterations} iterations, gap {state.gaps[-1]:.2e}, converged={state.converged}")
    print(f"observations: {obs.count('flow')} link flows, {obs.count('pt')} boarding/alighting counts, "
          f"{obs.count('tt')} travel times -> {out / 'observations'}")
    return 0


def _read_run(args, cfg_path):
    """Network, run config, observations and starting point from a ``generate`` directory (never its truth)."""
    data = Path(args.data)
    cfg = load_config(None, read_kv(data / "run.txt"))
    if cfg_path:
        cfg.update({k: v for k, v in read_kv(cfg_path).items()})
    net = open_network(cfg["network"])
    solver = make_solver(net, cfg)
    lc = solver.loading
    pairs = solver.loader.pairs
    obs = read_observations(data / "observations", net, pairs, lc.n_intervals)
    q0 = read_demand(data / "initial" / "demand.tsv", net, lc.n_dep)
    th0 = read_params(data / "initial" / "theta.tsv")
    return cfg, net, solver, obs, q0, th0


def _emit_estimate(out: Path, net, res, obs, tests):
    out.mkdir(parents=True, exist_ok=True)
    write_trace(res.trace, out / "trace.csv")
    write_fit_report(res.fit, out / "fit_report.csv")
    write_demand(out / "estimates_q.tsv", net, res.demand)
    write_params(out / "estimates_theta.tsv", res.params)
    write_wald_report(tests, out / "wald_report.csv")
    for comp in COMPONENTS:
        m = obs.mask(comp)
        write_scatter(out / f"scatter_{comp}.csv", obs.values(comp)[m], simulated(res.state.dnl, comp)[m])


def _summary(res, tests):
    print(f"best iteration {res.best_iteration} of {len(res.trace) - 1}")
    for comp, f in res.fit.items():
        print(f"  R2 {comp:4s} {f.r2:.4f}  (n={f.n})")
    print(f"  {'parameter':24s} {'estimate':>10s} {'sign':>5s} {'significant':>12s}")
    for name in res.params.free_names:
        v = res.params.get(name)
        sign = "+" if v > 0 else ("-" if v < 0 else "0")
        print(f"  {name:24s} {v:10.4f} {sign:>5s} {'Y' if tests.significant.get(name) else 'N':>12s}")


def cmd_estimate(args, _cfg) -> int:
    cfg, net, solver, obs, q0, th0 = _read_run(args, args.config)
    ecfg = estimation_config(cfg, args.seed)
    model = Model(solver, ecfg.equilibrium_iterations)
    res = estimate(model, q0, th0, obs, ecfg, callback=_progress(args))
    tests = test_all_components(res.state, model.structure, obs, float(cfg["alpha"]))
    out = Path(args.out)
    _emit_estimate(out, net, res, obs, tests)
    write_manifest(out, cfg, "estimate", args.seed)
    _summary(res, tests)
    return 0


def cmd_select(args, _cfg) -> int:
    cfg, net, solver, obs, q0, th0 = _read_run(args, args.config)
    ecfg = estimation_config(cfg, args.seed)
    model = Model(solver, ecfg.equilibrium_iterations)

    def report(k, res, tests, drop):
        print(f"round {k}: removed {', '.join(drop) if drop else 'nothing'}")

    sel = select_variables(model, q0, th0, obs, float(cfg["alpha"]), int(cfg["rounds"]), ecfg, callback=report)
    out = Path(args.out)
    res = sel.results[-1]
    _emit_estimate(out, net, res, obs, sel.tests)
    write_selection_history(sel.history, out / "selection_history.csv")
    write_manifest(out, cfg, "select", args.seed)
    _summary(res, sel.tests)
    return 0


def cmd_dnl(args, cfg) -> int:
    net = open_network(args.network or cfg["network"])
    lc = LoadingConfig.for_network(net)
    if args.flows:
        f = read_flows(args.flows, net, lc.n_dep)
    else:
        solver = make_solver(net, cfg)
        q = read_demand(args.demand, net, lc.n_dep) if args.demand else fixtures.ND_DEMAND[:, : lc.n_dep]
        theta = truth_params(cfg["truth"])
        empty = solver.loader.run(np.zeros((len(net.paths), lc.n_dep)))
        f = solver.assign(q, theta, empty)[0]
    t0 = time.perf_counter()
    res = load(net, f, lc, record_events=bool(args.trajectory))
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    obs = ObservationSet.from_outputs(res)
    write_observations(out, net, obs, res.pairs, res.n_intervals)
    write_flows(out / "path_flows.tsv", net, f)
    if args.trajectory:
        write_trajectory(res, net, out / "trajectory.tsv")
    write_manifest(out, cfg, "dnl", args.seed)
    print(f"loaded {f.sum():.1f} trips in {elapsed:.3f} s; cars still on the road {res.car_in_network.sum():.3g}, "
          f"passengers still travelling {res.pax_in_network.sum():.3g}")
    return 0


def cmd_validate(args, cfg) -> int:
    net = load_network(args.network, validate_bundle=False) if args.network else open_network(cfg["network"])
    problems = validate(net)
    for p in problems:
        print(p)
    if problems:
        print(f"{len(problems)} problem(s)")
        return 2
    s = enumerate_counts(net)
    print(f"network is valid: {s.links} links, {s.od_pairs} O-D pairs, {s.stop_trip_pairs} (stop, trip) pairs, "
          f"{s.paths_driving + s.paths_transit + s.paths_pnr} paths")
    return 0


def _progress(args):
    if args.quiet:
        return None

    def cb(row):
        if row.iteration % 10 == 0:
            nm = " ".join(f"{k}={v:.4g}" for k, v in row.nmse.items())
            print(f"iter {row.iteration:4d} loss {row.total:.6g} nmse {nm}", flush=True)
    return cb


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmjoint", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration")
    common.add_argument("--out", default="run", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="accepted for compatibility; loading is single-threaded")
    common.add_argument("--quiet", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate ground truth and write synthetic observations")
    for name, text in (("estimate", "estimate demand and parameters from a generate directory"),
                       ("select", "estimate, test and drop insignificant parameters")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", required=True, help="directory written by generate")
    p = sub.add_parser("dnl", parents=[common], help="one network load with optional trajectory dump")
    p.add_argument("--network", help="network bundle directory (default: config network)")
    p.add_argument("--flows", help="path flow table; default assigns demand at empty-network costs")
    p.add_argument("--demand", help="demand table used when --flows is absent")
    p.add_argument("--trajectory", action="store_true", help="write the per-cohort event log")
    p = sub.add_parser("validate", parents=[common], help="check a network bundle")
    p.add_argument("--network", help="network bundle directory")
    return ap


COMMANDS = {"generate": cmd_generate, "estimate": cmd_estimate, "select": cmd_select, "dnl": cmd_dnl,
            "validate": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    stage = args.command
    try:
        cfg = load_config(args.config) if args.command not in ("estimate", "select") else {}
        return COMMANDS[args.command](args, cfg)
    except (EstimationDiverged, EquilibriumError, FloatingPointError) as exc:
        print(f"{stage}: numerical abort: {exc}", file=sys.stderr)
        return 3
    except (NetworkError, UsageError, ArtifactError, ChoiceError, LoadingError, EstimationError, StatsError,
            FileNotFoundError, ValueError) as exc:
        print(f"{stage}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
