"""Synthetic recovery on the Nguyen-Dupuis fixture through the command line tools.

Runs ``mmjoint generate`` and ``mmjoint estimate`` (or ``select``) into one
directory, then compares the estimates with the stored ground truth: sign of
every nonzero coefficient and mean absolute demand error.
"""

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from mmjoint.artifacts import read_demand, read_params
from mmjoint.cli import main as cli
from mmjoint.fixtures import nguyen_dupuis
from mmjoint.kv import write_kv


def compare(run: Path, mode: str) -> int:
    net = nguyen_dupuis()
    truth = read_params(run / "data" / "ground_truth" / "theta.tsv").as_dict()
    est = read_params(run / mode / "estimates_theta.tsv").as_dict()
    start = read_params(run / "data" / "initial" / "theta.tsv").as_dict()
    q = read_demand(run / "data" / "ground_truth" / "demand.tsv", net, 4)
    q0 = read_demand(run / "data" / "initial" / "demand.tsv", net, 4)
    qh = read_demand(run / mode / "estimates_q.tsv", net, 4)
    with open(run / mode / "fit_report.csv") as fh:
        fit = {r["component"]: float(r["r2"]) for r in csv.DictReader(fh)}
    print("\nR2: " + ", ".join(f"{k} {v:.4f}" for k, v in fit.items()))
    print(f"mean |demand error|: start {np.abs(q0 - q).mean():.1f}, estimate {np.abs(qh - q).mean():.1f}")
    print(f"\n{'parameter':24s} {'truth':>8s} {'start':>8s} {'estimate':>9s}  sign")
    wrong = 0
    for name, v in truth.items():
        e = est.get(name, 0.0)
        ok = v == 0 or np.sign(e) == np.sign(v)
        wrong += not ok
        print(f"{name:24s} {v:8.3f} {start.get(name, 0.0):8.3f} {e:9.4f}  {'Y' if ok else 'N'}")
    print(f"\nwrong signs: {wrong}")
    return 0 if wrong == 0 else 1


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("recovery"))
    ap.add_argument("--truth", default="full", help="full | simple | parameter table")
    ap.add_argument("--iterations", type=int, default=300)
    ap.add_argument("--demand-noise", type=float, default=0.5)
    ap.add_argument("--param-noise", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--select", action="store_true", help="run backward variable selection instead")
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    cfg = args.out / "run.cfg"
    write_kv(cfg, {"truth": args.truth, "iterations": args.iterations, "demand_noise": args.demand_noise,
                   "param_noise": args.param_noise})
    t0 = time.perf_counter()
    rc = cli(["generate", "--config", str(cfg), "--out", str(args.out / "data"), "--seed", str(args.seed)])
    if rc:
        return rc
    mode = "select" if args.select else "estimate"
    rc = cli([mode, "--data", str(args.out / "data"), "--out", str(args.out / mode), "--seed", str(args.seed)])
    if rc:
        return rc
    print(f"\nwall time {time.perf_counter() - t0:.0f} s")
    return compare(args.out, mode)


if __name__ == "__main__":
    sys.exit(main())
