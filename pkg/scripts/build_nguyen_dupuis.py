"""Regenerate the packaged Nguyen-Dupuis bundle from the builder in mmjoint.fixtures."""

import argparse
from pathlib import Path

from mmjoint.fixtures import build_nguyen_dupuis
from mmjoint.network import enumerate_counts, load_network, write_network

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "mmjoint" / "data" / "nguyen_dupuis"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = ap.parse_args()
    write_network(build_nguyen_dupuis(), args.out)
    summary = enumerate_counts(load_network(args.out))
    for name, value in vars(summary).items():
        print(f"{name:22s} {value}")


if __name__ == "__main__":
    main()
