#!/usr/bin/env python3
"""Reproduce the bundled two-regime experiment: four consumption-curve CSVs
plus a summary of the qualitative checks."""

import argparse
import json

from rsmerton.cli import reproduce_fig1


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="fig1_out")
    p.add_argument("--grid", type=int, default=2048)
    p.add_argument("--seed", type=int, default=None)
    args = p.parse_args()
    summary = reproduce_fig1(args.out, seed=args.seed, grid=args.grid)
    print(json.dumps(summary, indent=2))
    return 0 if all(summary["checks"].values()) else 1


if __name__ == "__main__":
    raise SystemExit(main())
