#!/usr/bin/env python3
"""Closed-set committee-size experiment: committee sizes 2/3/5, five runs each,
one CSV per size (the Tables 1-3 layout)."""

import argparse
import subprocess
import sys
import tempfile
from pathlib import Path


def sh(*args):
    cmd = [sys.executable, "-m", "openworld.cli", *map(str, args)]
    print("+", " ".join(cmd[2:]))
    subprocess.run(cmd, check=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/closed_set")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--per-class", type=int, default=500)
    ap.add_argument("--arch", default="C")
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--runs", type=int, default=5)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        ds = Path(tmp) / "ds"
        sh("synth", "--classes", "car,person", "--per-class", args.per_class,
           "--seed", args.seed, "--out", ds)
        n_cities = max(args.per_class // 10, 2)
        n_test = max(n_cities // 5, 1)
        sh("ingest", "--data", ds, "--train-out", out / "train.owc",
           "--test-out", out / "test.owc",
           "--train-cities", n_cities - n_test, "--test-cities", n_test,
           "--seed", args.seed)
        for members in (2, 3, 5):
            sh("train", "--train-store", out / "train.owc",
               "--test-store", out / "test.owc",
               "--members", members, "--arch", args.arch,
               "--epochs", args.epochs, "--runs", args.runs,
               "--seed", args.seed, "--out", out / f"members_{members}")
    print(f"tables under {out}/members_*/closed_set.csv")


if __name__ == "__main__":
    main()
