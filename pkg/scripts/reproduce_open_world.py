#!/usr/bin/env python3
"""Open-world schedule experiment: start from cars and people, inject traffic
sign, traffic light, building, vegetation (the Tables 4-7 sequence).

--mode degradation measures accuracy decay with the committee frozen;
--mode oracle runs the full flag/label/retrain loop with the simulated oracle.
"""

import argparse
import subprocess
import sys
import tempfile
from pathlib import Path

CLASSES = "car,person,traffic_sign,traffic_light,building,vegetation"
SCHEDULE = "traffic_sign,traffic_light,building,vegetation"


def sh(*args):
    cmd = [sys.executable, "-m", "openworld.cli", *map(str, args)]
    print("+", " ".join(cmd[2:]))
    subprocess.run(cmd, check=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/open_world")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--per-class", type=int, default=200)
    ap.add_argument("--members", type=int, default=5)
    ap.add_argument("--arch", default="C")
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--mode", choices=["oracle", "degradation"], default="oracle")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        ds = Path(tmp) / "ds"
        sh("synth", "--classes", CLASSES, "--per-class", args.per_class,
           "--seed", args.seed, "--out", ds)
        n_cities = max(args.per_class // 10, 2)
        n_test = max(n_cities // 4, 1)
        sh("ingest", "--data", ds, "--train-out", out / "train.owc",
           "--test-out", out / "test.owc",
           "--train-cities", n_cities - n_test, "--test-cities", n_test,
           "--seed", args.seed)
        sh("openworld", "--train-store", out / "train.owc",
           "--test-store", out / "test.owc",
           "--known", "car,person", "--schedule", SCHEDULE,
           "--members", args.members, "--arch", args.arch,
           "--epochs", args.epochs, "--calibrate",
           "--oracle", "simulated" if args.mode == "oracle" else "none",
           "--seed", args.seed, "--out", out / args.mode)
    print(f"cycle report: {out / args.mode / 'open_world.csv'}")


if __name__ == "__main__":
    main()
