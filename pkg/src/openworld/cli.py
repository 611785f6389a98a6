"""Experiment harness: dataset synthesis/ingestion, committee training,
closed-set and open-world runs, report emission, and the labeling server.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, nn, reports
from .architectures import ARCHITECTURES
from .committee import (CommitteeConfig, derive_splits, evaluate, fit_meta,
                        load_bundle, save_bundle, train_committee)
from .data import CropStore, DataError, ingest, partition_cities
from .loop import OpenWorldConfig, run_schedule
from .synth import SynthConfig, generate

log = logging.getLogger("openworld")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv_list(text: str) -> list:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError(f"expected a comma-separated list, got {text!r}")
    return items


def _committee_config(args, seed) -> CommitteeConfig:
    return CommitteeConfig(
        n_members=args.members, architecture=args.arch, epochs=args.epochs,
        seed=seed, lr=args.lr, momentum=args.momentum,
        batch_size=args.batch_size, stack_fraction=args.stack_fraction,
        conv_filters=tuple(int(f) for f in args.filters.split(",")) if args.filters else None,
        dense_width=args.dense_width)


def _config_dict(cfg: CommitteeConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["input_shape"] = list(d["input_shape"])
    if d["conv_filters"] is not None:
        d["conv_filters"] = list(d["conv_filters"])
    return d


def _load_store(path, known=None) -> CropStore:
    store = CropStore.load(path)
    if known:
        missing = [c for c in known if c not in store.label_set]
        if missing:
            raise DataError(f"classes {missing} not present in {path}")
        store = store.filter_labels(known)
    return store


def _add_training_flags(p):
    p.add_argument("--members", type=int, required=True,
                   help="committee size (the experiments use 2, 3, or 5)")
    p.add_argument("--arch", choices=ARCHITECTURES, default="C")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--stack-fraction", type=float, default=0.2)
    p.add_argument("--filters", default=None,
                   help="comma-separated conv filter counts (default 32,64[,64])")
    p.add_argument("--dense-width", type=int, default=250)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args):
    cfg = SynthConfig(classes=tuple(_csv_list(args.classes)),
                      per_class=args.per_class, image_size=args.image_size,
                      seed=args.seed)
    stats = generate(cfg, args.out)
    print(f"wrote {stats['images']} images ({stats['objects']} objects) "
          f"across {stats['cities']} cities to {args.out}")
    return 0


def cmd_ingest(args):
    known = _csv_list(args.classes) if args.classes else None
    if args.out:
        store = ingest(args.data, labels=known, min_crop=args.min_crop)
        store.save(args.out)
        print(f"{args.out}: {len(store)} samples, classes {list(store.label_set)}")
        return 0
    if not (args.train_out and args.test_out):
        raise UsageError("provide either --out or both --train-out and --test-out")
    root = Path(args.data)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    cities = sorted(d.name for d in root.iterdir() if d.is_dir())
    part = partition_cities(cities, args.train_cities, args.test_cities,
                            seed=args.seed)
    train = ingest(args.data, labels=known, min_crop=args.min_crop,
                   cities=part.train_cities)
    test = ingest(args.data, labels=known, min_crop=args.min_crop,
                  cities=part.test_cities)
    train.save(args.train_out)
    test.save(args.test_out)
    print(f"{args.train_out}: {len(train)} samples from {len(part.train_cities)} cities")
    print(f"{args.test_out}: {len(test)} samples from {len(part.test_cities)} cities")
    return 0


def cmd_train(args):
    known = _csv_list(args.known) if args.known else None
    train_store = _load_store(args.train_store, known)
    test_store = _load_store(args.test_store, known or list(train_store.label_set))
    out = Path(args.out)
    rows = []
    first_histories = None
    for run_i in range(args.runs):
        run_seed = args.seed + run_i  # distinct derived seed per repetition
        cfg = _committee_config(args, run_seed)
        committee = train_committee(train_store, cfg)
        meta = fit_meta(committee, committee.stacking_split, l2=cfg.meta_l2)
        result = evaluate(committee, meta, test_store)
        rows.append(result.as_row(run_i))
        if first_histories is None:
            first_histories = committee.histories
        save_bundle(out / f"run_{run_i}", committee, meta, extra={
            "seed": run_seed,
            "config": _config_dict(cfg),
            "known": list(train_store.label_set),
            "train_fingerprint": reports.dataset_fingerprint(args.train_store),
        })
        accs = " ".join(f"m_{i + 1}={a:.3f}" for i, a in
                        enumerate(result.member_accuracies))
        print(f"run {run_i}: {accs} stacked={result.stacked_accuracy:.3f}")
    reports.write_csv(out / "closed_set.csv",
                      reports.closed_set_columns(args.members), rows)
    reports.write_epoch_curves(out, first_histories)
    reports.write_manifest(out / "manifest.json", {
        "command": "train",
        "master_seed": args.seed,
        "runs": args.runs,
        "config": _config_dict(_committee_config(args, args.seed)),
        "known": list(train_store.label_set),
        "dataset_fingerprints": {
            "train": reports.dataset_fingerprint(args.train_store),
            "test": reports.dataset_fingerprint(args.test_store)},
        "artifacts": {"closed_set": "closed_set.csv",
                      "bundles": [f"run_{i}" for i in range(args.runs)]},
        "version": __version__,
    })
    return 0


def cmd_eval(args):
    committee, meta, manifest = load_bundle(args.bundle)
    store = _load_store(args.store, manifest.get("known"))
    result = evaluate(committee, meta, store)
    for i, acc in enumerate(result.member_accuracies):
        print(f"member_{i + 1}: {acc:.6f}")
    print(f"stacked: {result.stacked_accuracy:.6f}")
    if args.per_class:  # extension beyond the tables: per-class breakdown
        from .committee import stacked_posteriors

        post, _ = stacked_posteriors(committee, meta,
                                     store.pixels_array(dtype=np.float32))
        pred = post.argmax(axis=1)
        labels = store.labels_array()
        for cid, name in enumerate(store.label_set):
            mask = labels == cid
            if mask.any():
                acc = float((pred[mask] == cid).mean())
                print(f"class {name}: {acc:.6f} ({int(mask.sum())} samples)")
    return 0


def cmd_openworld(args):
    known = _csv_list(args.known)
    schedule = _csv_list(args.schedule) if args.schedule else []
    train_store = CropStore.load(args.train_store)
    test_store = CropStore.load(args.test_store)
    cfg = _committee_config(args, args.seed)
    ow = OpenWorldConfig(alpha=args.alpha,
                         min_new_class_samples=args.min_new,
                         oracle_mode=args.oracle, noise_rate=args.noise,
                         alpha_mode="percentile" if args.calibrate else "fixed",
                         calibration_percentile=args.percentile)
    result = run_schedule(train_store, test_store, known, schedule, cfg, ow,
                          seed=args.seed)
    out = Path(args.out)
    reports.write_csv(out / "open_world.csv", reports.OPEN_WORLD_COLUMNS,
                      reports.cycle_rows(result.reports))
    reports.write_epoch_curves(out, result.initial_histories)
    save_bundle(out / "bundle", result.committee, result.meta, extra={
        "seed": args.seed, "config": _config_dict(cfg), "known": known,
        "schedule": schedule})
    reports.write_manifest(out / "manifest.json", {
        "command": "openworld",
        "master_seed": args.seed,
        "config": _config_dict(cfg),
        "open_world": {"alpha": args.alpha, "calibrate": bool(args.calibrate),
                       "percentile": args.percentile, "oracle": args.oracle,
                       "noise": args.noise, "min_new": args.min_new,
                       "known": known, "schedule": schedule},
        "dataset_fingerprints": {
            "train": reports.dataset_fingerprint(args.train_store),
            "test": reports.dataset_fingerprint(args.test_store)},
        "artifacts": {"open_world": "open_world.csv", "bundle": "bundle"},
        "version": __version__,
    })
    for r in result.reports:
        post = ("" if r.post_retrain_accuracy is None
                else f" post={r.post_retrain_accuracy:.3f}")
        print(f"cycle {r.cycle}: inject={r.injected_class or '-'} "
              f"closed={r.closed_accuracy:.3f} open={r.open_accuracy:.3f} "
              f"flagged={r.unknowns_flagged} queries={r.oracle_queries}{post}")
    return 0


def cmd_report(args):
    run_dir = Path(args.run_dir)
    manifest = reports.read_manifest(run_dir / "manifest.json")
    out = Path(args.out) if args.out else run_dir / "report"
    bundles = manifest.get("artifacts", {}).get("bundles")
    paths = []
    if bundles:
        for i, bundle in enumerate(bundles):
            _, _, bundle_manifest = load_bundle(run_dir / bundle)
            sub = out / bundle if len(bundles) > 1 else out
            paths += reports.write_epoch_curves(
                sub, bundle_manifest.get("histories", []))
    else:
        _, _, bundle_manifest = load_bundle(run_dir / "bundle")
        paths += reports.write_epoch_curves(out, bundle_manifest.get("histories", []))
    for p in paths:
        print(p)
    return 0


def cmd_serve(args):
    import uvicorn

    from .server import ServeState, create_app

    known = _csv_list(args.known) if args.known else None
    state = ServeState.prepare(
        train_store_path=args.train_store, test_store_path=args.test_store,
        known=known, schedule=_csv_list(args.schedule) if args.schedule else None,
        bundle=args.bundle, config=_committee_config(args, args.seed),
        ow_config=OpenWorldConfig(
            alpha=args.alpha, min_new_class_samples=args.min_new,
            oracle_mode=args.oracle, noise_rate=args.noise,
            alpha_mode="percentile" if args.calibrate else "fixed",
            calibration_percentile=args.percentile),
        seed=args.seed)
    app = create_app(state)
    print(f"serving on http://{args.bind}:{args.port} "
          f"(queue depth {len(state.queue.pending())}, alpha {state.alpha:.4f})")
    uvicorn.run(app, host=args.bind, port=args.port, log_level="warning")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="openworld",
                     description="Open-world CNN committee experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic Cityscapes-layout dataset")
    p.add_argument("--classes", required=True, help="comma-separated class names")
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="parse annotated images into crop stores")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="single-store output path")
    p.add_argument("--train-out")
    p.add_argument("--test-out")
    p.add_argument("--train-cities", type=int, default=15)
    p.add_argument("--test-cities", type=int, default=5)
    p.add_argument("--classes", help="ordered class filter")
    p.add_argument("--min-crop", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a stacked committee (closed set)")
    p.add_argument("--train-store", required=True)
    p.add_argument("--test-store", required=True)
    p.add_argument("--known", help="restrict both stores to these classes")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved committee bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--per-class", action="store_true",
                   help="also print per-class accuracy (extension)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("openworld", help="run the open-world injection schedule")
    p.add_argument("--train-store", required=True)
    p.add_argument("--test-store", required=True)
    p.add_argument("--known", required=True)
    p.add_argument("--schedule", help="comma-separated unseen classes, in order")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--calibrate", action="store_true",
                   help="recalibrate alpha from known-certainty percentile")
    p.add_argument("--percentile", type=float, default=10.0)
    p.add_argument("--oracle", choices=["simulated", "none"], default="simulated")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--min-new", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_openworld)

    p = sub.add_parser("report", help="emit per-epoch accuracy curves from a run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="host the oracle console API over a run")
    p.add_argument("--train-store", required=True)
    p.add_argument("--test-store", required=True)
    p.add_argument("--known")
    p.add_argument("--schedule")
    p.add_argument("--bundle", help="reuse a trained bundle instead of training")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--calibrate", action="store_true")
    p.add_argument("--percentile", type=float, default=10.0)
    p.add_argument("--oracle", choices=["external", "simulated"], default="external")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--min-new", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--bind", default="127.0.0.1")
    _add_training_flags(p)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, reports.SchemaError, nn.FormatError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (nn.ParameterError, nn.DimensionError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except RuntimeError as e:  # TrainingError, MetaFitError, OpenWorldError
        print(f"training error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
