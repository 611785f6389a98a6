"""Schema-validated CSV reports and the reproducibility manifest.

Every row is validated against its column schema before anything is written;
a malformed row aborts the run rather than emitting a partial report. Float
cells use a fixed 6-decimal format so identical runs yield identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path


class SchemaError(ValueError):
    """A report row does not fit its declared schema."""


OPEN_WORLD_COLUMNS = (
    ("cycle", int),
    ("known_classes", str),
    ("injected_class", str),
    ("closed_accuracy", float),
    ("open_accuracy", float),
    ("unknowns_flagged", int),
    ("false_unknowns", int),
    ("oracle_queries", int),
    ("post_retrain_accuracy", "optional_float"),
)

EPOCH_COLUMNS = (("epoch", int), ("accuracy", float))


def closed_set_columns(n_members: int):
    cols = [("run", int)]
    cols += [(f"m_{i + 1}", float) for i in range(n_members)]
    cols.append(("stacked", float))
    return tuple(cols)


def _format_cell(name, kind, value):
    if kind == "optional_float":
        if value is None or value == "":
            return ""
        kind = float
    if value is None:
        raise SchemaError(f"column {name!r} must not be empty")
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, (int,)):
            raise SchemaError(f"column {name!r} needs an int, got {value!r}")
        return str(value)
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise SchemaError(f"column {name!r} needs a number, got {value!r}")
        v = float(value)
        if not -1e12 < v < 1e12 or v != v:
            raise SchemaError(f"column {name!r} has non-finite value {value!r}")
        return f"{v:.6f}"
    if kind is str:
        if not isinstance(value, str):
            raise SchemaError(f"column {name!r} needs a string, got {value!r}")
        return value
    raise SchemaError(f"unknown column kind {kind!r}")


def write_csv(path, columns, rows):
    """Validate every row against the schema, then write the whole file."""
    names = [c[0] for c in columns]
    rendered = []
    for i, row in enumerate(rows):
        extra = set(row) - set(names)
        missing = [n for n, kind in columns
                   if n not in row and kind != "optional_float"]
        if extra or missing:
            raise SchemaError(f"row {i}: extra columns {sorted(extra)}, "
                              f"missing {missing}")
        rendered.append([_format_cell(n, kind, row.get(n)) for n, kind in columns])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        writer.writerows(rendered)


def cycle_rows(reports):
    rows = []
    for r in reports:
        rows.append({
            "cycle": r.cycle,
            "known_classes": ";".join(r.known_classes),
            "injected_class": r.injected_class,
            "closed_accuracy": r.closed_accuracy,
            "open_accuracy": r.open_accuracy,
            "unknowns_flagged": r.unknowns_flagged,
            "false_unknowns": r.false_unknowns,
            "oracle_queries": r.oracle_queries,
            "post_retrain_accuracy": r.post_retrain_accuracy,
        })
    return rows


def write_epoch_curves(out_dir, histories):
    """epochs_member_{i}.csv per member from per-epoch accuracy lists."""
    paths = []
    for i, history in enumerate(histories):
        rows = [{"epoch": e + 1, "accuracy": acc} for e, acc in enumerate(history)]
        path = Path(out_dir) / f"epochs_member_{i}.csv"
        write_csv(path, EPOCH_COLUMNS, rows)
        paths.append(path)
    return paths


def dataset_fingerprint(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_manifest(path, manifest: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text("utf-8"))
