"""Result records: JSON lines per run and CSV plot tables."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class ResultRecord:
    iteration: int
    wall_time: float
    metric: float | None = None
    best_value: float | None = None
    queries: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    arm: str = "main"
    seed: int = 0

    def to_dict(self):
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_jsonl(path, records):
    with open(path, "a") as fh:
        for r in records:
            d = r.to_dict() if isinstance(r, ResultRecord) else _plain(r)
            fh.write(json.dumps(d, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_plot_table(path, records, field_name="metric"):
    """CSV of iteration against ``field_name`` with one column per (seed, arm)."""
    cols = {}
    for r in records:
        d = r.to_dict() if isinstance(r, ResultRecord) else r
        key = f"seed{d['seed']}" + ("" if d.get("arm", "main") == "main" else f"_{d['arm']}")
        cols.setdefault(key, {})[d["iteration"]] = d.get(field_name)
    names = sorted(cols)
    iters = sorted({i for c in cols.values() for i in c})
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration"] + names)
        for i in iters:
            row = [i]
            for nme in names:
                v = cols[nme].get(i)
                row.append("" if v is None else "%.17g" % v)
            w.writerow(row)
