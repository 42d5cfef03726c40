"""Writers for protocol results: JSON, CSV tables and SVG figures."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from ._io import atomic_write_text
from .plotting import render_figures


def _csv(rows: list, columns=None) -> str:
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})
    return buf.getvalue()


def write_csv(path, rows: list, columns=None) -> Path:
    atomic_write_text(path, _csv(rows, columns))
    return Path(path)


def write_json(path, obj) -> Path:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return Path(path)


def write_protocol_outputs(result, outdir, provenance: dict) -> list:
    """Write every artifact of ``result`` into ``outdir``.

    ``provenance`` (seed, config hash, inputs) is embedded in ``report.json``.
    Returns the written paths in a fixed order.
    """
    out = Path(outdir)
    paths = [write_json(out / "report.json", {**result.to_dict(), "provenance": provenance})]
    if result.table:
        paths.append(write_csv(out / "table.csv", result.table))
    roc_rows, score_rows, dist_rows = [], [], []
    for name, rep in result.reports.items():
        for f, t, th in zip(rep.roc.fpr, rep.roc.tpr, rep.roc.thresholds):
            roc_rows.append({"method": name, "fpr": float(f), "tpr": float(t),
                             "threshold": float(th)})
        score_rows.extend({"method": name, **row} for row in rep.scores)
        dist_rows.extend({"method": name, **row} for row in rep.detection_by_distance)
    if roc_rows:
        paths.append(write_csv(out / "roc.csv", roc_rows, ["method", "fpr", "tpr", "threshold"]))
        paths.append(write_csv(out / "scores.csv", score_rows))
    if dist_rows:
        paths.append(write_csv(out / "detection_by_distance.csv", dist_rows,
                               ["method", "lo", "hi", "n", "detected", "rate"]))
    paths.extend(render_figures(result, out))
    return paths
