"""Result tables, significance annotations, and qualitative montages."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import IoFailure, LengthMismatch, TooFewSamples, ZeroVariance
from .metrics import CSV_COLUMNS, ResultsTable, paired_ttest

SIG_LEVELS = ((1e-4, "****"), (0.05, "*"))
COMPARED_METRICS = ("dice_vs", "dice_cochlea", "dice_mean")


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    v = float(v)
    return "nan" if math.isnan(v) else format(v, ".10g")


def annotate(p: float) -> str:
    """'****' for p < 1e-4, '*' for p < 0.05, otherwise 'n.s.'."""
    for level, mark in SIG_LEVELS:
        if p < level:
            return mark
    return "n.s."


def compare(a: ResultsTable, b: ResultsTable, metric: str) -> dict:
    """Paired t-test of one metric between two result tables over shared case order."""
    rec = {"metric": metric, "t": float("nan"), "p": float("nan"), "flag": ""}
    try:
        t, p = paired_ttest(a.column(metric), b.column(metric))
        rec.update(t=t, p=p, annotation=annotate(p))
    except ZeroVariance:
        rec.update(annotation="n.s.", flag="zero_variance")
    except TooFewSamples:
        rec.update(annotation="n.s.", flag="too_few_samples")
    return rec


def results_csv(results: Mapping[str, ResultsTable]) -> str:
    """Per-case rows plus AGG_MEAN / AGG_SD for every result set, case ids prefixed by its name."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for name in results:
        table = results[name]
        for row in [*table.rows, *table.aggregate()]:
            w.writerow([f"{name}/{row['case_id']}"] + [_fmt(row[c]) for c in CSV_COLUMNS[1:]])
    return buf.getvalue()


def write_montage(panels: Sequence[Sequence[np.ndarray]], columns: Sequence[str], path, tile: int = 96,
                  row_labels: Sequence[str] | None = None) -> Path:
    """Grayscale grid: one row per case, one labeled column per panel; values in [-1, 1]."""
    if any(len(r) != len(columns) for r in panels):
        raise LengthMismatch("every montage row needs one panel per column")
    header = 16
    left = 64 if row_labels else 0
    img = Image.new("L", (left + tile * len(columns), header + tile * len(panels)), 0)
    draw = ImageDraw.Draw(img)
    for c, name in enumerate(columns):
        draw.text((left + c * tile + 2, 2), str(name), fill=255)
    for r, row in enumerate(panels):
        if row_labels:
            draw.multiline_text((2, header + r * tile + 2), str(row_labels[r]), fill=255)
        for c, arr in enumerate(row):
            a = np.clip((np.asarray(arr, dtype=np.float64) + 1.0) * 127.5, 0, 255).astype(np.uint8)
            im = Image.fromarray(a, mode="L").resize((tile, tile), Image.NEAREST)
            img.paste(im, (left + c * tile, header + r * tile))
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        img.save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return path


def emit_report(
    results: Mapping[str, ResultsTable],
    comparisons: Sequence[tuple[str, str]],
    out_dir,
    montage: dict | None = None,
) -> dict[str, Path]:
    """Write ``metrics.csv``, ``significance.csv`` (if comparisons) and ``montage.png`` (if panels).

    ``montage`` takes ``{"columns": [...], "panels": [[...], ...], "rows": [...]}``.
    Returns the paths written, keyed by role.
    """
    out = Path(out_dir)
    written: dict[str, Path] = {}
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(results_csv(results))
        written["metrics"] = out / "metrics.csv"
        if comparisons:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(("a", "b", "metric", "t", "p", "annotation", "flag"))
            summary = []
            for a, b in comparisons:
                for metric in COMPARED_METRICS:
                    rec = compare(results[a], results[b], metric)
                    w.writerow((a, b, metric, _fmt(rec["t"]), _fmt(rec["p"]), rec["annotation"], rec["flag"]))
                    summary.append({"a": a, "b": b, **rec})
            (out / "significance.csv").write_text(buf.getvalue())
            written["significance"] = out / "significance.csv"
        tables = {name: t.table1() for name, t in results.items()}
        (out / "summary.json").write_text(json.dumps(tables, indent=1, sort_keys=True, default=_fmt) + "\n")
        written["summary"] = out / "summary.json"
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if montage and montage.get("panels"):
        written["montage"] = write_montage(montage["panels"], montage["columns"], out / "montage.png",
                                           row_labels=montage.get("rows"))
    return written
