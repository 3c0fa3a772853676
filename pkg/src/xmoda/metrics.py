"""Dice, average symmetric surface distance, and the paired t-test."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyMask, LengthMismatch, ShapeMismatch, TooFewSamples, ZeroVariance
from .volume_io import LabelMask

LABELS = {"vs": 1, "cochlea": 2}
CSV_COLUMNS = ("case_id", "dice_vs", "dice_cochlea", "dice_mean", "assd_vs", "assd_cochlea")
METRIC_COLUMNS = CSV_COLUMNS[1:]
_FACES = ndimage.generate_binary_structure(3, 1)


def _arrays(pred, gt):
    a = pred.data if isinstance(pred, LabelMask) else np.asarray(pred)
    b = gt.data if isinstance(gt, LabelMask) else np.asarray(gt)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(pred, gt, label: int) -> float:
    """2|A and B| / (|A| + |B|); 1.0 when both are empty, 0.0 when only one is."""
    a, b = _arrays(pred, gt)
    a, b = a == label, b == label
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one face neighbour in background (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=_FACES, border_value=0)
    return mask & ~inner


def _mean_surface_distance(src: np.ndarray, dst: np.ndarray, spacing) -> float:
    # exact Euclidean distance from every voxel to the nearest dst-surface voxel
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return float(dist[src].mean())


def assd(pred, gt, label: int, spacing) -> float:
    """Average symmetric surface distance in mm: mean of the two directed mean distances."""
    a, b = _arrays(pred, gt)
    sa, sb = surface(a == label), surface(b == label)
    if not sa.any() or not sb.any():
        raise EmptyMask(f"label {label} is empty in {'prediction' if not sa.any() else 'reference'}")
    sp = tuple(float(s) for s in spacing)
    return 0.5 * (_mean_surface_distance(sa, sb, sp) + _mean_surface_distance(sb, sa, sp))


# ---------------------------------------------------------------------------
# Student t distribution


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def paired_ttest(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test on ``xs - ys``; returns (t, p)."""
    if len(xs) != len(ys):
        raise LengthMismatch(f"{len(xs)} vs {len(ys)} samples")
    n = len(xs)
    if n < 2:
        raise TooFewSamples("a paired t-test needs at least two pairs")
    d = np.asarray(xs, dtype=np.float64) - np.asarray(ys, dtype=np.float64)
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise ZeroVariance("all paired differences are equal")
    t = float(np.mean(d)) * math.sqrt(n) / sd
    return t, t_two_sided_p(t, n - 1)


# ---------------------------------------------------------------------------
# per-case tables


@dataclass
class ResultsTable:
    rows: list[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def aggregate(self) -> tuple[dict, dict]:
        """Mean and sample standard deviation per metric; missing ASSD values are skipped."""
        mean, sd = {"case_id": "AGG_MEAN"}, {"case_id": "AGG_SD"}
        for col in METRIC_COLUMNS:
            v = self.column(col)
            v = v[np.isfinite(v)]
            mean[col] = float(v.mean()) if len(v) else float("nan")
            sd[col] = float(v.std(ddof=1)) if len(v) > 1 else 0.0 if len(v) == 1 else float("nan")
        return mean, sd

    def table1(self) -> dict:
        """Aggregates arranged like the published results table."""
        mean, sd = self.aggregate()
        return {
            "Dice": {k: (mean[f"dice_{c}"], sd[f"dice_{c}"]) for k, c in
                     (("VS", "vs"), ("Cochlea", "cochlea"), ("Mean", "mean"))},
            "ASSD": {k: (mean[f"assd_{c}"], sd[f"assd_{c}"]) for k, c in (("VS", "vs"), ("Cochlea", "cochlea"))},
        }


def case_metrics(pred, gt, spacing, case_id: str = "") -> dict:
    row = {"case_id": case_id}
    for name, label in LABELS.items():
        row[f"dice_{name}"] = dice(pred, gt, label)
        try:
            row[f"assd_{name}"] = assd(pred, gt, label, spacing)
        except EmptyMask:
            row[f"assd_{name}"] = float("nan")
    row["dice_mean"] = 0.5 * (row["dice_vs"] + row["dice_cochlea"])
    return {k: row[k] for k in CSV_COLUMNS}


def evaluate_cases(preds: Sequence, gts: Sequence, spacing=None, case_ids: Sequence[str] | None = None) -> ResultsTable:
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions for {len(gts)} references")
    rows = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        sp = spacing if spacing is not None else g.spacing
        cid = case_ids[i] if case_ids else (getattr(g, "origin_id", "") or f"case_{i:04d}")
        rows.append(case_metrics(p, g, sp, cid))
    return ResultsTable(rows)
