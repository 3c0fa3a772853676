import csv

import numpy as np
import pytest
from PIL import Image

from xmoda.errors import LengthMismatch
from xmoda.metrics import CSV_COLUMNS, ResultsTable
from xmoda.report import annotate, compare, emit_report, write_montage


def _table(values):
    return ResultsTable([
        {"case_id": f"c{i}", "dice_vs": v, "dice_cochlea": v, "dice_mean": v, "assd_vs": 1.0, "assd_cochlea": 2.0}
        for i, v in enumerate(values)
    ])


@pytest.mark.parametrize("p,mark", [(1e-5, "****"), (0.01, "*"), (0.05, "n.s."), (0.3, "n.s.")])
def test_annotation_levels(p, mark):
    assert annotate(p) == mark


def test_identical_results_are_not_significant():
    t = _table([0.5, 0.6, 0.7])
    rec = compare(t, t, "dice_mean")
    assert rec["annotation"] == "n.s." and rec["flag"] == "zero_variance"


def test_empty_comparisons_write_csv_only(tmp_path):
    written = emit_report({"a": _table([0.5, 0.7])}, [], tmp_path)
    assert "significance" not in written and not (tmp_path / "significance.csv").exists()
    rows = list(csv.reader((tmp_path / "metrics.csv").open()))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert [r[0] for r in rows[1:]] == ["a/c0", "a/c1", "a/AGG_MEAN", "a/AGG_SD"]
    assert float(rows[3][3]) == pytest.approx(0.6)


def test_significance_block(tmp_path):
    a, b = _table([0.9, 0.8, 0.85, 0.95]), _table([0.5, 0.45, 0.6, 0.52])
    emit_report({"a": a, "b": b}, [("a", "b")], tmp_path)
    rows = list(csv.DictReader((tmp_path / "significance.csv").open()))
    assert [r["metric"] for r in rows] == ["dice_vs", "dice_cochlea", "dice_mean"]
    assert all(r["annotation"] == "*" for r in rows)


def test_report_bytes_deterministic(tmp_path):
    res = {"a": _table([0.1, 0.2, 0.4]), "b": _table([0.3, 0.2, 0.1])}
    emit_report(res, [("a", "b")], tmp_path / "x")
    emit_report(res, [("a", "b")], tmp_path / "y")
    for name in ("metrics.csv", "significance.csv", "summary.json"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


def test_montage_layout(tmp_path):
    rng = np.random.default_rng(0)
    panels = [[rng.uniform(-1, 1, (12, 12)) for _ in range(4)] for _ in range(2)]
    path = write_montage(panels, ["source", "cyclegan", "qsattn", "target"], tmp_path / "m.png", tile=32)
    img = Image.open(path)
    assert img.mode == "L" and img.size == (4 * 32, 16 + 2 * 32)
    # tile (row 1, col 2) carries the scaled panel
    expected = np.clip((panels[1][2] + 1) * 127.5, 0, 255).astype(np.uint8)
    tile = np.asarray(img)[16 + 32: 16 + 64, 64:96]
    assert tile[0, 0] == expected[0, 0]


def test_montage_rejects_ragged_rows(tmp_path):
    with pytest.raises(LengthMismatch):
        write_montage([[np.zeros((2, 2))]], ["a", "b"], tmp_path / "m.png")


def test_emit_report_with_montage(tmp_path):
    m = {"columns": ["a", "b"], "panels": [[np.zeros((4, 4)), np.ones((4, 4))]], "rows": ["case"]}
    written = emit_report({"x": _table([0.5, 0.5])}, [], tmp_path, montage=m)
    assert written["montage"].exists()
