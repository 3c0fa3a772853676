import json

import numpy as np
import pytest

from xmoda.cli import build_parser, main
from xmoda.volume_io import load_mask, load_volume

from test_pipeline import TINY_CFG

PARAMS = json.dumps({"volume_shape": [8, 24, 24], "spacing": [2.0, 1.0, 1.0]})


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["phantom", "--out", str(out), "--seed", "3", "--n-s", "2", "--n-t", "2", "--n-val", "1",
                 "--params", PARAMS]) == 0
    return out, json.loads((out / "manifest.json").read_text())


def _files(data, role, kind):
    out, man = data
    return [str(out / c[kind]) for c in man["cases"] if c["role"] == role]


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--help"])
    text = capsys.readouterr().out
    for cmd in ("phantom", "preprocess", "train-translate", "translate", "train-seg", "predict",
                "ensemble", "self-train", "evaluate", "run-all", "resume", "report"):
        assert cmd in text


def test_preprocess_normalises(data, tmp_path):
    src = _files(data, "source_labeled", "source")[0]
    out = tmp_path / "n.vvol"
    assert main(["preprocess", "--in", src, "--out", str(out), "--spacing", "2", "2", "2"]) == 0
    v = load_volume(out)
    assert v.spacing == (2.0, 2.0, 2.0)
    assert v.data.min() >= -1 and v.data.max() <= 1


def test_translate_segment_evaluate_chain(data, tmp_path, capsys):
    s, t = _files(data, "source_labeled", "source"), _files(data, "target_unlabeled", "target")
    ck = tmp_path / "tr.ckpt"
    assert main(["train-translate", "--model", "cyclegan", "--source", *s, "--target", *t, "--out", str(ck),
                 "--epochs", "1", "--image-size", "24", "--config", '{"gen_width": 8, "disc_width": 8}']) == 0
    fake = tmp_path / "fake.vvol"
    assert main(["translate", "--ckpt", str(ck), "--in", s[0], "--out", str(fake)]) == 0
    assert load_volume(fake).shape == load_volume(s[0]).shape

    seg = tmp_path / "seg.ckpt"
    cfg = '{"patch_size": [8, 16, 16], "iters_per_epoch": 2, "base_width": 4}'
    masks = _files(data, "source_labeled", "mask")
    assert main(["train-seg", "--images", str(fake), s[1], "--masks", *masks, "--mode", "3d",
                 "--epochs", "1", "--config", cfg, "--out", str(seg)]) == 0
    pred = tmp_path / "p.vvol"
    val = _files(data, "validation_paired", "target")[0]
    assert main(["predict", "--ckpt", str(seg), "--in", val, "--out", str(pred)]) == 0
    ens = tmp_path / "e.vvol"
    assert main(["ensemble", "--ckpt", str(seg), str(seg), "--in", val, "--out", str(ens)]) == 0
    assert np.array_equal(load_mask(pred).data, load_mask(ens).data)

    capsys.readouterr()
    gt = _files(data, "validation_paired", "mask")[0]
    csv_out = tmp_path / "m.csv"
    assert main(["evaluate", "--pred", str(pred), "--gt", gt, "--out", str(csv_out)]) == 0
    assert capsys.readouterr().out == csv_out.read_text()
    assert csv_out.read_text().startswith("case_id,")


def test_self_train_command(data, tmp_path):
    s, t = _files(data, "source_labeled", "source"), _files(data, "target_unlabeled", "target")
    cfg = '{"patch_size": [8, 16, 16], "iters_per_epoch": 2, "base_width": 4}'
    out = tmp_path / "st"
    assert main(["self-train", "--images", *s, "--masks", *_files(data, "source_labeled", "mask"), "--unlabeled", *t,
                 "--mode", "3d", "--epochs", "1", "--config", cfg, "--rounds", "1", "--out", str(out)]) == 0
    rounds = json.loads((out / "rounds.json").read_text())["rounds"]
    assert [r["train_size"] for r in rounds] == [2, 4]


def test_domain_error_exit_code(tmp_path, capsys):
    assert main(["predict", "--ckpt", str(tmp_path / "none.ckpt"), "--in", str(tmp_path / "none.vvol"),
                 "--out", str(tmp_path / "o.vvol")]) == 2
    assert "error:" in capsys.readouterr().err


def test_length_mismatch_exit_code(data, tmp_path):
    s = _files(data, "source_labeled", "source")
    assert main(["train-seg", "--images", *s, "--masks", s[0], "--out", str(tmp_path / "x.ckpt")]) == 2


def test_run_all_resume_report(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY_CFG))
    out = tmp_path / "run"
    assert main(["run-all", "--config", str(cfg), "--arms", "cyclegan", "--out", str(out),
                 "--stop-after", "translate"]) == 0
    assert json.loads((out / "manifest.json").read_text())["stages"]["segment"]["status"] == "pending"
    assert main(["resume", "--manifest", str(out / "manifest.json")]) == 0
    assert "cyclegan/round1: mean Dice" in capsys.readouterr().out
    before = (out / "report" / "metrics.csv").read_bytes()
    assert main(["report", "--run", str(out), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "metrics.csv").read_bytes() == before
