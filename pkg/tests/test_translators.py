import numpy as np
import pytest
import torch

from xmoda.checkpoint import load_checkpoint, save_checkpoint
from xmoda.errors import DivergenceDetected, EmptyDataset, IncompatibleCheckpoint
from xmoda.phantom import generate_case
from xmoda.segmenter import SegConfig, train_segmenter
from xmoda.translators import (
    ImagePool,
    TrainConfig,
    image_pool_push,
    lr_factor,
    make_trainer,
    prepare_slices,
    train_cyclegan,
    train_qsattn,
    translate_volume,
)
from xmoda.volume_io import Volume, normalize_intensity

from conftest import TINY

SMALL = dict(image_size=24, gen_width=8, disc_width=8, nce_negatives=15)


def _slices(cases, domain, size=24, n=None):
    out = [s.data for c in cases for s in prepare_slices(c[domain], size)]
    return out[:n] if n else out


@pytest.fixture(scope="module")
def domains(tiny_cases):
    return _slices(tiny_cases[:2], 0), _slices(tiny_cases[2:4], 1)


# ---------------------------------------------------------------------------
# image pool


def test_pool_capacity_zero():
    pool = ImagePool(0, seed=1)
    x = torch.randn(1, 1, 2, 2)
    assert all(image_pool_push(pool, x) is x for _ in range(10))


def test_pool_fill_phase():
    pool = ImagePool(5, seed=1)
    imgs = [torch.full((1, 1, 2, 2), float(i)) for i in range(5)]
    assert all(pool.push(im) is im for im in imgs)
    assert len(pool.images) == 5


def test_pool_monte_carlo_half():
    pool = ImagePool(10, seed=3)
    for i in range(10):
        pool.push(torch.full((1,), float(i)))
    n = 1000
    own = sum(pool.push(torch.full((1,), 100.0 + i)).item() == 100.0 + i for i in range(n))
    assert abs(own - n / 2) <= 3 * np.sqrt(n * 0.25)


def test_pool_export_restore():
    a = ImagePool(3, seed=5)
    for i in range(6):
        a.push(torch.full((1, 1, 1), float(i)))
    arrays, meta = a.export("p")
    b = ImagePool(3, seed=0)
    b.restore("p", arrays, meta)
    for i in range(10):
        x = torch.full((1, 1, 1), 50.0 + i)
        assert a.push(x).item() == b.push(x).item()


def test_lr_schedule():
    assert [lr_factor(e, 4) for e in range(4)] == [1.0, 1.0, pytest.approx(2 / 3), pytest.approx(1 / 3)]
    assert lr_factor(0, 1) == 1.0


# ---------------------------------------------------------------------------
# training harness


@pytest.mark.parametrize("train", [train_cyclegan, train_qsattn])
def test_zero_epochs_is_initialisation(train, domains):
    ck = train(*domains, TrainConfig(epochs=0, **SMALL))
    assert ck.epoch == 0 and ck.loss_history == []
    again = train(*domains, TrainConfig(epochs=0, **SMALL))
    assert all(np.array_equal(ck.params[k], again.params[k]) for k in ck.params)


@pytest.mark.parametrize("train", [train_cyclegan, train_qsattn])
def test_empty_dataset(train, domains):
    with pytest.raises(EmptyDataset):
        train([], domains[1], TrainConfig(epochs=1, **SMALL))


@pytest.mark.parametrize("model", ["cyclegan", "qsattn"])
def test_determinism_and_resume(model, domains, tmp_path):
    s, t = domains[0][:6], domains[1][:6]
    cfg = TrainConfig(epochs=2, **SMALL)
    full = make_trainer(model, cfg).fit(s, t)
    again = make_trainer(model, cfg).fit(s, t)
    assert full.loss_history == again.loss_history and len(full.loss_history) == 2
    assert all(np.isfinite(v) for rec in full.loss_history for v in rec.values())

    # stop after one epoch, round-trip through disk, continue
    half = make_trainer(model, TrainConfig(**{**cfg.to_dict(), "epochs": 1})).fit(s, t)
    save_checkpoint(half, tmp_path / "half.ckpt")
    trainer = make_trainer(model, cfg)
    trainer.restore(load_checkpoint(tmp_path / "half.ckpt"))
    resumed = trainer.fit(s, t)
    assert resumed.loss_history == full.loss_history
    assert all(np.array_equal(resumed.params[k], full.params[k]) for k in full.params)


def test_history_keys(domains):
    s, t = domains[0][:2], domains[1][:2]
    cg = train_cyclegan(s, t, TrainConfig(epochs=1, **SMALL))
    assert set(cg.loss_history[0]) == {"G_adv", "cycle", "G_total", "D_S", "D_T"}
    qs = train_qsattn(s, t, TrainConfig(epochs=1, **SMALL))
    assert set(qs.loss_history[0]) == {"G_adv", "nce", "nce_idt", "G_total", "D"}


def test_divergence_keeps_last_finite(domains, monkeypatch):
    s, t = domains[0][:2], domains[1][:2]
    trainer = make_trainer("cyclegan", TrainConfig(epochs=2, **SMALL))
    real_step = trainer.step

    def step(x_s, x_t, epoch, it):
        out = real_step(x_s, x_t, epoch, it)
        return {**out, "cycle": float("nan")} if epoch == 1 else out

    monkeypatch.setattr(trainer, "step", step)
    with pytest.raises(DivergenceDetected) as info:
        trainer.fit(s, t)
    assert info.value.checkpoint.epoch == 1 and len(info.value.checkpoint.loss_history) == 1


def _trend(model, key):
    wins = 0
    for seed in range(3):
        s = [x.data for i in range(2) for x in prepare_slices(normalize_intensity(generate_case(TINY, i)[0]), 32)][:8]
        t = [x.data for i in range(2, 4) for x in prepare_slices(normalize_intensity(generate_case(TINY, i)[1]), 32)][:8]
        cfg = TrainConfig(epochs=2, seed=seed, image_size=32)
        h = make_trainer(model, cfg).fit(s, t).loss_history
        wins += h[1][key] < h[0][key]
    return wins


def test_cycle_loss_trend():
    assert _trend("cyclegan", "cycle") >= 2


def test_nce_trend():
    assert _trend("qsattn", "nce") >= 2


# ---------------------------------------------------------------------------
# translation


@pytest.mark.parametrize("model", ["cyclegan", "qsattn"])
def test_translate_volume_contract(model, tiny_cases, domains):
    ck = make_trainer(model, TrainConfig(epochs=0, **SMALL)).checkpoint()
    vol = tiny_cases[0][0]
    a = translate_volume(ck, vol)
    b = translate_volume(ck, vol)
    assert np.array_equal(a.data, b.data)
    assert a.shape == vol.shape and a.spacing == vol.spacing and a.origin_id == vol.origin_id
    assert np.all(np.isfinite(a.data)) and a.data.min() >= -1 and a.data.max() <= 1


def test_translate_with_crop(tiny_cases):
    ck = make_trainer("cyclegan", TrainConfig(epochs=0, **SMALL)).checkpoint()
    vol = tiny_cases[0][0]
    out = translate_volume(ck, vol, crop_hw=(16, 16))
    assert out.shape == vol.shape
    assert np.all(out.data[:, :4, :] == 0) and np.all(out.data[:, :, :4] == 0)


def test_multiview_sets_share_geometry(tiny_cases):
    vols = [c[0] for c in tiny_cases[:2]]
    outs = {m: [translate_volume(make_trainer(m, TrainConfig(epochs=0, **SMALL)).checkpoint(), v) for v in vols]
            for m in ("cyclegan", "qsattn")}
    assert len(outs["cyclegan"]) == len(outs["qsattn"])
    for a, b in zip(outs["cyclegan"], outs["qsattn"]):
        assert a.shape == b.shape and a.spacing == b.spacing


def test_translate_rejects_other_checkpoints(tiny_cases):
    _, t, m = tiny_cases[0]
    seg = train_segmenter([(t, m)], SegConfig(epochs=0, patch_size=(8, 16, 16)))
    with pytest.raises(IncompatibleCheckpoint):
        translate_volume(seg, t)
    ck = make_trainer("cyclegan", TrainConfig(epochs=0, **SMALL)).checkpoint()
    with pytest.raises(IncompatibleCheckpoint):
        translate_volume(ck, t, direction="T->S")


def test_config_roundtrip_and_validation():
    cfg = TrainConfig(**SMALL)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig(image_size=30)
