"""Command line interface: ``xmoda <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import XModaError

log = logging.getLogger("xmoda")


def _read_volume(path):
    from .volume_io import load_nifti, load_volume

    p = str(path)
    if p.endswith(".nii") or p.endswith(".nii.gz"):
        return load_nifti(p)[0]
    return load_volume(p)


def _json_arg(text):
    if text is None:
        return {}
    p = Path(text)
    return json.loads(p.read_text()) if p.exists() else json.loads(text)


# ---------------------------------------------------------------------------
# handlers


def cmd_phantom(a):
    from .phantom import PhantomParams, generate_dataset

    params = PhantomParams.from_dict({**_json_arg(a.params), "seed": a.seed})
    man = generate_dataset(params, a.n_s, a.n_t, a.n_val, a.out)
    print(f"wrote {len(man['cases'])} cases to {a.out}")


def cmd_preprocess(a):
    from .volume_io import load_mask, normalize_intensity, resample, save_mask, save_volume

    if a.mask:
        m = load_mask(a.input)
        if a.spacing:
            m = resample(m, a.spacing, "nearest")
        save_mask(m, a.out)
    else:
        v = _read_volume(a.input)
        if a.spacing:
            v = resample(v, a.spacing, "linear")
        save_volume(normalize_intensity(v, a.lo_pct, a.hi_pct), a.out)
    print(a.out)


def cmd_train_translate(a):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .translators import TrainConfig, make_trainer, prepare_slices

    cfg = TrainConfig.from_dict({**_json_arg(a.config), **{k: v for k, v in (
        ("epochs", a.epochs), ("seed", a.seed), ("image_size", a.image_size)) if v is not None}})
    slices = lambda paths: [s.data for p in paths for s in prepare_slices(_read_volume(p), cfg.image_size, a.crop)]
    trainer = make_trainer(a.model, cfg)
    if a.resume:
        trainer.restore(load_checkpoint(a.resume))
    ckpt = trainer.fit(slices(a.source), slices(a.target))
    save_checkpoint(ckpt, a.out)
    print(json.dumps(ckpt.loss_history[-1] if ckpt.loss_history else {}))


def cmd_translate(a):
    from .checkpoint import load_checkpoint
    from .translators import translate_volume
    from .volume_io import save_volume

    vol = translate_volume(load_checkpoint(a.ckpt), _read_volume(a.input), a.direction, crop_hw=a.crop)
    save_volume(vol, a.out)
    print(a.out)


def _seg_config(a):
    from .segmenter import SegConfig

    d = _json_arg(a.config)
    for key in ("mode", "epochs", "seed"):
        if getattr(a, key, None) is not None:
            d[key] = getattr(a, key)
    if "patch_size" not in d and d.get("mode") == "2d":
        d["patch_size"] = [48, 48]
    return SegConfig.from_dict(d)


def _pairs(images, masks):
    from .errors import LengthMismatch
    from .volume_io import load_mask

    if len(images) != len(masks):
        raise LengthMismatch(f"{len(images)} images for {len(masks)} masks")
    return [(_read_volume(i), load_mask(m)) for i, m in zip(images, masks)]


def cmd_train_seg(a):
    from .checkpoint import save_checkpoint
    from .segmenter import train_segmenter

    ckpt = train_segmenter(_pairs(a.images, a.masks), _seg_config(a))
    save_checkpoint(ckpt, a.out)
    print(json.dumps(ckpt.loss_history[-1] if ckpt.loss_history else {}))


def cmd_predict(a):
    from .checkpoint import load_checkpoint
    from .segmenter import predict
    from .volume_io import save_mask

    mask, _ = predict(load_checkpoint(a.ckpt), _read_volume(a.input))
    save_mask(mask, a.out)
    print(a.out)


def cmd_ensemble(a):
    from .checkpoint import load_checkpoint
    from .segmenter import ensemble_predict
    from .volume_io import save_mask

    save_mask(ensemble_predict([load_checkpoint(c) for c in a.ckpt], _read_volume(a.input)), a.out)
    print(a.out)


def cmd_self_train(a):
    from .segmenter import SegConfig
    from .self_training import self_train

    cfgs = [_seg_config(a)]
    if a.ensemble:
        cfgs = [SegConfig.from_dict({**cfgs[0].to_dict(), "mode": "2d", "patch_size": [48, 48]}),
                SegConfig.from_dict({**cfgs[0].to_dict(), "mode": "3d", "patch_size": [16, 32, 32]})]
    _, records = self_train(_pairs(a.images, a.masks), [_read_volume(p) for p in a.unlabeled], cfgs,
                            rounds=a.rounds, confidence_floor=a.confidence_floor, out_dir=a.out)
    print(f"{len(records)} rounds written to {a.out}")


def cmd_evaluate(a):
    from .metrics import evaluate_cases
    from .report import results_csv
    from .volume_io import load_mask

    preds = [load_mask(p) for p in a.pred]
    gts = [load_mask(g) for g in a.gt]
    table = evaluate_cases(preds, gts, case_ids=[Path(g).name.split(".")[0] for g in a.gt])
    text = results_csv({a.name: table})
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text)


def _print_summary(manifest):
    ev = manifest["stages"].get("evaluate", {})
    for name, v in sorted(ev.get("mean_dice", {}).items()):
        print(f"{name}: mean Dice {v:.4f}")


def cmd_run_all(a):
    import os

    from .pipeline import ExperimentConfig, run_pipeline

    if a.out:
        os.environ["XMODA_OUT"] = a.out
    cfg = ExperimentConfig.load(a.config)
    manifest = run_pipeline(cfg, a.arms, stop_after=a.stop_after)
    print(f"run written to {cfg.resolved_root()}")
    _print_summary(manifest)


def cmd_resume(a):
    from .pipeline import resume

    _print_summary(resume(a.manifest, stop_after=a.stop_after))


def cmd_report(a):
    import json as _json

    from .pipeline import ExperimentConfig, _comparisons, _Run, load_results
    from .report import emit_report

    root = Path(a.run)
    manifest = _json.loads((root / "manifest.json").read_text())
    run = _Run(ExperimentConfig.from_dict(manifest["config"]), root, manifest)
    written = emit_report(load_results(root), _comparisons(run), a.out or root / "report")
    for k, p in written.items():
        print(f"{k}: {p}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xmoda", description="Multi-view cross-modality translation and segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate a synthetic two-domain dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-s", type=int, default=8)
    s.add_argument("--n-t", type=int, default=8)
    s.add_argument("--n-val", type=int, default=4)
    s.add_argument("--params", help="JSON text or file with PhantomParams fields")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("preprocess", help="resample and normalise one volume (or resample a mask)")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--spacing", type=float, nargs=3, metavar=("Z", "Y", "X"))
    s.add_argument("--mask", action="store_true", help="input is a label mask (nearest resampling only)")
    s.add_argument("--lo-pct", type=float, default=0.5)
    s.add_argument("--hi-pct", type=float, default=99.5)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train-translate", help="train an unpaired S->T translator")
    s.add_argument("--model", choices=("cyclegan", "qsattn"), required=True)
    s.add_argument("--source", nargs="+", required=True)
    s.add_argument("--target", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--image-size", type=int)
    s.add_argument("--crop", type=int, nargs=2, metavar=("H", "W"))
    s.add_argument("--config", help="JSON text or file with TrainConfig fields")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train_translate)

    s = sub.add_parser("translate", help="translate a volume with a trained generator")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--direction", default="S->T")
    s.add_argument("--crop", type=int, nargs=2, metavar=("H", "W"))
    s.set_defaults(func=cmd_translate)

    def seg_args(s):
        s.add_argument("--images", nargs="+", required=True)
        s.add_argument("--masks", nargs="+", required=True)
        s.add_argument("--mode", choices=("2d", "3d"))
        s.add_argument("--epochs", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--config", help="JSON text or file with SegConfig fields")

    s = sub.add_parser("train-seg", help="train a segmenter")
    seg_args(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_seg)

    s = sub.add_parser("predict", help="segment a volume")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("ensemble", help="segment a volume with averaged softmax of several checkpoints")
    s.add_argument("--ckpt", nargs="+", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("self-train", help="pseudo-label self-training")
    seg_args(s)
    s.add_argument("--unlabeled", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rounds", type=int, default=2)
    s.add_argument("--confidence-floor", type=float, default=0.0)
    s.add_argument("--ensemble", action="store_true", help="train a 2d + 3d member pair")
    s.set_defaults(func=cmd_self_train)

    s = sub.add_parser("evaluate", help="Dice and ASSD of predicted masks against references")
    s.add_argument("--pred", nargs="+", required=True)
    s.add_argument("--gt", nargs="+", required=True)
    s.add_argument("--name", default="eval")
    s.add_argument("--out", help="CSV output path")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run-all", help="run the full experiment from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--arms", nargs="+", choices=("cyclegan", "qsattn", "multiview"))
    s.add_argument("--out", help="output root (same as setting XMODA_OUT)")
    s.add_argument("--stop-after", choices=("phantom", "preprocess", "translate", "segment", "evaluate", "report"))
    s.set_defaults(func=cmd_run_all)

    s = sub.add_parser("resume", help="continue an interrupted run")
    s.add_argument("--manifest", required=True, help="manifest.json or its run directory")
    s.add_argument("--stop-after", choices=("phantom", "preprocess", "translate", "segment", "evaluate", "report"))
    s.set_defaults(func=cmd_resume)

    s = sub.add_parser("report", help="re-emit tables, t-tests and montage of a finished run")
    s.add_argument("--run", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except XModaError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
