"""End-to-end experiment: phantoms, preprocessing, translation, segmentation, evaluation, report.

Every stage writes files below the output root and records their SHA-256
in ``manifest.json``.  A stage is skipped on :func:`resume` when it is
marked done and its artifacts still hash to the recorded values.  All
sub-seeds derive from the master seed through :func:`xmoda.rng.derive_seed`.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigInvalid, HashMismatch, MissingFile
from .metrics import ResultsTable, evaluate_cases
from .phantom import PhantomParams, cases_by_role, generate_dataset
from .report import emit_report
from .rng import derive_seed
from .segmenter import SegConfig, ensemble_predict
from .self_training import self_train
from .translators import MODELS, TrainConfig, make_trainer, prepare_slices, translate_volume
from .volume_io import (
    LabelMask,
    Volume,
    load_mask,
    load_volume,
    normalize_intensity,
    resample,
    save_mask,
    save_volume,
)

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
ARMS = ("cyclegan", "qsattn", "multiview")
STAGES = ("phantom", "preprocess", "translate", "segment", "evaluate", "report")
BUILTIN_CONFIGS = Path(__file__).parent / "configs"
ARM_SOURCES = {"cyclegan": ("cyclegan",), "qsattn": ("qsattn",), "multiview": ("cyclegan", "qsattn")}


@dataclass
class ExperimentConfig:
    """Versioned experiment description; see ``configs/smoke.json`` for the schema."""

    master_seed: int = 0
    out_root: str = "runs/smoke"
    phantom: dict = field(default_factory=dict)
    counts: dict = field(default_factory=lambda: {"train_s": 8, "train_t": 8, "val": 4})
    preprocess: dict = field(default_factory=lambda: {"target_spacing": None, "crop_hw": None,
                                                      "image_size": 48, "lo_pct": 0.5, "hi_pct": 99.5})
    translators: dict = field(default_factory=lambda: {m: {} for m in MODELS})
    segmenter: dict = field(default_factory=lambda: {"members": [{"mode": "2d", "patch_size": [48, 48]},
                                                                 {"mode": "3d"}]})
    self_training: dict = field(default_factory=lambda: {"rounds": 1, "confidence_floor": 0.0})
    evaluation: dict = field(default_factory=lambda: {"montage_cases": 2})
    arms: list = field(default_factory=lambda: list(ARMS))
    workers: int = 1
    config_version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigInvalid(f"unsupported config_version {self.config_version}")
        unknown = set(self.arms) - set(ARMS)
        if unknown or not self.arms:
            raise ConfigInvalid(f"arms must be a non-empty subset of {ARMS}, got {self.arms}")
        if min(self.counts.get(k, -1) for k in ("train_s", "train_t", "val")) < 1:
            raise ConfigInvalid("counts need train_s, train_t and val >= 1")
        if not self.segmenter.get("members"):
            raise ConfigInvalid("segmenter.members must list at least one member")
        try:
            self.phantom_params()
            self.translator_config("cyclegan")
            self.seg_configs()
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from exc

    # -- derived sub-configs -------------------------------------------------

    def phantom_params(self) -> PhantomParams:
        d = dict(self.phantom)
        d.setdefault("seed", derive_seed(self.master_seed, "phantom"))
        return PhantomParams.from_dict(d)

    def translator_config(self, model: str) -> TrainConfig:
        d = dict(self.translators.get(model, {}))
        d.setdefault("seed", derive_seed(self.master_seed, f"translate/{model}"))
        d.setdefault("image_size", self.preprocess.get("image_size", 48))
        return TrainConfig.from_dict(d)

    def seg_configs(self) -> list[SegConfig]:
        out = []
        for i, m in enumerate(self.segmenter["members"]):
            d = dict(m)
            # shared across arms so that arm comparisons are paired on initialisation
            d.setdefault("seed", derive_seed(self.master_seed, f"segment/member{i}"))
            out.append(SegConfig.from_dict(d))
        return out

    # -- serialisation ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "config_version": self.config_version,
            "master_seed": self.master_seed,
            "out_root": self.out_root,
            "phantom": self.phantom,
            "counts": self.counts,
            "preprocess": self.preprocess,
            "translators": self.translators,
            "segmenter": self.segmenter,
            "self_training": self.self_training,
            "evaluation": self.evaluation,
            "arms": list(self.arms),
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigInvalid(f"unknown config keys: {sorted(extra)}")
        if "config_version" not in d:
            raise ConfigInvalid("config_version is required")
        defaults = cls.__dataclass_fields__
        for key in ("preprocess", "self_training", "evaluation", "counts"):
            if key in d:
                base = defaults[key].default_factory()
                base.update(d[key])
                d[key] = base
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        """Read a config file; a bare name such as ``smoke`` selects a bundled config."""
        p = Path(path)
        if not p.exists() and (BUILTIN_CONFIGS / f"{path}.json").exists():
            p = BUILTIN_CONFIGS / f"{path}.json"
        try:
            d = json.loads(p.read_text())
        except FileNotFoundError as exc:
            raise MissingFile(str(path)) from exc
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from exc
        return cls.from_dict(d)

    def resolved_root(self) -> Path:
        return Path(os.environ.get("XMODA_OUT") or self.out_root)


# ---------------------------------------------------------------------------
# manifest helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


class _Run:
    def __init__(self, cfg: ExperimentConfig, root: Path, manifest: dict | None = None):
        self.cfg = cfg
        self.root = root
        self.manifest = manifest or {
            "kind": "xmoda_experiment",
            "config": cfg.to_dict(),
            "stages": {s: {"status": "pending"} for s in STAGES},
        }
        self.timings: dict[str, float] = {}

    @property
    def path(self) -> Path:
        return self.root / "manifest.json"

    def save(self):
        self.root.mkdir(parents=True, exist_ok=True)
        self.path.write_text(_dump(self.manifest))

    def done(self, stage: str) -> bool:
        return self.manifest["stages"][stage]["status"] == "done"

    def verify(self, stage: str):
        for rel, digest in self.manifest["stages"][stage].get("artifacts", {}).items():
            p = self.root / rel
            if not p.exists():
                raise HashMismatch(f"{stage}: artifact {rel} is missing")
            if sha256_file(p) != digest:
                raise HashMismatch(f"{stage}: artifact {rel} does not match its recorded hash")

    def finish(self, stage: str, subdir: str, extra: dict | None = None):
        base = self.root / subdir
        files = sorted(p for p in base.rglob("*") if p.is_file())
        arts = {p.relative_to(self.root).as_posix(): sha256_file(p) for p in files}
        self.manifest["stages"][stage] = {"status": "done", "artifacts": arts, **(extra or {})}
        self.save()


# ---------------------------------------------------------------------------
# stages


def _stage_phantom(run: _Run):
    c = run.cfg.counts
    generate_dataset(run.cfg.phantom_params(), c["train_s"], c["train_t"], c["val"], run.root / "phantom")


def _preprocess_volume(vol: Volume, pp: dict) -> Volume:
    if pp.get("target_spacing"):
        vol = resample(vol, pp["target_spacing"], "linear")
    return normalize_intensity(vol, pp.get("lo_pct", 0.5), pp.get("hi_pct", 99.5))


def _preprocess_mask(mask: LabelMask, pp: dict) -> LabelMask:
    if pp.get("target_spacing"):
        mask = resample(mask, pp["target_spacing"], "nearest")
    return mask


def _stage_preprocess(run: _Run):
    src = run.root / "phantom"
    dst = run.root / "preprocess"
    manifest = json.loads((src / "manifest.json").read_text())
    pp = run.cfg.preprocess
    index = {"source_labeled": [], "target_unlabeled": [], "validation_paired": []}
    for role in index:
        for case in cases_by_role(manifest, role):
            entry = {"case_id": case["case_id"]}
            for key in ("source", "target"):
                if key in case:
                    vol = _preprocess_volume(load_volume(src / case[key]), pp)
                    save_volume(vol, dst / role / case[key])
                    entry[key] = f"{role}/{case[key]}"
            if "mask" in case:
                save_mask(_preprocess_mask(load_mask(src / case["mask"]), pp), dst / role / case["mask"])
                entry["mask"] = f"{role}/{case['mask']}"
            index[role].append(entry)
    (dst / "index.json").write_text(_dump(index))


def _index(run: _Run) -> dict:
    return json.loads((run.root / "preprocess" / "index.json").read_text())


def _load_role(run: _Run, role: str, key: str):
    base = run.root / "preprocess"
    loader = load_mask if key == "mask" else load_volume
    return [loader(base / e[key]) for e in _index(run)[role]]


def _translator_slices(vols, pp):
    return [s.data for v in vols for s in prepare_slices(v, pp.get("image_size", 48), pp.get("crop_hw"))]


def _stage_translate(run: _Run):
    pp = run.cfg.preprocess
    src_vols = _load_role(run, "source_labeled", "source")
    tgt_vols = _load_role(run, "target_unlabeled", "target")
    needed = sorted({m for arm in run.cfg.arms for m in ARM_SOURCES[arm]})
    histories = {}
    for model in needed:
        out = run.root / "translate" / model
        cfg = run.cfg.translator_config(model)
        trainer = make_trainer(model, cfg)
        ckpt = trainer.fit(_translator_slices(src_vols, pp), _translator_slices(tgt_vols, pp))
        save_checkpoint(ckpt, out / "model.ckpt")
        for v in src_vols:
            save_volume(translate_volume(ckpt, v, crop_hw=pp.get("crop_hw")), out / "volumes" / f"{v.origin_id}.vvol")
        histories[model] = ckpt.loss_history
    return {"loss_history": histories}


def _arm_training_set(run: _Run, arm: str):
    masks = _load_role(run, "source_labeled", "mask")
    src_ids = [e["source"].split("/")[-1][: -len(".vvol")] for e in _index(run)["source_labeled"]]
    cases = []
    for model in ARM_SOURCES[arm]:
        d = run.root / "translate" / model / "volumes"
        cases += [(load_volume(d / f"{sid}.vvol"), m) for sid, m in zip(src_ids, masks)]
    return cases


def _segment_arm(args):
    """Train and self-train one arm; module-level so it can run in a worker process."""
    cfg_dict, root, arm = args
    run = _Run(ExperimentConfig.from_dict(cfg_dict), Path(root))
    st = run.cfg.self_training
    labeled = _arm_training_set(run, arm)
    unlabeled = _load_role(run, "target_unlabeled", "target")
    _, records = self_train(labeled, unlabeled, run.cfg.seg_configs(), rounds=int(st.get("rounds", 1)),
                            confidence_floor=float(st.get("confidence_floor", 0.0)),
                            out_dir=run.root / "segment" / arm)
    return arm, {"train_size": [r.train_size for r in records], "n_labeled": len(labeled)}


def _stage_segment(run: _Run):
    jobs = [(run.cfg.to_dict(), str(run.root), arm) for arm in run.cfg.arms]
    if run.cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(run.cfg.workers, len(jobs))) as ex:
            results = list(ex.map(_segment_arm, jobs))
    else:
        results = [_segment_arm(j) for j in jobs]
    return {"arms": dict(results)}


def _round_checkpoints(run: _Run, arm: str, r: int):
    rounds = json.loads((run.root / "segment" / arm / "rounds.json").read_text())["rounds"]
    return [load_checkpoint(run.root / "segment" / arm / ref) for ref in rounds[r]["checkpoints"]]


def _n_rounds(run: _Run, arm: str) -> int:
    return len(json.loads((run.root / "segment" / arm / "rounds.json").read_text())["rounds"])


def _result_names(run: _Run, arm: str) -> list[tuple[str, int]]:
    last = _n_rounds(run, arm) - 1
    names = [(f"{arm}/round0", 0)]
    if last > 0:
        names.append((f"{arm}/round{last}", last))
    return names


def _stage_evaluate(run: _Run):
    vols = _load_role(run, "validation_paired", "target")
    gts = _load_role(run, "validation_paired", "mask")
    ids = [e["case_id"] for e in _index(run)["validation_paired"]]
    out = run.root / "evaluate"
    summary = {}
    for arm in run.cfg.arms:
        for name, r in _result_names(run, arm):
            ckpts = _round_checkpoints(run, arm, r)
            preds = [ensemble_predict(ckpts, v) for v in vols]
            for cid, p in zip(ids, preds):
                save_mask(p, out / name / f"{cid}_pred.vvol")
            table = evaluate_cases(preds, gts, case_ids=ids)
            (out / name / "rows.json").write_text(_dump(table.rows))
            summary[name] = table.aggregate()[0]["dice_mean"]
    return {"mean_dice": summary}


def _load_results(run: _Run) -> dict[str, ResultsTable]:
    results = {}
    for arm in run.cfg.arms:
        for name, _ in _result_names(run, arm):
            rows = json.loads((run.root / "evaluate" / name / "rows.json").read_text())
            results[name] = ResultsTable(rows)
    return results


def _comparisons(run: _Run) -> list[tuple[str, str]]:
    final = {arm: _result_names(run, arm)[-1][0] for arm in run.cfg.arms}
    pairs = []
    arms = [a for a in ARMS if a in run.cfg.arms]
    for i, a in enumerate(arms):
        for b in arms[i + 1:]:
            pairs.append((final[b], final[a]) if b == "multiview" else (final[a], final[b]))
    for arm in arms:
        names = _result_names(run, arm)
        if len(names) > 1:
            pairs.append((names[-1][0], names[0][0]))
    return pairs


def _montage(run: _Run) -> dict:
    n = int(run.cfg.evaluation.get("montage_cases", 2))
    if n <= 0:
        return {}
    src = _load_role(run, "validation_paired", "source")[:n]
    tgt = _load_role(run, "validation_paired", "target")[:n]
    masks = _load_role(run, "validation_paired", "mask")[:n]
    models = sorted({m for arm in run.cfg.arms for m in ARM_SOURCES[arm]})
    ckpts = {m: load_checkpoint(run.root / "translate" / m / "model.ckpt") for m in models}
    panels, labels = [], []
    for s, t, m in zip(src, tgt, masks):
        z = int(np.argmax((m.data == 1).sum(axis=(1, 2))))
        row = [s.data[z]]
        row += [translate_volume(ckpts[k], s, crop_hw=run.cfg.preprocess.get("crop_hw")).data[z] for k in models]
        row.append(t.data[z])
        panels.append(row)
        labels.append(f"{m.origin_id}\nz={z}")
    return {"columns": ["source", *models, "target"], "panels": panels, "rows": labels}


def _stage_report(run: _Run):
    results = _load_results(run)
    emit_report(results, _comparisons(run), run.root / "report", montage=_montage(run))


_STAGE_FUNCS = {
    "phantom": _stage_phantom,
    "preprocess": _stage_preprocess,
    "translate": _stage_translate,
    "segment": _stage_segment,
    "evaluate": _stage_evaluate,
    "report": _stage_report,
}


def _execute(run: _Run, stop_after: str | None = None) -> dict:
    run.save()
    for stage in STAGES:
        if run.done(stage):
            if (run.root / stage).exists():
                run.verify(stage)
                if stage == stop_after:
                    break
                continue
            # a deleted stage directory is rebuilt (with everything downstream)
            log.info("stage %s output removed; rebuilding", stage)
        # anything downstream of a stage being (re)built is stale
        for later in STAGES[STAGES.index(stage) + 1:]:
            run.manifest["stages"][later] = {"status": "pending"}
        run.manifest["stages"][stage] = {"status": "running"}
        run.save()
        shutil.rmtree(run.root / stage, ignore_errors=True)
        t0 = time.perf_counter()
        extra = _STAGE_FUNCS[stage](run) or {}
        run.timings[stage] = time.perf_counter() - t0
        log.info("stage %s finished in %.1f s", stage, run.timings[stage])
        run.finish(stage, stage, extra)
        if stage == stop_after:
            break
    tpath = run.root / "timings.json"
    timings = json.loads(tpath.read_text()) if tpath.exists() else {}
    timings.update({k: round(v, 3) for k, v in run.timings.items()})
    tpath.write_text(_dump(timings))
    return run.manifest


def run_pipeline(cfg: ExperimentConfig, arms: Iterable[str] | None = None, stop_after: str | None = None) -> dict:
    """Run every stage from scratch into the (possibly XMODA_OUT-overridden) output root."""
    if arms is not None:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "arms": [a for a in ARMS if a in set(arms)]})
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigInvalid(f"unknown stage {stop_after!r}")
    root = cfg.resolved_root()
    return _execute(_Run(cfg, root), stop_after)


def resume(manifest_path, stop_after: str | None = None) -> dict:
    """Verify completed stages against their hashes and run the remaining ones."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise MissingFile(str(path))
    manifest = json.loads(path.read_text())
    cfg = ExperimentConfig.from_dict(manifest["config"])
    return _execute(_Run(cfg, path.parent, manifest), stop_after)


def load_results(root) -> dict[str, ResultsTable]:
    """Evaluation tables of a finished run, keyed ``<arm>/round<r>``."""
    manifest = json.loads((Path(root) / "manifest.json").read_text())
    return _load_results(_Run(ExperimentConfig.from_dict(manifest["config"]), Path(root), manifest))
