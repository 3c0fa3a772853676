"""Pseudo-label self-training on unlabeled target volumes.

Round 0 trains on the labeled set.  Every later round labels each
unlabeled volume with the previous round's model (or ensemble), sets
low-confidence voxels to background, and retrains from a fresh
initialisation on labeled plus pseudo-labeled cases.  Pseudo-labels of a
round replace those of the previous round.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .errors import EmptyLabeledSet
from .segmenter import SegConfig, ensemble_proba, train_segmenter
from .volume_io import LabelMask, Volume, save_mask

log = logging.getLogger(__name__)


@dataclass
class RoundRecord:
    round: int
    checkpoints: list[str]
    pseudo_labels: list[str] = field(default_factory=list)
    train_size: int = 0
    metrics: dict | None = None
    loss_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "checkpoints": list(self.checkpoints),
            "pseudo_labels": list(self.pseudo_labels),
            "train_size": self.train_size,
            "metrics": self.metrics,
            "loss_history": self.loss_history,
        }


def pseudo_label(ckpts: Sequence[Checkpoint], vol: Volume, confidence_floor: float = 0.0) -> LabelMask:
    """Argmax of the (ensemble) softmax; voxels below ``confidence_floor`` become background."""
    probs = ensemble_proba(ckpts, vol)
    labels = np.argmax(probs, axis=0)
    if confidence_floor > 0:
        labels[probs.max(axis=0) < confidence_floor] = 0
    return LabelMask(labels, vol.spacing, vol.origin_id)


def _train_members(cases, cfgs: Sequence[SegConfig]) -> list[Checkpoint]:
    return [train_segmenter(cases, c) for c in cfgs]


def self_train(
    labeled: Sequence[tuple[Volume, LabelMask]],
    unlabeled: Sequence[Volume],
    cfg: SegConfig | Sequence[SegConfig],
    rounds: int = 2,
    confidence_floor: float = 0.0,
    out_dir=None,
    evaluate=None,
):
    """Train, pseudo-label, retrain.

    ``cfg`` may be a single config or a list of ensemble member configs;
    the return value mirrors it (one checkpoint or a list).  ``evaluate``
    is an optional callable ``list[Checkpoint] -> dict`` whose result is
    stored as each round's metrics snapshot.  With ``out_dir`` set, round
    checkpoints, pseudo-labels and ``rounds.json`` are written there and
    records refer to them by relative path.
    """
    if len(labeled) == 0:
        raise EmptyLabeledSet("self-training needs at least one labeled case")
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    if not 0.0 <= confidence_floor <= 1.0:
        raise ValueError("confidence_floor must lie in [0, 1]")
    single = isinstance(cfg, SegConfig)
    cfgs = [cfg] if single else list(cfg)
    out = Path(out_dir) if out_dir is not None else None

    def store(r: int, ckpts, pseudo) -> RoundRecord:
        ck_refs, pl_refs = [], []
        for m, c in enumerate(ckpts):
            ref = f"round{r}/member{m}_{cfgs[m].mode}.ckpt"
            if out is not None:
                save_checkpoint(c, out / ref)
            ck_refs.append(ref)
        for vol, mask in pseudo:
            ref = f"round{r}/pseudo/{vol.origin_id}_pseudo.vvol"
            if out is not None:
                save_mask(mask, out / ref)
            pl_refs.append(ref)
        return RoundRecord(
            round=r,
            checkpoints=ck_refs,
            pseudo_labels=pl_refs,
            train_size=len(labeled) + len(pseudo),
            metrics=evaluate(ckpts) if evaluate is not None else None,
            loss_history=[c.loss_history for c in ckpts],
        )

    ckpts = _train_members(list(labeled), cfgs)
    records = [store(0, ckpts, [])]
    for r in range(1, rounds + 1):
        pseudo = [(v, pseudo_label(ckpts, v, confidence_floor)) for v in unlabeled]
        log.info("self-training round %d: %d labeled + %d pseudo-labeled", r, len(labeled), len(pseudo))
        ckpts = _train_members(list(labeled) + pseudo, cfgs)
        records.append(store(r, ckpts, pseudo))

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        doc = {"kind": "self_training", "confidence_floor": confidence_floor,
               "rounds": [rec.to_dict() for rec in records]}
        (out / "rounds.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return (ckpts[0] if single else ckpts), records
