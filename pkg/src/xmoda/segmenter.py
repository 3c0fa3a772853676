"""Fixed-configuration U-Net segmenter: compound loss, patch training, sliding-window inference."""
from __future__ import annotations

import copy
import itertools
import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_module, module_to_arrays
from .errors import (
    DivergenceDetected,
    EmptyDataset,
    EmptyEnsemble,
    IncompatibleCheckpoint,
    ShapeMismatch,
)
from .losses import LossValue
from .nets import UNet
from .rng import torch_seed
from .volume_io import LabelMask, Volume

log = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5


@dataclass
class SegConfig:
    mode: str = "3d"
    base_width: int = 8
    depth: int = 2
    epochs: int = 10
    lr: float = 3e-3
    patch_size: tuple[int, ...] = (16, 32, 32)
    seed: int = 0
    n_classes: int = 3
    batch_size: int = 2
    iters_per_epoch: int = 25
    fg_fraction: float = 0.5
    augment: bool = True

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if self.mode not in ("2d", "3d"):
            raise ValueError(f"mode must be '2d' or '3d', got {self.mode!r}")
        if len(self.patch_size) != self.dims:
            raise ValueError(f"{self.mode} mode needs a {self.dims}-element patch size, got {self.patch_size}")
        if min(self.base_width, self.depth, self.batch_size, self.iters_per_epoch, self.n_classes) < 1:
            raise ValueError("widths, depth, batch and iteration counts must be positive")
        if self.epochs < 0 or not self.lr > 0:
            raise ValueError("epochs must be >= 0 and lr > 0")
        if any(p % 2**self.depth for p in self.patch_size):
            raise ValueError(f"patch_size {self.patch_size} must be divisible by {2**self.depth}")
        if not 0.5 <= self.fg_fraction <= 1.0:
            raise ValueError("fg_fraction must be in [0.5, 1]")

    @property
    def dims(self) -> int:
        return 2 if self.mode == "2d" else 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SegConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# loss


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def dice_ce_loss(logits, labels) -> LossValue:
    """Soft Dice (mean over foreground classes) plus cross-entropy, with gradient w.r.t. logits.

    ``logits`` is (classes, *spatial), ``labels`` integer (*spatial).
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.shape[1:] != y.shape:
        raise ShapeMismatch(f"logits {z.shape} do not match labels {y.shape}")
    n_cls = z.shape[0]
    n_vox = y.size
    p = _softmax(z)
    onehot = np.stack([(y == c) for c in range(n_cls)]).astype(np.float64)

    ce = -np.sum(onehot * np.log(np.clip(p, 1e-300, None))) / n_vox
    dce = (p - onehot) / n_vox

    fg = range(1, n_cls)
    dice_vals = []
    dL_dp = np.zeros_like(p)
    for c in fg:
        inter = np.sum(p[c] * onehot[c])
        denom = np.sum(p[c]) + np.sum(onehot[c]) + DICE_SMOOTH
        num = 2.0 * inter + DICE_SMOOTH
        dice_vals.append(num / denom)
        dL_dp[c] = -(2.0 * onehot[c] * denom - num) / denom**2 / len(fg)
    dice_term = 1.0 - float(np.mean(dice_vals))
    # softmax Jacobian: dz_k = p_k * (dL/dp_k - sum_c p_c dL/dp_c)
    ddice = p * (dL_dp - np.sum(p * dL_dp, axis=0, keepdims=True))
    value = dice_term + ce
    return LossValue(float(value), {"logits": ddice + dce}, {"dice": dice_term, "ce": float(ce)})


def dice_ce_torch(logits: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batch form of :func:`dice_ce_loss`; Dice sums run over batch and space together."""
    n_cls = logits.shape[1]
    p = torch.softmax(logits, dim=1)
    onehot = F.one_hot(labels.long(), n_cls).movedim(-1, 1).to(p.dtype)
    ce = F.cross_entropy(logits, labels.long())
    axes = [0] + list(range(2, logits.dim()))
    inter = (p * onehot).sum(dim=axes)[1:]
    denom = p.sum(dim=axes)[1:] + onehot.sum(dim=axes)[1:] + DICE_SMOOTH
    dice_term = 1.0 - ((2.0 * inter + DICE_SMOOTH) / denom).mean()
    return dice_term + ce, dice_term, ce


# ---------------------------------------------------------------------------
# patch sampling


def _pad_to(a: np.ndarray, shape, mode: str) -> np.ndarray:
    pad = [(0, max(0, s - n)) for n, s in zip(a.shape, shape)]
    if not any(p[1] for p in pad):
        return a
    return np.pad(a, pad, mode=mode) if mode == "edge" else np.pad(a, pad, mode="constant")


def _volume_patch_shape(cfg: SegConfig) -> tuple[int, int, int]:
    return cfg.patch_size if cfg.dims == 3 else (1, *cfg.patch_size)


class PatchSampler:
    """Deterministic patch sampler with foreground oversampling.

    Within every batch, the first ``ceil(fg_fraction * batch)`` patches are
    centred on a foreground voxel (class chosen uniformly among classes
    present in the case) whenever the chosen case has any foreground.
    """

    def __init__(self, cases, cfg: SegConfig):
        self.cfg = cfg
        self.pshape = _volume_patch_shape(cfg)
        self.images = [_pad_to(v, self.pshape, "edge") for v, _ in cases]
        self.labels = [_pad_to(m, self.pshape, "constant") for _, m in cases]
        self.fg_voxels = [
            {c: np.argwhere(m == c) for c in range(1, cfg.n_classes) if np.any(m == c)} for m in self.labels
        ]

    def batch(self, rng: np.random.Generator):
        cfg = self.cfg
        n_fg = math.ceil(cfg.fg_fraction * cfg.batch_size)
        imgs, labs, has_fg = [], [], []
        for j in range(cfg.batch_size):
            ci = int(rng.integers(len(self.images)))
            img, lab, fg = self.images[ci], self.labels[ci], self.fg_voxels[ci]
            if j < n_fg and fg:
                classes = sorted(fg)
                vox = fg[classes[int(rng.integers(len(classes)))]]
                centre = vox[int(rng.integers(len(vox)))]
                start = [
                    int(np.clip(c - p // 2, 0, n - p)) for c, p, n in zip(centre, self.pshape, img.shape)
                ]
            else:
                start = [int(rng.integers(n - p + 1)) for p, n in zip(self.pshape, img.shape)]
            sl = tuple(slice(s, s + p) for s, p in zip(start, self.pshape))
            pi, pl = img[sl], lab[sl]
            if cfg.augment:
                pi, pl = _augment(pi, pl, rng)
            imgs.append(pi)
            labs.append(pl)
            has_fg.append(bool(np.any(pl > 0)))
        x = np.stack(imgs).astype(np.float32)
        y = np.stack(labs).astype(np.int64)
        if cfg.dims == 2:
            x, y = x[:, 0], y[:, 0]
        return torch.from_numpy(x)[:, None], torch.from_numpy(y), has_fg


def _augment(img: np.ndarray, lab: np.ndarray, rng: np.random.Generator):
    """Mirroring plus intensity perturbations (brightness, contrast, gamma, noise)."""
    for axis in (1, 2):
        if rng.random() < 0.5:
            img, lab = np.flip(img, axis), np.flip(lab, axis)
    img = img.astype(np.float64)
    if rng.random() < 0.5:
        img = img * rng.uniform(0.75, 1.25)
    if rng.random() < 0.5:
        m = img.mean()
        img = (img - m) * rng.uniform(0.75, 1.25) + m
    if rng.random() < 0.3:
        lo, hi = img.min(), img.max()
        if hi > lo:
            img = ((img - lo) / (hi - lo)) ** rng.uniform(0.7, 1.5) * (hi - lo) + lo
    if rng.random() < 0.3:
        img = img + rng.normal(0.0, rng.uniform(0.0, 0.1), img.shape)
    return np.ascontiguousarray(img), np.ascontiguousarray(lab)


# ---------------------------------------------------------------------------
# training


def build_model(cfg: SegConfig) -> UNet:
    return UNet(cfg.dims, 1, cfg.n_classes, cfg.base_width, cfg.depth)


def _as_case_arrays(cases) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for vol, mask in cases:
        v = vol.data if isinstance(vol, Volume) else np.asarray(vol, dtype=np.float32)
        m = mask.data if isinstance(mask, LabelMask) else np.asarray(mask, dtype=np.uint8)
        if v.shape != m.shape:
            raise ShapeMismatch(f"volume {v.shape} and mask {m.shape} differ")
        out.append((v, m))
    return out


def _seg_checkpoint(model: UNet, cfg: SegConfig, epoch: int, history) -> Checkpoint:
    return Checkpoint(
        kind="segmenter",
        config={"seg": cfg.to_dict()},
        params=module_to_arrays("net", model),
        rng_state={"torch": torch.get_rng_state().numpy().copy()},
        epoch=epoch,
        loss_history=copy.deepcopy(history),
    )


def train_segmenter(cases: Sequence, cfg: SegConfig) -> Checkpoint:
    """Train a fresh U-Net on (Volume, LabelMask) pairs."""
    if len(cases) == 0:
        raise EmptyDataset("no training cases")
    arrays = _as_case_arrays(cases)
    torch.manual_seed(torch_seed(cfg.seed))
    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sampler = PatchSampler(arrays, cfg)
    history: list[dict] = []
    last_good = _seg_checkpoint(model, cfg, 0, history)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        for g in opt.param_groups:
            g["lr"] = cfg.lr * (1.0 - epoch / cfg.epochs) ** 0.9
        model.train()
        tot = dice_sum = ce_sum = 0.0
        n_fg = n_patches = 0
        for _ in range(cfg.iters_per_epoch):
            x, y, has_fg = sampler.batch(rng)
            loss, dterm, ce = dice_ce_torch(model(x), y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            tot += loss.item()
            dice_sum += dterm.item()
            ce_sum += ce.item()
            n_fg += sum(has_fg)
            n_patches += len(has_fg)
        n = cfg.iters_per_epoch
        record = {"loss": tot / n, "dice": dice_sum / n, "ce": ce_sum / n, "fg_fraction": n_fg / n_patches}
        if not all(math.isfinite(v) for v in record.values()):
            raise DivergenceDetected(f"non-finite segmentation loss at epoch {epoch}", last_good)
        history.append(record)
        log.info("segmenter %s epoch %d: %s", cfg.mode, epoch + 1, record)
        last_good = _seg_checkpoint(model, cfg, epoch + 1, history)
    return last_good


# ---------------------------------------------------------------------------
# inference


def load_segmenter(ckpt: Checkpoint) -> tuple[UNet, SegConfig]:
    if ckpt.kind != "segmenter":
        raise IncompatibleCheckpoint(f"not a segmenter checkpoint: {ckpt.kind!r}")
    cfg = SegConfig.from_dict(ckpt.config["seg"])
    model = build_model(cfg)
    load_module(model, ckpt, "net")
    model.eval()
    return model, cfg


def window_starts(n: int, p: int) -> list[int]:
    """Window origins along one axis: step p // 2, last window flush with the end."""
    if n <= p:
        return [0]
    step = max(1, p // 2)
    starts = list(range(0, n - p + 1, step))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


@torch.no_grad()
def predict_proba(ckpt: Checkpoint, vol: Volume, model=None) -> np.ndarray:
    """Sliding-window softmax (classes, z, y, x) with 50% overlap and uniform weights."""
    if model is None:
        model, cfg = load_segmenter(ckpt)
    else:
        cfg = SegConfig.from_dict(ckpt.config["seg"])
    pshape = _volume_patch_shape(cfg)
    data = _pad_to(vol.data, pshape, "edge")
    shape = data.shape
    probs = np.zeros((cfg.n_classes, *shape), dtype=np.float64)
    counts = np.zeros(shape, dtype=np.float64)
    if cfg.dims == 3:
        grid = itertools.product(*(window_starts(n, p) for n, p in zip(shape, pshape)))
        for z, y, x in grid:
            sl = (slice(z, z + pshape[0]), slice(y, y + pshape[1]), slice(x, x + pshape[2]))
            inp = torch.from_numpy(np.array(data[sl]))[None, None]
            probs[(slice(None), *sl)] += torch.softmax(model(inp), dim=1)[0].numpy()
            counts[sl] += 1.0
    else:
        ph, pw = pshape[1:]
        for y, x in itertools.product(window_starts(shape[1], ph), window_starts(shape[2], pw)):
            sl = (slice(None), slice(y, y + ph), slice(x, x + pw))
            inp = torch.from_numpy(np.array(data[sl]))[:, None]
            out = torch.softmax(model(inp), dim=1).numpy()  # (z, C, h, w)
            probs[(slice(None), *sl)] += out.transpose(1, 0, 2, 3)
            counts[sl] += 1.0
    probs /= counts[None]
    z, y, x = vol.shape
    return probs[:, :z, :y, :x].astype(np.float32)


def predict(ckpt: Checkpoint, vol: Volume) -> tuple[LabelMask, np.ndarray]:
    """Label mask (argmax, ties to the lower label) and per-voxel max-softmax confidence."""
    probs = predict_proba(ckpt, vol)
    return LabelMask(np.argmax(probs, axis=0), vol.spacing, vol.origin_id), probs.max(axis=0)


def ensemble_proba(ckpts: Sequence[Checkpoint], vol: Volume) -> np.ndarray:
    """Mean of the members' softmax maps, (classes, z, y, x) float64."""
    if len(ckpts) == 0:
        raise EmptyEnsemble("ensemble needs at least one checkpoint")
    n_cls = {SegConfig.from_dict(c.config["seg"]).n_classes for c in ckpts if c.kind == "segmenter"}
    if len(n_cls) > 1:
        raise IncompatibleCheckpoint("ensemble members disagree on the number of classes")
    mean = None
    for c in ckpts:
        p = predict_proba(c, vol).astype(np.float64)
        mean = p if mean is None else mean + p
    return mean / len(ckpts)


def ensemble_predict(ckpts: Sequence[Checkpoint], vol: Volume) -> LabelMask:
    """Average the members' softmax maps, then argmax."""
    return LabelMask(np.argmax(ensemble_proba(ckpts, vol), axis=0), vol.spacing, vol.origin_id)
