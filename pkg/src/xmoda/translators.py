"""Unpaired S->T translators: a cycle-consistency GAN and a query-selected contrastive GAN.

Both trainers share the same harness: deterministic per-epoch shuffles
derived from the config seed, least-squares adversarial terms, Adam with
linear learning-rate decay over the second half of training, per-epoch
loss histories and resumable :class:`~xmoda.checkpoint.Checkpoint` output.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import (
    Checkpoint,
    load_module,
    module_to_arrays,
    optimizer_from_arrays,
    optimizer_to_arrays,
)
from .errors import DivergenceDetected, EmptyDataset, IncompatibleCheckpoint
from .nets import Generator, NetSpec, PatchDiscriminator, ProjectionHead
from .qsattn import sample_negative_indices
from .rng import mix, torch_seed
from .volume_io import Slice2D, Volume, center_crop_resize, merge_slices, slice_axial

log = logging.getLogger(__name__)

MODELS = ("cyclegan", "qsattn")


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 1
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    lambda_cycle: float = 10.0
    lambda_identity: float = 0.0
    lambda_nce: float = 1.0
    nce_idt: bool = True
    tau: float = 0.07
    nce_layers: tuple[int, ...] = (1, 2)
    nce_negatives: int = 63
    nce_query_fraction: float = 0.25
    nce_mlp_dim: int = 64  # 0 disables the projection head
    image_pool_size: int = 50
    seed: int = 0
    image_size: int = 48
    gen_width: int = 16
    gen_down: int = 2
    gen_resblocks: int = 2
    disc_width: int = 16
    disc_layers: int = 3

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.nce_layers = tuple(self.nce_layers)
        if self.epochs < 0 or self.batch_size < 1 or self.image_size < 1:
            raise ValueError("epochs must be >= 0, batch_size and image_size >= 1")
        if not (self.lr > 0 and self.tau > 0 and 0 < self.nce_query_fraction <= 1):
            raise ValueError("lr, tau and nce_query_fraction must be positive")
        if self.image_pool_size < 0:
            raise ValueError("image_pool_size must be >= 0")
        if self.image_size % (2**self.gen_down):
            raise ValueError(f"image_size must be divisible by {2**self.gen_down}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["nce_layers"] = list(self.nce_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def generator_spec(self) -> NetSpec:
        return NetSpec("generator", self.gen_width, self.gen_down, self.gen_resblocks)

    def discriminator_spec(self) -> NetSpec:
        return NetSpec("discriminator", self.disc_width, n_down=self.disc_layers)


# ---------------------------------------------------------------------------
# history buffer


class ImagePool:
    """Discriminator history buffer.

    Until ``capacity`` images are stored, every pushed image is kept and
    returned.  Afterwards a pushed image is returned as-is with probability
    0.5, otherwise it replaces a uniformly chosen stored image, which is
    returned instead.
    """

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 0:
            raise ValueError("pool capacity must be >= 0")
        self.capacity = capacity
        self.images: list[torch.Tensor] = []
        self.rng = np.random.default_rng(seed)

    def push(self, img: torch.Tensor) -> torch.Tensor:
        if self.capacity == 0:
            return img
        if len(self.images) < self.capacity:
            self.images.append(img.detach().clone())
            return img
        if self.rng.random() < 0.5:
            return img
        j = int(self.rng.integers(self.capacity))
        old = self.images[j]
        self.images[j] = img.detach().clone()
        return old

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.push(img[None]) for img in batch], dim=0)

    def export(self, name: str) -> tuple[dict, dict]:
        arrays = {f"{name}.{i}": im.numpy().astype(np.float32) for i, im in enumerate(self.images)}
        return arrays, {"count": len(self.images), "rng": self.rng.bit_generator.state}

    def restore(self, name: str, arrays: dict, meta: dict):
        self.images = [torch.from_numpy(arrays[f"{name}.{i}"].copy()) for i in range(meta["count"])]
        self.rng.bit_generator.state = meta["rng"]


def image_pool_push(pool: ImagePool, img):
    return pool.push(img)


# ---------------------------------------------------------------------------
# torch loss twins (see xmoda.losses for the float64 references)


def lsgan_loss(d_out: torch.Tensor, target_real: bool) -> torch.Tensor:
    return ((d_out - (1.0 if target_real else 0.0)) ** 2).mean()


def cycle_l1(x_s, fg_xs, x_t, gf_xt) -> torch.Tensor:
    return (fg_xs - x_s).abs().mean() + (gf_xt - x_t).abs().mean()


def attention_select(x: torch.Tensor, k: int):
    """Global attention over (HW, C) features; rows of the k lowest-entropy queries.

    Ties in entropy keep ascending index order (stable sort).
    """
    logits = x @ x.T
    a = torch.softmax(logits, dim=1)
    h = -(torch.where(a > 0, a * torch.log(a.clamp_min(1e-45)), torch.zeros_like(a))).sum(dim=1)
    order = torch.sort(h, stable=True).indices
    idx = order[:k]
    return idx, a[idx]


def nce_from_vectors(q: torch.Tensor, keys: torch.Tensor, neg_idx: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean InfoNCE where anchor j's positive is keys[j] and negatives keys[neg_idx[j]]."""
    pos = (q * keys).sum(dim=1, keepdim=True)
    neg = torch.einsum("kd,knd->kn", q, keys[neg_idx])
    logits = torch.cat([pos, neg], dim=1) / tau
    return F.cross_entropy(logits, torch.zeros(len(q), dtype=torch.long))


def qs_nce_loss(
    feats_src: Sequence[torch.Tensor],
    feats_trans: Sequence[torch.Tensor],
    heads,
    cfg: TrainConfig,
    seed: int,
) -> torch.Tensor:
    """Query-selected PatchNCE averaged over layers and batch items.

    Attention rows are computed once from the (detached) source features and
    routed over both the source and the translated features.
    """
    total = 0.0
    count = 0
    for layer, (fs, ft) in enumerate(zip(feats_src, feats_trans)):
        head = heads[layer] if heads is not None else None
        for b in range(fs.shape[0]):
            xs = fs[b].flatten(1).T.detach()
            xt = ft[b].flatten(1).T
            hw = xs.shape[0]
            k = max(2, int(hw * cfg.nce_query_fraction))
            with torch.no_grad():
                _, rows = attention_select(xs, k)
            att_s = rows @ xs
            att_t = rows @ xt
            if head is not None:
                att_s, att_t = head(att_s), head(att_t)
            keys = F.normalize(att_s, dim=1, eps=1e-12).detach()
            q = F.normalize(att_t, dim=1, eps=1e-12)
            n_neg = min(cfg.nce_negatives, k - 1)
            neg = torch.from_numpy(sample_negative_indices(k, n_neg, mix(seed, layer, b)))
            total = total + nce_from_vectors(q, keys, neg, cfg.tau)
            count += 1
    return total / count


# ---------------------------------------------------------------------------
# harness


def as_slice_array(slices) -> np.ndarray:
    """Stack 2D arrays / Slice2D objects into an (n, H, W) float32 array."""
    arrs = [s.data if isinstance(s, Slice2D) else np.asarray(s) for s in slices]
    if not arrs:
        raise EmptyDataset("dataset is empty")
    return np.stack(arrs).astype(np.float32)


def lr_factor(epoch: int, total: int) -> float:
    """Constant for the first half of training, then linear decay towards 0."""
    n_decay = total // 2
    n_keep = total - n_decay
    return 1.0 - max(0, epoch - n_keep + 1) / float(n_decay + 1)


def _epoch_order(seed: int, epoch: int, n_s: int, n_t: int):
    rng = np.random.default_rng([seed, epoch])
    return rng.permutation(n_s), rng.permutation(n_t)


class _Trainer:
    model = ""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        torch.manual_seed(torch_seed(cfg.seed))
        self.nets: dict[str, torch.nn.Module] = {}
        self.optims: dict[str, torch.optim.Optimizer] = {}
        self.pools: dict[str, ImagePool] = {}
        self.epoch = 0
        self.history: list[dict[str, float]] = []

    def _adam(self, *modules):
        params = [p for m in modules for p in m.parameters()]
        return torch.optim.Adam(params, lr=self.cfg.lr, betas=self.cfg.betas)

    def checkpoint(self) -> Checkpoint:
        params, optim, buffers, state = {}, {}, {}, {"optim": {}, "pools": {}}
        for name, net in self.nets.items():
            params.update(module_to_arrays(name, net))
        for name, opt in self.optims.items():
            arrays, meta = optimizer_to_arrays(name, opt)
            optim.update(arrays)
            state["optim"][name] = meta
        for name, pool in self.pools.items():
            arrays, meta = pool.export(name)
            buffers.update(arrays)
            state["pools"][name] = meta
        return Checkpoint(
            kind=f"translator/{self.model}",
            config={"model": self.model, "train": self.cfg.to_dict(),
                    "generator": self.cfg.generator_spec().to_dict()},
            params=params,
            optim=optim,
            rng_state={"torch": torch.get_rng_state().numpy().copy()},
            buffers=buffers,
            state=state,
            epoch=self.epoch,
            loss_history=copy.deepcopy(self.history),
        )

    def restore(self, ckpt: Checkpoint):
        ckpt.require(f"translator/{self.model}")
        for name, net in self.nets.items():
            load_module(net, ckpt, name)
        for name, opt in self.optims.items():
            optimizer_from_arrays(opt, name, ckpt.optim, ckpt.state["optim"][name])
        for name, pool in self.pools.items():
            pool.restore(name, ckpt.buffers, ckpt.state["pools"][name])
        torch.set_rng_state(torch.from_numpy(ckpt.rng_state["torch"].copy()))
        self.epoch = ckpt.epoch
        self.history = copy.deepcopy(ckpt.loss_history)

    def step(self, x_s: torch.Tensor, x_t: torch.Tensor, epoch: int, it: int) -> dict[str, float]:
        raise NotImplementedError

    def fit(self, slices_s, slices_t) -> Checkpoint:
        cfg = self.cfg
        a_s, a_t = as_slice_array(slices_s), as_slice_array(slices_t)
        if a_s.shape[1:] != (cfg.image_size, cfg.image_size) or a_t.shape[1:] != a_s.shape[1:]:
            raise ValueError(f"slices must be {cfg.image_size}x{cfg.image_size}, got {a_s.shape[1:]} / {a_t.shape[1:]}")
        last_good = self.checkpoint()
        bs = cfg.batch_size
        while self.epoch < cfg.epochs:
            e = self.epoch
            for opt in self.optims.values():
                for g in opt.param_groups:
                    g["lr"] = cfg.lr * lr_factor(e, cfg.epochs)
            order_s, order_t = _epoch_order(cfg.seed, e, len(a_s), len(a_t))
            sums: dict[str, float] = {}
            n_it = math.ceil(len(a_s) / bs)
            for it in range(n_it):
                idx_s = order_s[it * bs : (it + 1) * bs]
                idx_t = order_t[[(it * bs + j) % len(a_t) for j in range(len(idx_s))]]
                x_s = torch.from_numpy(a_s[idx_s])[:, None]
                x_t = torch.from_numpy(a_t[idx_t])[:, None]
                for k, v in self.step(x_s, x_t, e, it).items():
                    sums[k] = sums.get(k, 0.0) + v
            record = {k: v / n_it for k, v in sorted(sums.items())}
            if not all(math.isfinite(v) for v in record.values()):
                raise DivergenceDetected(f"non-finite loss at epoch {e}: {record}", last_good)
            self.history.append(record)
            self.epoch += 1
            log.info("%s epoch %d: %s", self.model, self.epoch, record)
            last_good = self.checkpoint()
        return last_good


class CycleGANTrainer(_Trainer):
    model = "cyclegan"

    def __init__(self, cfg: TrainConfig):
        super().__init__(cfg)
        gspec, dspec = cfg.generator_spec(), cfg.discriminator_spec()
        self.nets = {"G": Generator(gspec), "F": Generator(gspec),
                     "D_S": PatchDiscriminator(dspec), "D_T": PatchDiscriminator(dspec)}
        self.optims = {"opt_G": self._adam(self.nets["G"], self.nets["F"]),
                       "opt_D": self._adam(self.nets["D_S"], self.nets["D_T"])}
        self.pools = {"pool_S": ImagePool(cfg.image_pool_size, mix(cfg.seed, 1)),
                      "pool_T": ImagePool(cfg.image_pool_size, mix(cfg.seed, 2))}

    def step(self, x_s, x_t, epoch, it):
        cfg = self.cfg
        G, Fn, D_S, D_T = (self.nets[k] for k in ("G", "F", "D_S", "D_T"))
        opt_G, opt_D = self.optims["opt_G"], self.optims["opt_D"]

        fake_t = G(x_s)
        rec_s = Fn(fake_t)
        fake_s = Fn(x_t)
        rec_t = G(fake_s)
        for d in (D_S, D_T):
            d.requires_grad_(False)
        adv = lsgan_loss(D_T(fake_t), True) + lsgan_loss(D_S(fake_s), True)
        cyc = cycle_l1(x_s, rec_s, x_t, rec_t)
        loss_g = adv + cfg.lambda_cycle * cyc
        out = {"G_adv": adv.item(), "cycle": cyc.item()}
        if cfg.lambda_identity > 0:
            idt = (G(x_t) - x_t).abs().mean() + (Fn(x_s) - x_s).abs().mean()
            loss_g = loss_g + cfg.lambda_cycle * cfg.lambda_identity * idt
            out["identity"] = idt.item()
        opt_G.zero_grad(set_to_none=True)
        loss_g.backward()
        opt_G.step()

        for d in (D_S, D_T):
            d.requires_grad_(True)
        pooled_t = self.pools["pool_T"].query(fake_t.detach())
        pooled_s = self.pools["pool_S"].query(fake_s.detach())
        loss_dt = 0.5 * (lsgan_loss(D_T(x_t), True) + lsgan_loss(D_T(pooled_t), False))
        loss_ds = 0.5 * (lsgan_loss(D_S(x_s), True) + lsgan_loss(D_S(pooled_s), False))
        opt_D.zero_grad(set_to_none=True)
        (loss_dt + loss_ds).backward()
        opt_D.step()
        out.update(G_total=loss_g.item(), D_S=loss_ds.item(), D_T=loss_dt.item())
        return out


class QSAttnTrainer(_Trainer):
    model = "qsattn"

    def __init__(self, cfg: TrainConfig):
        super().__init__(cfg)
        G = Generator(cfg.generator_spec())
        self.nets = {"G": G, "D": PatchDiscriminator(cfg.discriminator_spec())}
        heads = []
        if cfg.nce_mlp_dim > 0:
            for i, ch in enumerate(G.layer_channels(cfg.nce_layers)):
                self.nets[f"H{i}"] = ProjectionHead(ch, cfg.nce_mlp_dim)
                heads.append(self.nets[f"H{i}"])
        self.heads = heads or None
        self.optims = {"opt_G": self._adam(*(n for k, n in self.nets.items() if k != "D")),
                       "opt_D": self._adam(self.nets["D"])}

    def nce(self, src: torch.Tensor, trans: torch.Tensor, seed: int) -> torch.Tensor:
        G = self.nets["G"]
        layers = self.cfg.nce_layers
        return qs_nce_loss(G.encode(src, layers), G.encode(trans, layers), self.heads, self.cfg, seed)

    def step(self, x_s, x_t, epoch, it):
        cfg = self.cfg
        G, D = self.nets["G"], self.nets["D"]
        opt_G, opt_D = self.optims["opt_G"], self.optims["opt_D"]
        seed = mix(cfg.seed, epoch, it)

        both = torch.cat([x_s, x_t]) if cfg.nce_idt else x_s
        out_all = G(both)
        fake_t = out_all[: len(x_s)]

        D.requires_grad_(False)
        adv = lsgan_loss(D(fake_t), True)
        nce = self.nce(x_s, fake_t, seed)
        out = {"G_adv": adv.item(), "nce": nce.item()}
        if cfg.nce_idt:
            idt_t = out_all[len(x_s):]
            nce_y = self.nce(x_t, idt_t, mix(seed, 1))
            out["nce_idt"] = nce_y.item()
            nce_total = 0.5 * (nce + nce_y)
        else:
            nce_total = nce
        loss_g = adv + cfg.lambda_nce * nce_total
        opt_G.zero_grad(set_to_none=True)
        loss_g.backward()
        opt_G.step()

        D.requires_grad_(True)
        loss_d = 0.5 * (lsgan_loss(D(x_t), True) + lsgan_loss(D(fake_t.detach()), False))
        opt_D.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_D.step()
        out.update(G_total=loss_g.item(), D=loss_d.item())
        return out


_TRAINERS = {"cyclegan": CycleGANTrainer, "qsattn": QSAttnTrainer}


def make_trainer(model: str, cfg: TrainConfig) -> _Trainer:
    if model not in _TRAINERS:
        raise ValueError(f"unknown translator {model!r}; choose from {MODELS}")
    return _TRAINERS[model](cfg)


def _train(model, slices_s, slices_t, cfg, resume):
    if len(slices_s) == 0 or len(slices_t) == 0:
        raise EmptyDataset("both domains need at least one slice")
    trainer = make_trainer(model, cfg)
    if resume is not None:
        trainer.restore(resume)
    return trainer.fit(slices_s, slices_t)


def train_cyclegan(slices_s, slices_t, cfg: TrainConfig, resume: Checkpoint | None = None) -> Checkpoint:
    return _train("cyclegan", slices_s, slices_t, cfg, resume)


def train_qsattn(slices_s, slices_t, cfg: TrainConfig, resume: Checkpoint | None = None) -> Checkpoint:
    return _train("qsattn", slices_s, slices_t, cfg, resume)


# ---------------------------------------------------------------------------
# inference


def load_generator(ckpt: Checkpoint) -> Generator:
    if not ckpt.kind.startswith("translator/"):
        raise IncompatibleCheckpoint(f"not a translator checkpoint: {ckpt.kind!r}")
    try:
        spec = NetSpec(**ckpt.config["generator"])
    except (KeyError, TypeError) as exc:
        raise IncompatibleCheckpoint(f"checkpoint lacks a generator spec: {exc}") from exc
    G = Generator(spec)
    load_module(G, ckpt, "G")
    G.eval()
    return G


def prepare_slices(vol: Volume, image_size: int, crop_hw=None) -> list[Slice2D]:
    """Axial slices centre-cropped (default: full slice) and resized to the model input size."""
    _, h, w = vol.shape
    crop = tuple(crop_hw) if crop_hw else (h, w)
    return [center_crop_resize(s, crop, (image_size, image_size), "linear") for s in slice_axial(vol)]


@torch.no_grad()
def translate_volume(ckpt: Checkpoint, vol: Volume, direction: str = "S->T", crop_hw=None,
                     generator: Generator | None = None) -> Volume:
    """Translate a preprocessed volume slice by slice with the S->T generator."""
    if direction.replace("→", "->") != "S->T":
        raise IncompatibleCheckpoint(f"only S->T translation is stored, got {direction!r}")
    G = generator or load_generator(ckpt)
    image_size = int(ckpt.config["train"]["image_size"])
    slices = prepare_slices(vol, image_size, crop_hw)
    batch = torch.from_numpy(np.stack([s.data for s in slices]).astype(np.float32))[:, None]
    out = G(batch)[:, 0].numpy()
    translated = [
        Slice2D(out[i], s.z_index, s.parent_id, s.parent_shape, s.crop_box) for i, s in enumerate(slices)
    ]
    merged = merge_slices(translated, vol.meta)
    return Volume(np.clip(merged.data, -1.0, 1.0), vol.spacing, vol.origin_id)
