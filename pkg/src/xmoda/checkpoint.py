"""Checkpoint container shared by translators and segmenters.

On disk a checkpoint is a zip archive (stored, fixed timestamps, so equal
states give equal bytes) holding ``manifest.json`` and one raw
little-endian array per entry under ``arrays/``.  Network parameters are
float32; the manifest records dtype and shape for every array.
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptHeader, IncompatibleCheckpoint, MissingFile

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: dict[str, np.ndarray] = field(default_factory=dict)
    optim: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    state: dict = field(default_factory=dict)  # JSON-able extras (optimizer scalars, pool RNG)
    epoch: int = 0
    loss_history: list[dict[str, float]] = field(default_factory=list)

    def require(self, *kinds: str):
        if self.kind not in kinds:
            raise IncompatibleCheckpoint(f"checkpoint kind {self.kind!r}, expected one of {kinds}")

    def module_params(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        out = {k[len(p):]: torch.from_numpy(v.copy()) for k, v in self.params.items() if k.startswith(p)}
        if not out:
            raise IncompatibleCheckpoint(f"checkpoint holds no parameters for {prefix!r}")
        return out


_GROUPS = ("params", "optim", "rng_state", "buffers")


def _le(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    blobs = {}
    for group in _GROUPS:
        for name in sorted(getattr(ckpt, group)):
            arr = _le(getattr(ckpt, group)[name])
            key = f"{group}/{name}"
            arrays[key] = {"dtype": arr.dtype.str, "shape": list(arr.shape)}
            blobs[key] = np.ascontiguousarray(arr).tobytes()
    manifest = {
        "format": "xmoda-checkpoint",
        "version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "loss_history": ckpt.loss_history,
        "state": ckpt.state,
        "arrays": arrays,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", _EPOCH), json.dumps(manifest, indent=1, sort_keys=True))
        for key in sorted(blobs):
            zf.writestr(zipfile.ZipInfo(f"arrays/{key}", _EPOCH), blobs[key])
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            groups = {g: {} for g in _GROUPS}
            for key, info in manifest["arrays"].items():
                group, name = key.split("/", 1)
                dt = np.dtype(info["dtype"])
                raw = zf.read(f"arrays/{key}")
                if len(raw) != dt.itemsize * math.prod(info["shape"]):
                    raise CorruptHeader(f"{path}: array {key} has the wrong size")
                groups[group][name] = np.frombuffer(raw, dtype=dt).reshape(info["shape"]).copy()
    except (zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise CorruptHeader(f"{path}: {exc}") from exc
    return Checkpoint(
        kind=manifest["kind"],
        config=manifest["config"],
        epoch=manifest["epoch"],
        loss_history=manifest["loss_history"],
        state=manifest["state"],
        **groups,
    )


# ---------------------------------------------------------------------------
# torch <-> arrays


def module_to_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.{k}": v.detach().cpu().numpy().astype(np.float32)
        for k, v in module.state_dict().items()
    }


def load_module(module: torch.nn.Module, ckpt: Checkpoint, prefix: str):
    try:
        module.load_state_dict(ckpt.module_params(prefix))
    except RuntimeError as exc:
        raise IncompatibleCheckpoint(str(exc)) from exc


def optimizer_to_arrays(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], dict]:
    sd = opt.state_dict()
    arrays = {}
    scalars = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            if torch.is_tensor(v) and v.dim() > 0:
                arrays[f"{prefix}.{idx}.{k}"] = v.detach().cpu().numpy().astype(np.float32)
            else:
                scalars[f"{idx}.{k}"] = float(v.item() if torch.is_tensor(v) else v)
    meta = {"param_groups": sd["param_groups"], "scalars": scalars}
    return arrays, meta


def optimizer_from_arrays(opt: torch.optim.Optimizer, prefix: str, arrays: dict, meta: dict):
    state: dict = {}
    p = prefix + "."
    for key, arr in arrays.items():
        if not key.startswith(p):
            continue
        idx, k = key[len(p):].split(".", 1)
        state.setdefault(int(idx), {})[k] = torch.from_numpy(arr.copy())
    for key, val in meta["scalars"].items():
        idx, k = key.split(".", 1)
        state.setdefault(int(idx), {})[k] = torch.tensor(val, dtype=torch.float32)
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
