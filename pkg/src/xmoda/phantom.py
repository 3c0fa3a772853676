"""Synthetic two-domain phantoms with known VS and cochlea geometry.

Each case is one geometry rendered twice: domain S (contrast-T1-like:
bright tumour, smooth background) and domain T (T2-like: dark tumour,
bright cochleas, textured background under a smooth bias field).  All
randomness comes from :class:`xmoda.rng.SplitMix64` keyed on
``(seed, case_index, stream)`` so a case is reproducible in isolation.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import IoFailure, ShapeTooSmall
from .rng import SplitMix64
from .volume_io import LabelMask, Volume, save_mask, save_volume

VS, COCHLEA = 1, 2

# stream ids
_GEOMETRY, _S_TEXTURE, _T_TEXTURE, _T_BIAS = 1, 2, 3, 4


@dataclass(frozen=True)
class PhantomParams:
    volume_shape: tuple[int, int, int] = (16, 48, 48)
    spacing: tuple[float, float, float] = (1.0, 0.5, 0.5)
    vs_radius_range: tuple[float, float] = (3.0, 4.5)
    cochlea_radius_range: tuple[float, float] = (1.5, 2.0)
    vs_intensity: tuple[float, float] = (0.8, -0.6)  # (domain S, domain T)
    cochlea_intensity: tuple[float, float] = (0.4, 0.8)
    background_intensity: tuple[float, float] = (0.0, 0.1)
    texture_noise_sd: float = 0.12
    bias_field_strength: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("vs_radius_range", "cochlea_radius_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be positive and ordered, got {(lo, hi)}")
        if any(int(n) < 1 for n in self.volume_shape) or any(s <= 0 for s in self.spacing):
            raise ValueError("volume_shape and spacing must be positive")
        object.__setattr__(self, "volume_shape", tuple(int(n) for n in self.volume_shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        for name in ("vs_radius_range", "cochlea_radius_range", "vs_intensity", "cochlea_intensity",
                     "background_intensity"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# geometry layout, in mm relative to the volume centre
_VS_LOBE_AMPLITUDE = 0.15
_COCHLEA_OFFSET_X = 7.5
_COCHLEA_OFFSET_Y = 4.0
_VS_OFFSET_X = 2.0
_VS_OFFSET_Y = -4.5
_JITTER = 0.75
_MARGIN = 0.5


def _extent(params: PhantomParams) -> np.ndarray:
    return np.asarray(params.volume_shape) * np.asarray(params.spacing)


def _check_fits(params: PhantomParams):
    half = _extent(params) / 2.0
    vs_r = params.vs_radius_range[1] * (1 + _VS_LOBE_AMPLITUDE)
    co_r = params.cochlea_radius_range[1]
    need_x = max(_VS_OFFSET_X + _JITTER + vs_r, _COCHLEA_OFFSET_X + _JITTER + co_r) + _MARGIN
    need_y = max(abs(_VS_OFFSET_Y) + _JITTER + vs_r, _COCHLEA_OFFSET_Y + _JITTER + co_r) + _MARGIN
    need_z = max(vs_r, co_r) + _JITTER + _MARGIN
    need = np.array([need_z, need_y, need_x])
    if np.any(half < need):
        raise ShapeTooSmall(
            f"volume extent {tuple(_extent(params))} mm cannot hold the structures; need at least {tuple(2 * need)} mm"
        )
    gap_vs_co = np.hypot(_COCHLEA_OFFSET_X - _VS_OFFSET_X, _COCHLEA_OFFSET_Y - _VS_OFFSET_Y) - 2 * np.sqrt(3) * _JITTER
    if gap_vs_co <= vs_r + co_r:
        raise ShapeTooSmall("structures are too large to stay separated")


def _grid(params: PhantomParams):
    """Physical coordinates (mm) of voxel centres relative to the volume centre."""
    axes = [
        (np.arange(n) + 0.5) * s - n * s / 2.0 for n, s in zip(params.volume_shape, params.spacing)
    ]
    return np.meshgrid(*axes, indexing="ij")


def _largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask)
    if n <= 1:
        return mask
    sizes = ndimage.sum_labels(mask, lab, index=np.arange(1, n + 1))
    return lab == (int(np.argmax(sizes)) + 1)


def _geometry(params: PhantomParams, case_index: int):
    rng = SplitMix64(params.seed, case_index, _GEOMETRY)
    zz, yy, xx = _grid(params)
    side = rng.choice_sign()

    # vestibular schwannoma: lobed ellipsoid next to one cochlea
    c_vs = np.array([
        rng.scalar(-_JITTER, _JITTER),
        _VS_OFFSET_Y + rng.scalar(-_JITTER, _JITTER),
        side * _VS_OFFSET_X + rng.scalar(-_JITTER, _JITTER),
    ])
    radii = rng.uniform(3, *params.vs_radius_range)
    n_lobes = 3 + int(rng.scalar() * 3)
    phase = rng.uniform(2, 0.0, 2 * np.pi)
    dz, dy, dx = zz - c_vs[0], yy - c_vs[1], xx - c_vs[2]
    theta = np.arctan2(dy, dx)
    phi = np.arctan2(dz, np.hypot(dx, dy))
    lobes = 1.0 + _VS_LOBE_AMPLITUDE * np.sin(n_lobes * theta + phase[0]) * np.cos(2 * phi + phase[1])
    rho = np.sqrt((dz / radii[0]) ** 2 + (dy / radii[1]) ** 2 + (dx / radii[2]) ** 2)
    vs = _largest_component(rho <= lobes)

    # bilateral cochleas with a spiral pattern used for texture
    cochleas = []
    spiral = np.zeros(params.volume_shape)
    for s in (-1, 1):
        c = np.array([
            rng.scalar(-_JITTER, _JITTER),
            _COCHLEA_OFFSET_Y + rng.scalar(-_JITTER, _JITTER),
            s * _COCHLEA_OFFSET_X + rng.scalar(-_JITTER, _JITTER),
        ])
        r = rng.scalar(*params.cochlea_radius_range)
        dz, dy, dx = zz - c[0], yy - c[1], xx - c[2]
        dist = np.sqrt(dz**2 + dy**2 + dx**2)
        ball = _largest_component((dist <= r) & ~vs)
        cochleas.append(ball)
        ang = np.arctan2(dy, dx)
        spiral = np.where(ball, np.cos(ang + 2.5 * np.pi * dist / r), spiral)

    mask = np.zeros(params.volume_shape, dtype=np.uint8)
    mask[vs] = VS
    for ball in cochleas:
        mask[ball] = COCHLEA
    return mask, spiral


def _smooth_field(rng: SplitMix64, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.normal(shape), sigma, mode="reflect")
    return f / (np.abs(f).max() + 1e-12)


def generate_case(params: PhantomParams, case_index: int) -> tuple[Volume, Volume, LabelMask]:
    """Render one case: (S-domain volume, T-domain volume, shared label mask)."""
    _check_fits(params)
    mask, spiral = _geometry(params, case_index)
    shape = params.volume_shape
    vs = mask == VS
    co = mask == COCHLEA
    sigma_vox = [2.0 / s for s in params.spacing]  # ~2 mm correlation length

    # domain S: smooth background, bright tumour
    rng_s = SplitMix64(params.seed, case_index, _S_TEXTURE)
    s = np.full(shape, params.background_intensity[0])
    s += 0.05 * _smooth_field(rng_s, shape, sigma_vox)
    s[vs] = params.vs_intensity[0]
    s[co] = params.cochlea_intensity[0] + 0.05 * spiral[co]
    s += 0.02 * rng_s.normal(shape)

    # domain T: high-frequency texture, dark tumour, bright cochleas, bias field
    rng_t = SplitMix64(params.seed, case_index, _T_TEXTURE)
    t = np.full(shape, params.background_intensity[1])
    t += params.texture_noise_sd * ndimage.gaussian_filter(rng_t.normal(shape), 0.6)
    t[vs] = params.vs_intensity[1] + 0.5 * params.texture_noise_sd * rng_t.normal(int(vs.sum()))
    t[co] = params.cochlea_intensity[1] + 0.1 * spiral[co]
    rng_b = SplitMix64(params.seed, case_index, _T_BIAS)
    bias = 1.0 + params.bias_field_strength * _smooth_field(rng_b, shape, [3 * v for v in sigma_vox])
    t *= bias

    cid = f"case_{case_index:04d}"
    return (
        Volume(np.clip(s, -1.0, 1.0), params.spacing, f"{cid}_S"),
        Volume(np.clip(t, -1.0, 1.0), params.spacing, f"{cid}_T"),
        LabelMask(mask, params.spacing, cid),
    )


def generate_dataset(params: PhantomParams, n_train_s: int, n_train_t: int, n_val: int, out_dir) -> dict:
    """Write VVOL files for a full unpaired dataset and return its manifest.

    Case indices: ``[0, n_train_s)`` source-labeled, then ``n_train_t``
    target-unlabeled, then ``n_val`` validation-paired; the training
    roles therefore never share a geometry.
    """
    if min(n_train_s, n_train_t, n_val) < 0:
        raise ValueError("case counts must be non-negative")
    _check_fits(params)
    out = Path(out_dir)
    entries = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        idx = 0
        for role, count in (("source_labeled", n_train_s), ("target_unlabeled", n_train_t),
                            ("validation_paired", n_val)):
            for _ in range(count):
                vs, vt, mask = generate_case(params, idx)
                cid = mask.origin_id
                entry = {"role": role, "case_id": cid, "case_index": idx}
                if role in ("source_labeled", "validation_paired"):
                    save_volume(vs, out / f"{cid}_S.vvol")
                    save_mask(mask, out / f"{cid}_mask.vvol")
                    entry["source"] = f"{cid}_S.vvol"
                    entry["mask"] = f"{cid}_mask.vvol"
                if role in ("target_unlabeled", "validation_paired"):
                    save_volume(vt, out / f"{cid}_T.vvol")
                    entry["target"] = f"{cid}_T.vvol"
                entry["has_mask"] = "mask" in entry
                entries.append(entry)
                idx += 1
        manifest = {"kind": "phantom_dataset", "params": params.to_dict(), "cases": entries}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return manifest


def cases_by_role(manifest: dict, role: str) -> list[dict]:
    return [c for c in manifest["cases"] if c["role"] == role]
