"""Volume containers, the VVOL file format, and slice-level preprocessing.

Arrays are indexed (z, y, x); spacing is in millimetres in the same order.
A VVOL volume is two files: a UTF-8 JSON header ``<name>.vvol`` and a raw
little-endian payload ``<name>.raw`` (float32 for images, uint8 for masks)
laid out z-major, then y, then x.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    CorruptHeader,
    CropTooLarge,
    DuplicateSlice,
    InvalidSpacing,
    MissingFile,
    MissingSlice,
    MixedParents,
    NonFiniteData,
    ShapeMismatch,
)

#: Voxel size used by the original pipeline, (z, y, x) in mm.
PAPER_SPACING = (1.5, 0.41, 0.41)
PAPER_IMAGE_SIZE = 256

VVOL_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _as_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(math.isfinite(s) and s > 0 for s in sp):
        raise InvalidSpacing(f"spacing must be three positive numbers, got {spacing!r}")
    return sp


@dataclass(frozen=True)
class VolumeMeta:
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin_id: str


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float]
    origin_id: str = ""

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeMismatch(f"volume data must be 3D and non-empty, got {data.shape}")
        if not np.isfinite(data).all():
            raise NonFiniteData("volume contains NaN or infinite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def meta(self) -> VolumeMeta:
        return VolumeMeta(self.shape, self.spacing, self.origin_id)


@dataclass(frozen=True, eq=False)
class LabelMask:
    data: np.ndarray
    spacing: tuple[float, float, float]
    origin_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeMismatch(f"mask must be 3D, got {data.shape}")
        if data.dtype.kind == "f" and not np.all(np.mod(data, 1) == 0):
            raise ValueError("mask holds non-integer values")
        data = np.ascontiguousarray(data, dtype=np.uint8)
        if not np.isin(data, (0, 1, 2)).all():
            raise ValueError("mask labels must be in {0, 1, 2}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True, eq=False)
class Slice2D:
    data: np.ndarray
    z_index: int
    parent_id: str
    parent_shape: tuple[int, int, int]
    crop_box: tuple[int, int, int, int]  # y0, x0, h, w in parent-slice pixels

    def __post_init__(self):
        if not 0 <= self.z_index < self.parent_shape[0]:
            raise ValueError(f"z_index {self.z_index} outside parent depth {self.parent_shape[0]}")
        y0, x0, h, w = self.crop_box
        if y0 < 0 or x0 < 0 or h < 1 or w < 1 or y0 + h > self.parent_shape[1] or x0 + w > self.parent_shape[2]:
            raise ValueError(f"crop_box {self.crop_box} outside parent slice {self.parent_shape[1:]}")


# ---------------------------------------------------------------------------
# file format


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix == ".raw":
        p = p.with_suffix(".vvol")
    elif p.suffix != ".vvol":
        p = p.with_name(p.name + ".vvol")
    return p, p.with_suffix(".raw")


def _write(path, data: np.ndarray, spacing, origin_id: str, dtype: str, extra=None) -> Path:
    header_path, payload_path = _paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "VVOL",
        "version": VVOL_VERSION,
        "shape": [int(s) for s in data.shape],
        "spacing": [float(s) for s in spacing],
        "dtype": dtype,
        "byte_order": "little",
        "origin_id": origin_id,
        "payload": payload_path.name,
    }
    if extra:
        header["extra"] = extra
    payload_path.write_bytes(np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes())
    header_path.write_text(json.dumps(header, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return header_path


def _read(path, expect_dtype: str | None = None):
    header_path, _ = _paths(path)
    if not header_path.exists():
        raise MissingFile(str(header_path))
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
        shape = tuple(int(s) for s in header["shape"])
        spacing = header["spacing"]
        dtype = header["dtype"]
        payload_path = header_path.with_name(header["payload"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptHeader(f"{header_path}: {exc}") from exc
    if header.get("format") != "VVOL" or header.get("byte_order") != "little" or dtype not in _DTYPES:
        raise CorruptHeader(f"{header_path}: unsupported header {header!r}")
    if len(shape) != 3 or min(shape) < 1:
        raise CorruptHeader(f"{header_path}: bad shape {shape}")
    if expect_dtype and dtype != expect_dtype:
        raise CorruptHeader(f"{header_path}: expected dtype {expect_dtype}, found {dtype}")
    if not payload_path.exists():
        raise MissingFile(str(payload_path))
    raw = payload_path.read_bytes()
    itemsize = _DTYPES[dtype].itemsize
    if len(raw) != itemsize * math.prod(shape):
        raise CorruptHeader(
            f"{header_path}: header declares {math.prod(shape)} values, payload holds {len(raw) / itemsize:g}"
        )
    data = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(shape)
    return header, data, spacing


def save_volume(vol: Volume, path, extra: dict | None = None) -> Path:
    return _write(path, vol.data, vol.spacing, vol.origin_id, "f32", extra)


def load_volume(path) -> Volume:
    header, data, spacing = _read(path, "f32")
    if not np.isfinite(data).all():
        raise NonFiniteData(f"{path}: payload contains non-finite values")
    return Volume(data.copy(), spacing, header.get("origin_id", ""))


def save_mask(mask: LabelMask, path) -> Path:
    return _write(path, mask.data, mask.spacing, mask.origin_id, "u8")


def load_mask(path) -> LabelMask:
    header, data, spacing = _read(path, "u8")
    return LabelMask(data.copy(), spacing, header.get("origin_id", ""))


def load_nifti(path, origin_id: str | None = None) -> tuple[Volume, dict]:
    """Import a NIfTI-1 file (``.nii`` or ``.nii.gz``) as a Volume.

    The image is reoriented to the closest canonical RAS frame and then
    transposed to (z, y, x).  The returned record describes the original
    orientation so the transform can be audited.
    """
    import nibabel as nib

    p = Path(path)
    if not p.exists():
        raise MissingFile(str(p))
    img = nib.load(str(p))
    source_axcodes = "".join(nib.aff2axcodes(img.affine))
    canon = nib.as_closest_canonical(img)
    arr = np.asarray(canon.get_fdata(dtype=np.float32))
    if arr.ndim == 4 and arr.shape[3] == 1:
        arr = arr[..., 0]
    if arr.ndim != 3:
        raise CorruptHeader(f"{p}: expected a 3D image, got shape {arr.shape}")
    zooms = canon.header.get_zooms()[:3]
    data = np.transpose(arr, (2, 1, 0))
    spacing = (float(zooms[2]), float(zooms[1]), float(zooms[0]))
    if origin_id is None:
        origin_id = p.name.split(".")[0]
    record = {"source_axcodes": source_axcodes, "canonical_axcodes": "RAS", "array_axes": "zyx"}
    return Volume(data, spacing, origin_id), record


# ---------------------------------------------------------------------------
# resampling


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def resampled_shape(shape, spacing, target_spacing) -> tuple[int, ...]:
    return tuple(
        max(1, _round_half_away(n * s / t)) for n, s, t in zip(shape, spacing, target_spacing)
    )


def source_coords(n_out: int, n_in: int, scale: float) -> np.ndarray:
    """Input coordinates for output voxel centres; both grids share their physical extent.

    ``scale`` is output spacing divided by input spacing.  Coordinates are
    clamped into ``[0, n_in - 1]`` (edge replication).
    """
    c = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    return np.clip(c, 0.0, n_in - 1)


def _interp_axis(a: np.ndarray, axis: int, coords: np.ndarray, mode: str) -> np.ndarray:
    n_in = a.shape[axis]
    if mode == "nearest":
        idx = np.minimum(np.floor(coords + 0.5).astype(np.int64), n_in - 1)
        return np.take(a, idx, axis=axis)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    shape = [1] * a.ndim
    shape[axis] = len(coords)
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - frac) + np.take(a, hi, axis=axis) * frac


def _resize_array(a: np.ndarray, out_shape, scales, mode: str) -> np.ndarray:
    out = a.astype(np.float64) if mode == "linear" else a
    for axis, (n_out, scale) in enumerate(zip(out_shape, scales)):
        n_in = out.shape[axis]
        if n_out == n_in and scale == 1.0:
            continue
        out = _interp_axis(out, axis, source_coords(n_out, n_in, scale), mode)
    return out


def resample(vol, target_spacing, mode: str = "linear"):
    """Resample a Volume (or LabelMask, with ``mode="nearest"``) to a new voxel size."""
    if mode not in ("linear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    target = _as_spacing(target_spacing)
    if isinstance(vol, LabelMask) and mode != "nearest":
        raise ValueError("label masks must be resampled with mode='nearest'")
    out_shape = resampled_shape(vol.shape, vol.spacing, target)
    scales = [t / s for s, t in zip(vol.spacing, target)]
    data = _resize_array(vol.data, out_shape, scales, mode)
    return type(vol)(data, target, vol.origin_id)


# ---------------------------------------------------------------------------
# slices


def slice_axial(vol: Volume) -> list[Slice2D]:
    _, h, w = vol.shape
    return [
        Slice2D(vol.data[z].copy(), z, vol.origin_id, vol.shape, (0, 0, h, w))
        for z in range(vol.shape[0])
    ]


def resize2d(a: np.ndarray, out_hw, mode: str = "linear") -> np.ndarray:
    h, w = a.shape
    oh, ow = out_hw
    return _resize_array(a, (oh, ow), (h / oh, w / ow), mode)


def center_crop_resize(s: Slice2D, crop_hw, out_hw, mode: str = "linear") -> Slice2D:
    """Centre-crop a slice to ``crop_hw`` then resize to ``out_hw``.

    The crop offset is ``floor((dim - crop) / 2)``; the crop rectangle is
    recorded in parent coordinates so :func:`merge_slices` can undo it.
    """
    ch, cw = (int(v) for v in crop_hw)
    oh, ow = (int(v) for v in out_hw)
    h, w = s.data.shape
    if (h, w) != (s.crop_box[2], s.crop_box[3]):
        raise ValueError("slice has already been resized; crop the original slice instead")
    if ch > h or cw > w or ch < 1 or cw < 1:
        raise CropTooLarge(f"crop {ch}x{cw} does not fit slice {h}x{w}")
    if oh < 1 or ow < 1:
        raise ValueError(f"output size must be positive, got {out_hw}")
    y0, x0 = (h - ch) // 2, (w - cw) // 2
    cropped = s.data[y0 : y0 + ch, x0 : x0 + cw]
    data = resize2d(cropped, (oh, ow), mode).astype(s.data.dtype)
    box = (s.crop_box[0] + y0, s.crop_box[1] + x0, ch, cw)
    return Slice2D(data, s.z_index, s.parent_id, s.parent_shape, box)


def normalize_intensity(vol: Volume, lo_pct: float = 0.5, hi_pct: float = 99.5) -> Volume:
    """Clip to the [lo, hi] percentile range and map it affinely onto [-1, 1]."""
    if not 0 <= lo_pct < hi_pct <= 100:
        raise ValueError(f"need 0 <= lo_pct < hi_pct <= 100, got {lo_pct}, {hi_pct}")
    data = vol.data.astype(np.float64)
    p_lo, p_hi = np.percentile(data, [lo_pct, hi_pct])
    if p_hi <= p_lo:
        out = np.zeros_like(data)
    else:
        out = 2.0 * (np.clip(data, p_lo, p_hi) - p_lo) / (p_hi - p_lo) - 1.0
    return Volume(out, vol.spacing, vol.origin_id)


def merge_slices(slices: Sequence[Slice2D], target: VolumeMeta | Volume, mode: str = "linear") -> Volume:
    """Reassemble slices into a volume, inverting any crop/resize per slice.

    Voxels outside a slice's crop box are filled with 0.
    """
    meta = target.meta if isinstance(target, Volume) else target
    if not slices:
        raise MissingSlice("no slices given")
    parents = {s.parent_id for s in slices}
    if len(parents) > 1:
        raise MixedParents(f"slices come from several volumes: {sorted(parents)}")
    depth, h, w = slices[0].parent_shape
    seen: dict[int, Slice2D] = {}
    for s in slices:
        if s.z_index in seen:
            raise DuplicateSlice(f"z_index {s.z_index} appears twice")
        seen[s.z_index] = s
    missing = sorted(set(range(depth)) - set(seen))
    if missing:
        raise MissingSlice(f"missing z indices {missing}")
    out = np.zeros((depth, h, w), dtype=np.float32)
    for z in range(depth):
        s = seen[z]
        y0, x0, ch, cw = s.crop_box
        data = s.data
        if data.shape != (ch, cw):
            data = resize2d(data, (ch, cw), mode)
        out[z, y0 : y0 + ch, x0 : x0 + cw] = data
    return Volume(out, meta.spacing, meta.origin_id or slices[0].parent_id)
