"""Anisotropic volumes: file I/O, intensity normalization, resampling, cropping.

Volumes are indexed ``(slice, row, col)`` and carry spacing in mm as
``(through_plane, row, col)``.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff.serialize import atomic_write_bytes


class VolumeFormatError(ValueError):
    """Malformed file header; the message names the offending field."""


class VolumeShapeError(ValueError):
    """Shape or size inconsistency (crop too large, payload size mismatch, ...)."""


class DegenerateInputError(ValueError):
    """Input for which the requested quantity is undefined (e.g. constant volume)."""


def _frozen(arr, ndim: int, what: str) -> np.ndarray:
    data = np.array(arr, dtype=np.float32, copy=True, order="C")
    if data.ndim != ndim:
        raise VolumeShapeError(f"{what} data must be {ndim}D, got shape {data.shape}")
    if min(data.shape) < 1:
        raise VolumeShapeError(f"{what} dimensions must be >= 1, got {data.shape}")
    data.flags.writeable = False
    return data


@dataclass(frozen=True, eq=False)
class Slice:
    data: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, 2, "slice"))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float]
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, 3, "volume"))
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise VolumeShapeError(f"spacing must be three positive reals, got {self.spacing}")
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def same_as(self, other: "Volume") -> bool:
        """Bit-identical data and spacing."""
        return (self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes()
                and self.spacing == other.spacing)


# ---------------------------------------------------------------------------
# NIfTI-1 (single file, uncompressed)

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
_NIFTI_DTYPES = {4: ("i2", 16), 512: ("u2", 16), 16: ("f4", 32), 64: ("f8", 64)}


def _nifti_header(shape: tuple[int, int, int], spacing, provenance: str) -> bytes:
    nz, ny, nx = shape
    dz, dy, dx = spacing
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<c", hdr, 38, b"r")
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 16, 32)  # datatype float32, bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, dx, dy, dz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<fff", hdr, 108, float(NIFTI_VOX_OFFSET), 1.0, 0.0)  # vox_offset, slope, inter
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    descrip = provenance.encode("utf-8")[:79]
    hdr[148:148 + len(descrip)] = descrip
    struct.pack_into("<hh", hdr, 252, 0, 1)  # qform_code, sform_code
    struct.pack_into("<4f", hdr, 280, dx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, dy, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, dz, 0.0)
    hdr[344:348] = b"n+1\0"
    return bytes(hdr)


def _read_nifti(path: Path) -> Volume:
    blob = path.read_bytes()
    if len(blob) < NIFTI_HEADER_SIZE:
        raise VolumeFormatError(f"{path}: sizeof_hdr: file shorter than 348-byte header")
    if struct.unpack_from("<i", blob, 0)[0] == NIFTI_HEADER_SIZE:
        e = "<"
    elif struct.unpack_from(">i", blob, 0)[0] == NIFTI_HEADER_SIZE:
        e = ">"
    else:
        raise VolumeFormatError(f"{path}: sizeof_hdr: expected 348")
    magic = blob[344:348]
    if magic != b"n+1\0":
        detail = "two-file (ni1) NIfTI is not supported" if magic == b"ni1\0" else f"got {magic!r}"
        raise VolumeFormatError(f"{path}: magic: {detail}")
    dim = struct.unpack_from(e + "8h", blob, 40)
    ndim = dim[0]
    if ndim < 2 or ndim > 7 or any(d < 1 for d in dim[1:ndim + 1]):
        raise VolumeFormatError(f"{path}: dim: invalid {dim}")
    if ndim > 3 and any(d != 1 for d in dim[4:ndim + 1]):
        raise VolumeFormatError(f"{path}: dim: 4D+ data not supported ({dim})")
    nx, ny = dim[1], dim[2]
    nz = dim[3] if ndim >= 3 else 1
    datatype, bitpix = struct.unpack_from(e + "hh", blob, 70)
    if datatype not in _NIFTI_DTYPES:
        raise VolumeFormatError(f"{path}: datatype: unsupported code {datatype}")
    code, bits = _NIFTI_DTYPES[datatype]
    if bitpix != bits:
        raise VolumeFormatError(f"{path}: bitpix: {bitpix} inconsistent with datatype {datatype}")
    pixdim = struct.unpack_from(e + "8f", blob, 76)
    spacing = (pixdim[3] if ndim >= 3 else 1.0, pixdim[2], pixdim[1])
    if not all(s > 0 and math.isfinite(s) for s in spacing):
        raise VolumeFormatError(f"{path}: pixdim: non-positive spacing {pixdim[1:4]}")
    vox_offset, slope, inter = struct.unpack_from(e + "fff", blob, 108)
    offset = int(vox_offset)
    if offset < NIFTI_VOX_OFFSET - 4 or offset != vox_offset:
        raise VolumeFormatError(f"{path}: vox_offset: invalid value {vox_offset}")
    count = nx * ny * nz
    nbytes = count * bits // 8
    if len(blob) < offset + nbytes:
        raise VolumeShapeError(
            f"{path}: payload has {len(blob) - offset} bytes, dims {nx}x{ny}x{nz} need {nbytes}")
    arr = np.frombuffer(blob, dtype=e + code, count=count, offset=offset).reshape(nz, ny, nx)
    if slope not in (0.0, 1.0) or inter != 0.0:
        if not math.isfinite(slope) or slope == 0.0:
            slope = 1.0
        arr = arr.astype(np.float64) * slope + (inter if math.isfinite(inter) else 0.0)
    descrip = blob[148:228].split(b"\0", 1)[0].decode("utf-8", errors="replace")
    return Volume(arr, spacing, descrip or str(path))


def _write_nifti(v: Volume, path: Path) -> None:
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    blob = _nifti_header(v.shape, v.spacing, v.provenance) + b"\0" * 4 + payload
    atomic_write_bytes(path, blob)


# ---------------------------------------------------------------------------
# raw payload + JSON sidecar


def _raw_paths(path: Path) -> tuple[Path, Path]:
    if path.suffix == ".json":
        return path.with_suffix(".bin"), path
    return path, path.with_suffix(".json")


def _read_raw(path: Path) -> Volume:
    payload_path, sidecar_path = _raw_paths(path)
    try:
        meta = json.loads(sidecar_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{sidecar_path}: sidecar: not valid JSON ({exc})") from exc
    for key in ("dims", "spacing_mm", "dtype"):
        if key not in meta:
            raise VolumeFormatError(f"{sidecar_path}: {key}: missing")
    dims = meta["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(d, int) and d >= 1 for d in dims)):
        raise VolumeFormatError(f"{sidecar_path}: dims: expected three positive ints, got {dims}")
    if meta["dtype"] != "f32le":
        raise VolumeFormatError(f"{sidecar_path}: dtype: only 'f32le' supported, got {meta['dtype']!r}")
    spacing = meta["spacing_mm"]
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise VolumeFormatError(f"{sidecar_path}: spacing_mm: expected three reals, got {spacing}")
    payload = payload_path.read_bytes()
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(payload) != expected:
        raise VolumeShapeError(
            f"{payload_path}: payload has {len(payload)} bytes, dims {dims} need {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    try:
        return Volume(arr, tuple(spacing), str(meta.get("provenance", "")))
    except VolumeShapeError as exc:
        raise VolumeFormatError(f"{sidecar_path}: spacing_mm: {exc}") from exc


def _write_raw(v: Volume, path: Path) -> None:
    payload_path, sidecar_path = _raw_paths(path)
    meta = {"dims": list(v.shape), "spacing_mm": list(v.spacing), "dtype": "f32le",
            "provenance": v.provenance}
    atomic_write_bytes(payload_path, np.ascontiguousarray(v.data, dtype="<f4").tobytes())
    atomic_write_bytes(sidecar_path, (json.dumps(meta, indent=2) + "\n").encode("utf-8"))


FORMATS = ("nifti1", "raw_sidecar")


def _normalize_format(fmt: str) -> str:
    fmt = {"raw": "raw_sidecar", "nifti": "nifti1"}.get(fmt, fmt)
    if fmt not in FORMATS:
        raise ValueError(f"unknown volume format {fmt!r}; expected one of {FORMATS}")
    return fmt


def guess_format(path: str | os.PathLike) -> str:
    return "nifti1" if str(path).endswith(".nii") else "raw_sidecar"


def load_volume(path: str | os.PathLike, format: str | None = None) -> Volume:
    """Read a volume; spacing comes from the header, intensities become float32."""
    path = Path(path)
    fmt = _normalize_format(format or guess_format(path))
    return _read_nifti(path) if fmt == "nifti1" else _read_raw(path)


def write_volume(v: Volume, path: str | os.PathLike, format: str | None = None) -> None:
    path = Path(path)
    fmt = _normalize_format(format or guess_format(path))
    try:
        if fmt == "nifti1":
            _write_nifti(v, path)
        else:
            _write_raw(v, path)
    except OSError as exc:
        raise OSError(exc.errno, f"writing volume to {path}: {exc.strerror}") from exc


# ---------------------------------------------------------------------------
# preprocessing


def percentile_normalize(v: Volume, lo_pct: float = 1.0, hi_pct: float = 99.0) -> Volume:
    """Affine-map the lo/hi percentiles of the whole volume to 0/1 and clamp.

    Percentiles interpolate linearly between closest ranks.
    """
    if not 0.0 <= lo_pct < hi_pct <= 100.0:
        raise ValueError(f"need 0 <= lo_pct < hi_pct <= 100, got {lo_pct}, {hi_pct}")
    flat = v.data.astype(np.float64).ravel()
    p_lo, p_hi = np.percentile(flat, [lo_pct, hi_pct])
    if p_hi <= p_lo:
        raise DegenerateInputError(
            f"percentiles {lo_pct}/{hi_pct} coincide at {p_lo}; volume is (nearly) constant")
    out = np.clip((v.data.astype(np.float64) - p_lo) / (p_hi - p_lo), 0.0, 1.0)
    return Volume(out, v.spacing, v.provenance)


def resampled_count(count: int, old_mm: float, new_mm: float) -> int:
    return max(1, int(math.floor(count * old_mm / new_mm + 0.5)))


def resample_inplane(v: Volume, target: tuple[float, float] = (1.4, 1.4)) -> Volume:
    """Resample every slice to ``target`` (row_mm, col_mm) with cubic B-splines.

    Pixel centres are aligned: new pixel ``j`` maps to old coordinate
    ``(j + 0.5) * new_mm / old_mm - 0.5``. An axis whose spacing already
    equals the target is left untouched.
    """
    from .baselines import bspline_coefficients, bspline_evaluate

    if len(target) != 2 or not all(t > 0 for t in target):
        raise ValueError(f"target spacing must be two positive reals, got {target}")
    data = v.data.astype(np.float64)
    spacing = list(v.spacing)
    for axis, new_mm in zip((1, 2), target):
        old_mm = spacing[axis]
        if old_mm == new_mm:
            continue
        n_old = data.shape[axis]
        n_new = resampled_count(n_old, old_mm, new_mm)
        coords = (np.arange(n_new) + 0.5) * (new_mm / old_mm) - 0.5
        coords = np.clip(coords, -1.0, float(n_old))
        data = bspline_evaluate(bspline_coefficients(data, axis), coords, axis)
        spacing[axis] = float(new_mm)
    if data is v.data or spacing == list(v.spacing):
        return v
    return Volume(data, tuple(spacing), v.provenance)


def center_crop(v: Volume, rows: int = 128, cols: int = 128) -> Volume:
    n, h, w = v.shape
    if rows > h or cols > w:
        raise VolumeShapeError(f"crop {rows}x{cols} larger than slice {h}x{w}")
    r0, c0 = (h - rows) // 2, (w - cols) // 2
    return Volume(v.data[:, r0:r0 + rows, c0:c0 + cols], v.spacing, v.provenance)


def crop_offsets(v: Volume, rows: int, cols: int) -> tuple[int, int]:
    return (v.shape[1] - rows) // 2, (v.shape[2] - cols) // 2


def extract_slices(v: Volume) -> list[Slice]:
    return [Slice(v.data[k], v.spacing[1:]) for k in range(v.shape[0])]


def stack_slices(slices: Sequence[Slice], through_plane_mm: float, provenance: str = "") -> Volume:
    if not slices:
        raise VolumeShapeError("cannot stack an empty slice list")
    shape, spacing = slices[0].shape, slices[0].spacing
    for k, s in enumerate(slices):
        if s.shape != shape or s.spacing != spacing:
            raise VolumeShapeError(
                f"slice {k} has shape {s.shape}/spacing {s.spacing}, expected {shape}/{spacing}")
    return Volume(np.stack([s.data for s in slices]), (through_plane_mm, *spacing), provenance)
