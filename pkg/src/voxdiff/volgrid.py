"""Core 3D volume type and grid operations.

A :class:`Volume` is a scalar voxel grid with physical spacing and origin.
It is the universal carrier in the pipeline: CT-like images, binary masks,
anomaly maps and decoded reconstructions are all volumes.  Data is stored
as a ``(nx, ny, nz)`` array indexed ``data[ix, iy, iz]``; on disk (VOL1
format) the payload is laid out x-fastest.

Volumes are immutable by convention: every operation returns a new volume
and never mutates its inputs, so they are safe to share across workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

VOL1_MAGIC = b"VOL1"
DTYPE_F32 = 1
DTYPE_U8 = 2
DTYPE_U32 = 3

_DTYPE_CODES = {DTYPE_F32: "<f4", DTYPE_U8: "u1", DTYPE_U32: "<u4"}


class VolumeError(ValueError):
    """Raised for invalid volume geometry, values, or file contents."""


def _as_triple(v, name: str) -> tuple[float, float, float]:
    t = tuple(float(x) for x in v)
    if len(t) != 3:
        raise VolumeError(f"{name} must have 3 components, got {len(t)}")
    return t


@dataclass(frozen=True)
class Volume:
    """Scalar 3D grid with voxel spacing (mm) and world origin (mm).

    Attributes:
        data: float array of shape (nx, ny, nz), data[ix, iy, iz].
        spacing: (sx, sy, sz) mm per voxel, all > 0.
        origin: (ox, oy, oz) mm position of voxel (0, 0, 0).
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise VolumeError("volume contains non-finite values")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _as_triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        if any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def same_geometry(self, other: "Volume | BinaryMask", tol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and all(abs(a - b) <= tol for a, b in zip(self.spacing, other.spacing))
            and all(abs(a - b) <= tol for a, b in zip(self.origin, other.origin))
        )

    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def world_to_voxel(self, point_mm) -> np.ndarray:
        p = np.asarray(point_mm, dtype=float)
        return (p - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_to_world(self, index) -> np.ndarray:
        i = np.asarray(index, dtype=float)
        return np.asarray(self.origin) + i * np.asarray(self.spacing)


@dataclass(frozen=True)
class BinaryMask:
    """Per-voxel {0, 1} grid sharing Volume geometry conventions."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise VolumeError(f"mask data must be 3D, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            vals = np.unique(arr)
            if not np.all(np.isin(vals, (0, 1))):
                raise VolumeError("mask values must be 0 or 1")
            arr = arr.astype(np.uint8)
        elif arr.size and arr.max() > 1:
            raise VolumeError("mask values must be 0 or 1")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _as_triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        if any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def same_geometry(self, other, tol: float = 1e-6) -> bool:
        return Volume.same_geometry(self, other, tol)

    def count(self) -> int:
        return int(self.data.sum())

    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz


@dataclass(frozen=True)
class PatchPlacement:
    """Where an extracted patch sits in its source grid (voxel units)."""

    offset_voxels: tuple[int, int, int]
    patch_dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "offset_voxels", tuple(int(v) for v in self.offset_voxels))
        object.__setattr__(self, "patch_dims", tuple(int(v) for v in self.patch_dims))

    def slices(self) -> tuple[slice, slice, slice]:
        o, d = self.offset_voxels, self.patch_dims
        return tuple(slice(o[i], o[i] + d[i]) for i in range(3))


# ---------------------------------------------------------------------------
# Resampling and intensity
# ---------------------------------------------------------------------------

def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    # Corner-anchored: first/last output samples coincide with the first/last
    # input samples; interior samples spaced evenly in between.
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def _resampled_dims(dims, spacing, target_mm: float) -> tuple[int, int, int]:
    return tuple(max(1, int(round(n * s / target_mm))) for n, s in zip(dims, spacing))


def _trilinear_sample(data: np.ndarray, cx: np.ndarray, cy: np.ndarray, cz: np.ndarray) -> np.ndarray:
    """Evaluate trilinear interpolation at the grid of per-axis coordinates."""
    nx, ny, nz = data.shape
    ix = np.clip(np.floor(cx).astype(np.intp), 0, max(nx - 2, 0))
    iy = np.clip(np.floor(cy).astype(np.intp), 0, max(ny - 2, 0))
    iz = np.clip(np.floor(cz).astype(np.intp), 0, max(nz - 2, 0))
    fx = (cx - ix).reshape(-1, 1, 1)
    fy = (cy - iy).reshape(1, -1, 1)
    fz = (cz - iz).reshape(1, 1, -1)
    ix1 = np.minimum(ix + 1, nx - 1)
    iy1 = np.minimum(iy + 1, ny - 1)
    iz1 = np.minimum(iz + 1, nz - 1)

    def g(ax, ay, az):
        return data[np.ix_(ax, ay, az)]

    c000, c100 = g(ix, iy, iz), g(ix1, iy, iz)
    c010, c110 = g(ix, iy1, iz), g(ix1, iy1, iz)
    c001, c101 = g(ix, iy, iz1), g(ix1, iy, iz1)
    c011, c111 = g(ix, iy1, iz1), g(ix1, iy1, iz1)

    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def resample_isotropic(vol: Volume, target_mm: float) -> Volume:
    """Resample to isotropic ``target_mm`` spacing with trilinear interpolation.

    Output dims are ``round(dim * spacing / target_mm)`` (at least 1 per axis);
    sample coordinates are corner-anchored so grid-aligned resampling is exact.
    """
    if target_mm <= 0:
        raise VolumeError(f"target spacing must be positive, got {target_mm}")
    out_dims = _resampled_dims(vol.dims, vol.spacing, target_mm)
    if out_dims == vol.dims and all(abs(s - target_mm) < 1e-12 for s in vol.spacing):
        return Volume(vol.data.copy(), (target_mm,) * 3, vol.origin)
    coords = [_axis_coords(vol.dims[a], out_dims[a]) for a in range(3)]
    out = _trilinear_sample(vol.data, *coords)
    return Volume(out.astype(vol.data.dtype), (target_mm,) * 3, vol.origin)


def resample_mask_isotropic(mask: BinaryMask, target_mm: float) -> BinaryMask:
    """Nearest-neighbor resampling for masks (preserves {0, 1})."""
    if target_mm <= 0:
        raise VolumeError(f"target spacing must be positive, got {target_mm}")
    out_dims = _resampled_dims(mask.dims, mask.spacing, target_mm)
    coords = [np.rint(_axis_coords(mask.dims[a], out_dims[a])).astype(np.intp) for a in range(3)]
    out = mask.data[np.ix_(*coords)]
    return BinaryMask(out.copy(), (target_mm,) * 3, mask.origin)


def normalize_intensity(vol: Volume, lo: float, hi: float) -> Volume:
    """Clip values to [lo, hi], then map affinely onto [-1, 1]."""
    if lo >= hi:
        raise VolumeError(f"window requires lo < hi, got [{lo}, {hi}]")
    clipped = np.clip(vol.data, lo, hi)
    out = 2.0 * (clipped - lo) / (hi - lo) - 1.0
    return Volume(out.astype(vol.data.dtype), vol.spacing, vol.origin)


# ---------------------------------------------------------------------------
# Patch extraction and composition
# ---------------------------------------------------------------------------

def extract_patch(vol: Volume, center_mm, size_mm) -> tuple[Volume, PatchPlacement]:
    """Cut a physical-size window around ``center_mm``.

    The window is clamped into the grid by shifting its corner, never by
    shrinking, so the patch always has the requested voxel dims.
    """
    size = np.asarray(size_mm, dtype=float)
    if np.any(size <= 0):
        raise VolumeError(f"patch size must be positive, got {size_mm}")
    patch_dims = np.maximum(1, np.rint(size / np.asarray(vol.spacing)).astype(int))
    if np.any(patch_dims > np.asarray(vol.dims)):
        raise VolumeError(
            f"patch dims {tuple(patch_dims)} exceed volume dims {vol.dims}"
        )
    center_vox = vol.world_to_voxel(center_mm)
    corner = np.rint(center_vox - (patch_dims - 1) / 2.0).astype(int)
    corner = np.clip(corner, 0, np.asarray(vol.dims) - patch_dims)
    placement = PatchPlacement(tuple(corner), tuple(patch_dims))
    sub = vol.data[placement.slices()].copy()
    patch_origin = tuple(vol.voxel_to_world(corner))
    return Volume(sub, vol.spacing, patch_origin), placement


def extract_mask_patch(mask: BinaryMask, placement: PatchPlacement) -> BinaryMask:
    """Cut the mask window matching an image patch placement."""
    sub = mask.data[placement.slices()].copy()
    origin = tuple(
        o + i * s for o, i, s in zip(mask.origin, placement.offset_voxels, mask.spacing)
    )
    return BinaryMask(sub, mask.spacing, origin)


def compose_full_map(
    patches: list[tuple[Volume, PatchPlacement]],
    full_dims,
    spacing,
    origin=(0.0, 0.0, 0.0),
) -> Volume:
    """Paste patch maps back into the full grid; overlaps take the maximum.

    Voxels not covered by any patch are zero, so the composed map is a valid
    anomaly map (nonnegative background).
    """
    full_dims = tuple(int(d) for d in full_dims)
    out = np.zeros(full_dims, dtype=np.float32)
    for vol, placement in patches:
        if any(abs(a - b) > 1e-6 for a, b in zip(vol.spacing, spacing)):
            raise VolumeError(
                f"patch spacing {vol.spacing} inconsistent with target {tuple(spacing)}"
            )
        if tuple(placement.patch_dims) != vol.dims:
            raise VolumeError(
                f"placement dims {placement.patch_dims} do not match patch {vol.dims}"
            )
        o = placement.offset_voxels
        if any(o[i] < 0 or o[i] + vol.dims[i] > full_dims[i] for i in range(3)):
            raise VolumeError(f"placement {placement} out of bounds for {full_dims}")
        sl = placement.slices()
        np.maximum(out[sl], vol.data, out=out[sl])
    return Volume(out, tuple(float(s) for s in spacing), tuple(float(o) for o in origin))


# ---------------------------------------------------------------------------
# VOL1 serialization
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sB3I6f")


def _write_vol1(path, data: np.ndarray, spacing, origin, dtype_code: int) -> None:
    nx, ny, nz = data.shape
    header = _HEADER.pack(
        VOL1_MAGIC, dtype_code, nx, ny, nz,
        *(float(s) for s in spacing), *(float(o) for o in origin),
    )
    payload = np.ascontiguousarray(data.ravel(order="F")).astype(_DTYPE_CODES[dtype_code])
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def write_volume(path, vol: Volume) -> None:
    _write_vol1(path, vol.data, vol.spacing, vol.origin, DTYPE_F32)


def write_mask(path, mask: BinaryMask) -> None:
    _write_vol1(path, mask.data, mask.spacing, mask.origin, DTYPE_U8)


def write_labels(path, labels: np.ndarray, spacing, origin=(0.0, 0.0, 0.0)) -> None:
    """Serialize a u32 component label grid (VOL1 dtype extension code 3)."""
    _write_vol1(path, labels.astype(np.uint32), spacing, origin, DTYPE_U32)


def _read_vol1(path):
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise VolumeError(f"{path}: truncated header")
        magic, dtype_code, nx, ny, nz, sx, sy, sz, ox, oy, oz = _HEADER.unpack(head)
        if magic != VOL1_MAGIC:
            raise VolumeError(f"{path}: bad magic {magic!r}")
        if dtype_code not in _DTYPE_CODES:
            raise VolumeError(f"{path}: unknown dtype code {dtype_code}")
        np_dtype = np.dtype(_DTYPE_CODES[dtype_code])
        count = nx * ny * nz
        payload = f.read(count * np_dtype.itemsize + 1)
        if len(payload) < count * np_dtype.itemsize:
            raise VolumeError(f"{path}: truncated payload")
        if len(payload) > count * np_dtype.itemsize:
            raise VolumeError(f"{path}: trailing bytes after payload")
    flat = np.frombuffer(payload, dtype=np_dtype, count=count)
    data = flat.reshape((nx, ny, nz), order="F")
    return dtype_code, data, (sx, sy, sz), (ox, oy, oz)


def read_volume(path) -> Volume:
    code, data, spacing, origin = _read_vol1(path)
    if code != DTYPE_F32:
        raise VolumeError(f"{path}: expected f32 volume, found dtype code {code}")
    return Volume(np.array(data, dtype=np.float32), spacing, origin)


def read_mask(path) -> BinaryMask:
    code, data, spacing, origin = _read_vol1(path)
    if code != DTYPE_U8:
        raise VolumeError(f"{path}: expected u8 mask, found dtype code {code}")
    return BinaryMask(np.array(data), spacing, origin)


def read_labels(path) -> tuple[np.ndarray, tuple, tuple]:
    code, data, spacing, origin = _read_vol1(path)
    if code != DTYPE_U32:
        raise VolumeError(f"{path}: expected u32 labels, found dtype code {code}")
    return np.array(data), spacing, origin
