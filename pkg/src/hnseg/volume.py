"""
Physical-space 3D volumes: geometry, NIfTI I/O, resampling and cropping.

Arrays are stored with shape ``geometry.size`` and indexed ``[i, j, k]`` along
the world x, y, z axes, so a Fortran-order flatten gives the x-fastest linear
layout used on disk. All geometry is axis-aligned RAS: world position of voxel
``(i, j, k)`` is ``origin + (i, j, k) * spacing``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Literal, Sequence, Union

import nibabel as nib
import numpy as np
from scipy import ndimage

from .errors import ArgumentError, FormatError, OrientationError, UnsupportedError

log = logging.getLogger(__name__)

LABEL_VALUES = (0, 1, 2)

# NIfTI datatype codes accepted on read
_SUPPORTED_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}


@dataclass(frozen=True)
class ImageGeometry:
    size: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        size = tuple(int(s) for s in self.size)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(size) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ArgumentError("geometry needs exactly three axes")
        if min(size) < 1:
            raise ArgumentError(f"size components must be >= 1, got {size}")
        if not min(spacing) > 0:
            raise ArgumentError(f"spacing components must be > 0, got {spacing}")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def affine(self) -> np.ndarray:
        aff = np.diag([*self.spacing, 1.0])
        aff[:3, 3] = self.origin
        return aff

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def world(self, index: Sequence[float]) -> np.ndarray:
        """World mm coordinate of a (possibly fractional) voxel index."""
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(self.spacing)

    def index(self, world: Sequence[float]) -> np.ndarray:
        """Continuous voxel index of a world coordinate."""
        return (np.asarray(world, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.size[axis]) * self.spacing[axis]

    def isclose(self, other: "ImageGeometry", tol: float = 1e-6) -> bool:
        return (
            self.size == other.size
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=tol)
        )

    def with_spacing(self, spacing: Sequence[float]) -> "ImageGeometry":
        """Grid covering the same physical extent at a new spacing.

        The extent is ``[origin - spacing/2, origin + (size - 1/2) * spacing]``;
        the new grid starts at that lower edge and rounds the voxel count up.
        """
        spacing = np.asarray(spacing, dtype=float)
        lower = np.asarray(self.origin) - np.asarray(self.spacing) / 2
        extent = np.asarray(self.size) * np.asarray(self.spacing)
        size = np.maximum(1, np.ceil(extent / spacing - 1e-9)).astype(int)
        return ImageGeometry(tuple(size), tuple(spacing), tuple(lower + spacing / 2))

    def to_dict(self) -> dict:
        return {"size": list(self.size), "spacing": list(self.spacing), "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "ImageGeometry":
        return cls(tuple(d["size"]), tuple(d["spacing"]), tuple(d["origin"]))


@dataclass(frozen=True)
class ScalarVolume:
    geometry: ImageGeometry
    values: np.ndarray
    source_axcodes: tuple[str, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.shape != self.geometry.size:
            raise ArgumentError(f"values shape {values.shape} != geometry size {self.geometry.size}")
        if not np.all(np.isfinite(values)):
            raise ArgumentError("scalar volume contains non-finite values")
        if values is self.values:
            values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def array(self) -> np.ndarray:
        return self.values


@dataclass(frozen=True)
class LabelVolume:
    geometry: ImageGeometry
    labels: np.ndarray
    source_axcodes: tuple[str, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.geometry.size:
            raise ArgumentError(f"labels shape {labels.shape} != geometry size {self.geometry.size}")
        if labels.size and (labels.min() < 0 or labels.max() > 2):
            raise ArgumentError("labels must only contain 0, 1 or 2")
        if not np.issubdtype(labels.dtype, np.integer) and not np.all(labels == np.round(labels)):
            raise ArgumentError("labels must be integral")
        labels = labels.astype(np.uint8, copy=labels is self.labels or labels.dtype != np.uint8)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def array(self) -> np.ndarray:
        return self.labels


Volume = Union[ScalarVolume, LabelVolume]


@dataclass(frozen=True)
class VoxelBox:
    """Half-open voxel index box ``[lo, hi)``; may extend past the volume."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if any(a > b for a, b in zip(lo, hi)):
            raise ArgumentError(f"box lo {lo} exceeds hi {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    def clamp(self, size: Sequence[int]) -> "VoxelBox":
        lo = tuple(min(max(l, 0), s) for l, s in zip(self.lo, size))
        hi = tuple(min(max(h, l), s) for h, l, s in zip(self.hi, lo, size))
        return VoxelBox(lo, hi)

    def contains(self, index: Sequence[int]) -> bool:
        return all(l <= i < h for l, i, h in zip(self.lo, index, self.hi))

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelBox":
        return cls(tuple(d["lo"]), tuple(d["hi"]))


def _like(v: Volume, geometry: ImageGeometry, array: np.ndarray) -> Volume:
    if isinstance(v, LabelVolume):
        return LabelVolume(geometry, array)
    return ScalarVolume(geometry, array)


# ---------------------------------------------------------------------------
# NIfTI I/O
# ---------------------------------------------------------------------------


def _check_axis_aligned(affine: np.ndarray, path: str) -> None:
    rot = affine[:3, :3]
    scale = np.abs(rot).max()
    nonzero = np.abs(rot) > 1e-6 * scale
    if not (nonzero.sum(axis=0) == 1).all() or not (nonzero.sum(axis=1) == 1).all():
        raise OrientationError(f"{path}: affine is not axis-aligned (rotation or shear present)")


def read_nifti(path: str | os.PathLike, kind: Literal["auto", "scalar", "label"] = "auto") -> Volume:
    """Load a NIfTI-1 file, reoriented to canonical RAS.

    With ``kind="auto"`` an unscaled uint8 file holding only {0, 1, 2} is read
    as a ``LabelVolume``; everything else becomes a ``ScalarVolume``.
    """
    path = os.fspath(path)
    try:
        img = nib.load(path)
        hdr = img.header
        code = int(hdr["datatype"])
    except FileNotFoundError:
        raise
    except Exception as exc:  # nibabel raises a zoo of types for bad headers
        raise FormatError(f"{path}: cannot parse NIfTI header ({exc})") from exc
    if not isinstance(img, nib.Nifti1Image):
        raise FormatError(f"{path}: not a NIfTI-1 image")
    if code not in _SUPPORTED_DTYPES:
        raise UnsupportedError(f"{path}: unsupported NIfTI datatype code {code}")
    if len(img.shape) != 3:
        if len(img.shape) == 4 and img.shape[3] == 1:
            img = img.slicer[..., 0]
        else:
            raise UnsupportedError(f"{path}: expected a 3D volume, got shape {img.shape}")

    affine = img.affine
    _check_axis_aligned(affine, path)
    axcodes = nib.aff2axcodes(affine)
    ornt = nib.io_orientation(affine)
    if not np.array_equal(ornt, [[0, 1], [1, 1], [2, 1]]):
        log.info("%s: reoriented %s -> RAS", path, "".join(axcodes))
        img = img.as_reoriented(ornt)
    affine = img.affine
    spacing = tuple(float(affine[i, i]) for i in range(3))
    origin = tuple(float(v) for v in affine[:3, 3])
    geometry = ImageGeometry(img.shape[:3], spacing, origin)

    slope, inter = hdr.get_slope_inter()
    unscaled = (slope is None or slope == 1.0) and (inter is None or inter == 0.0)
    try:
        if kind != "scalar" and code == 2 and unscaled:
            raw = np.asarray(img.dataobj, dtype=np.uint8)
            if kind == "label" or raw.max(initial=0) <= 2:
                return LabelVolume(geometry, raw, source_axcodes=axcodes)
        data = np.asarray(img.get_fdata(dtype=np.float64), dtype=np.float32)
    except (EOFError, ValueError, OSError) as exc:
        raise FormatError(f"{path}: truncated or corrupt voxel data ({exc})") from exc
    if kind == "label":
        return LabelVolume(geometry, np.rint(data), source_axcodes=axcodes)
    return ScalarVolume(geometry, data, source_axcodes=axcodes)


def write_nifti(volume: Volume, path: str | os.PathLike) -> None:
    """Write float32 (scalars) or uint8 (labels) NIfTI-1 with sform code 1."""
    path = os.fspath(path)
    if isinstance(volume, LabelVolume):
        data, dtype = volume.labels, np.uint8
    else:
        data, dtype = volume.values, np.float32
    img = nib.Nifti1Image(np.asarray(data, dtype=dtype), volume.geometry.affine)
    img.header.set_data_dtype(dtype)
    img.set_sform(volume.geometry.affine, code=1)
    img.set_qform(volume.geometry.affine, code=1)
    img.header["scl_slope"] = 1.0
    img.header["scl_inter"] = 0.0
    try:
        nib.save(img, path)
    except OSError:
        raise
    except Exception as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _source_coords(src: ImageGeometry, target: ImageGeometry, axis: int) -> np.ndarray:
    world = target.axis_coords(axis)
    return (world - src.origin[axis]) / src.spacing[axis]


def resample_linear(v: ScalarVolume, target: ImageGeometry) -> ScalarVolume:
    """Trilinear resampling in world space with edge replication outside."""
    src = v.geometry
    scale = np.asarray(target.spacing) / np.asarray(src.spacing)
    offset = (np.asarray(target.origin) - np.asarray(src.origin)) / np.asarray(src.spacing)
    out = ndimage.affine_transform(
        v.values.astype(np.float64),
        np.diag(scale),
        offset=offset,
        output_shape=target.size,
        order=1,
        mode="nearest",
        prefilter=False,
    )
    return ScalarVolume(target, out.astype(np.float32))


def resample_nearest(v: Volume, target: ImageGeometry) -> Volume:
    """Nearest-voxel-center resampling; never creates new values."""
    src = v.geometry
    idx = []
    for axis in range(3):
        c = _source_coords(src, target, axis)
        # half-up rounding, clamped to the source extent (border replication)
        i = np.floor(c + 0.5).astype(np.int64)
        idx.append(np.clip(i, 0, src.size[axis] - 1))
    out = v.array[np.ix_(*idx)]
    return _like(v, target, out)


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------


def crop(v: Volume, box: VoxelBox, fill: float = 0.0) -> Volume:
    """Extract ``box`` from ``v``; voxels outside the volume take ``fill``.

    The output origin is the world position of ``box.lo`` so world
    coordinates of retained voxels are unchanged.
    """
    geom = v.geometry
    inner = box.clamp(geom.size)
    if 0 in inner.shape:
        raise ArgumentError(f"crop box {box} does not intersect volume of size {geom.size}")
    out = np.full(box.shape, fill, dtype=v.array.dtype)
    dst = tuple(slice(il - bl, ih - bl) for il, ih, bl in zip(inner.lo, inner.hi, box.lo))
    src = tuple(slice(il, ih) for il, ih in zip(inner.lo, inner.hi))
    out[dst] = v.array[src]
    origin = tuple(geom.world(box.lo))
    return _like(v, ImageGeometry(box.shape, geom.spacing, origin), out)


def paste(v: Volume, frame: ImageGeometry, fill: float = 0.0) -> Volume:
    """Place ``v`` into a grid of identical spacing (inverse of ``crop``)."""
    if not np.allclose(v.geometry.spacing, frame.spacing):
        raise ArgumentError("paste requires matching spacing")
    lo = np.rint(v.geometry.index(frame.origin)).astype(int)
    placed = crop(v, VoxelBox(tuple(lo), tuple(lo + np.asarray(frame.size))), fill=fill)
    return _like(v, frame, placed.array)
