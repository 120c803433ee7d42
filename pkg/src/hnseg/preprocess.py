"""
Head-and-neck region extraction and intensity normalization.

Fixed processing order: resample CT and PET onto a common isotropic grid,
find the head top and neck center-line on PET, crop a fixed-size box hanging
from the head top, then normalize each modality inside the crop.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .autodiff import Tensor
from .errors import ArgumentError, CaseError, DetectionError, NormalizationError
from .volume import (
    ImageGeometry,
    LabelVolume,
    ScalarVolume,
    VoxelBox,
    crop,
    read_nifti,
    resample_linear,
    resample_nearest,
    write_nifti,
)

log = logging.getLogger(__name__)

SIDECAR = "sidecar.json"


@dataclass(frozen=True)
class CropHeuristicConfig:
    pet_threshold: float = 1.0
    top_slab_mm: float = 40.0
    box_xy_mm: float = 200.0
    box_z_mm: float = 310.0

    def __post_init__(self):
        if min(self.pet_threshold, self.top_slab_mm, self.box_xy_mm, self.box_z_mm) <= 0:
            raise ArgumentError("crop heuristic parameters must be positive")


@dataclass(frozen=True)
class NormalizationConfig:
    ct_range: tuple[float, float] = (-200.0, 300.0)
    ct_logit_span: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "ct_range", tuple(float(v) for v in self.ct_range))
        low, high = self.ct_range
        if not low < high:
            raise ArgumentError(f"ct_range low must be below high, got {self.ct_range}")
        if not self.ct_logit_span > 0:
            raise ArgumentError("ct_logit_span must be positive")


# ---------------------------------------------------------------------------
# crop heuristic
# ---------------------------------------------------------------------------


def detect_head_top(pet: ScalarVolume, cfg: CropHeuristicConfig, case_id: str = "?") -> float:
    """World z of the most superior axial slice with PET above threshold."""
    hot = (pet.values > cfg.pet_threshold).any(axis=(0, 1))
    if not hot.any():
        raise DetectionError(f"case {case_id}: no PET voxel above threshold {cfg.pet_threshold}")
    k = int(np.flatnonzero(hot)[-1])
    return float(pet.geometry.origin[2] + k * pet.geometry.spacing[2])


def detect_centerline(
    pet: ScalarVolume, head_top_z: float, cfg: CropHeuristicConfig, case_id: str = "?"
) -> tuple[float, float]:
    """Centroid (x, y) in world mm of above-threshold PET within the top slab."""
    g = pet.geometry
    z = g.axis_coords(2)
    in_slab = (z >= head_top_z - cfg.top_slab_mm - 1e-6) & (z <= head_top_z + 1e-6)
    if not in_slab.any():
        raise DetectionError(f"case {case_id}: top slab does not intersect the volume")
    fg = pet.values[:, :, in_slab] > cfg.pet_threshold
    ii, jj, _ = np.nonzero(fg)
    if ii.size == 0:
        raise DetectionError(f"case {case_id}: no foreground in the top slab")
    x = g.origin[0] + ii.mean() * g.spacing[0]
    y = g.origin[1] + jj.mean() * g.spacing[1]
    return float(x), float(y)


def hn_box(
    center_xy: tuple[float, float], head_top_z: float, cfg: CropHeuristicConfig, target_geom: ImageGeometry
) -> VoxelBox:
    """Voxel box ``box_xy x box_xy`` around the center-line, ``box_z`` down from the head top.

    The box always has the full configured extent; parts outside the volume
    are filled by ``crop``.
    """
    sp = np.asarray(target_geom.spacing)
    if min(cfg.box_xy_mm, cfg.box_z_mm) < 2 * sp.max():
        raise ArgumentError("crop box must span at least two voxels of the largest spacing")
    cx, cy = center_xy
    lower_mm = np.array([cx - cfg.box_xy_mm / 2, cy - cfg.box_xy_mm / 2, head_top_z - cfg.box_z_mm])
    extent = np.array([cfg.box_xy_mm, cfg.box_xy_mm, cfg.box_z_mm])
    lo = np.rint((lower_mm - np.asarray(target_geom.origin)) / sp).astype(int)
    hi = lo + np.rint(extent / sp).astype(int)
    return VoxelBox(tuple(lo), tuple(hi))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def ct_logit(x, cfg: NormalizationConfig):
    low, high = cfg.ct_range
    return ((np.asarray(x, dtype=np.float64) - low) / (high - low) * 2.0 - 1.0) * cfg.ct_logit_span


def normalize_ct(ct: ScalarVolume, cfg: NormalizationConfig) -> ScalarVolume:
    """Window -> [-1, 1] -> scaled by ``ct_logit_span`` -> logistic."""
    return ScalarVolume(ct.geometry, expit(ct_logit(ct.values, cfg)).astype(np.float32))


def pet_stats(pet: ScalarVolume) -> tuple[float, float]:
    v = pet.values.astype(np.float64)
    return float(v.mean()), float(v.std())


def normalize_pet(pet: ScalarVolume, stats: tuple[float, float] | None = None) -> ScalarVolume:
    mean, std = stats if stats is not None else pet_stats(pet)
    if not std > 0:
        raise NormalizationError("PET volume is constant; cannot z-score")
    return ScalarVolume(pet.geometry, expit((pet.values.astype(np.float64) - mean) / std).astype(np.float32))


def make_network_input(ct_n: ScalarVolume, pet_n: ScalarVolume) -> Tensor:
    """``[1, 2, X, Y, Z]`` tensor, channel 0 CT and channel 1 PET."""
    if not ct_n.geometry.isclose(pet_n.geometry):
        raise ArgumentError("CT and PET must share geometry to form the network input")
    return Tensor(np.stack([ct_n.values, pet_n.values])[None], dtype=np.float32)


# ---------------------------------------------------------------------------
# whole-case pipeline
# ---------------------------------------------------------------------------


@dataclass
class PreprocessedCase:
    case_id: str
    ct: ScalarVolume
    pet: ScalarVolume
    pet_raw: ScalarVolume
    label: LabelVolume | None
    sidecar: dict = field(default_factory=dict)

    @property
    def geometry(self) -> ImageGeometry:
        return self.ct.geometry

    def network_input(self) -> np.ndarray:
        return make_network_input(self.ct, self.pet).data


def preprocess_case(
    ct: ScalarVolume,
    pet: ScalarVolume,
    label: LabelVolume | None,
    crop_cfg: CropHeuristicConfig,
    norm_cfg: NormalizationConfig,
    spacing: tuple[float, float, float],
    case_id: str = "?",
) -> PreprocessedCase:
    if label is not None and not label.geometry.isclose(ct.geometry):
        raise CaseError(f"case {case_id}: label geometry differs from CT")
    frame = ct.geometry.with_spacing(spacing)
    ct_r = resample_linear(ct, frame)
    pet_r = resample_linear(pet, frame)
    top = detect_head_top(pet_r, crop_cfg, case_id)
    center = detect_centerline(pet_r, top, crop_cfg, case_id)
    box = hn_box(center, top, crop_cfg, frame)

    ct_fill = norm_cfg.ct_range[0]
    ct_c = crop(ct_r, box, fill=ct_fill)
    pet_c = crop(pet_r, box, fill=0.0)
    lab_c = crop(resample_nearest(label, frame), box, fill=0) if label is not None else None
    stats = pet_stats(pet_c)
    ct_n = normalize_ct(ct_c, norm_cfg)
    pet_n = normalize_pet(pet_c, stats)
    sidecar = {
        "case_id": case_id,
        "ct_geometry": ct.geometry.to_dict(),
        "frame_geometry": frame.to_dict(),
        "crop_geometry": ct_c.geometry.to_dict(),
        "box": box.to_dict(),
        "head_top_z": top,
        "centerline_xy": list(center),
        "pet_mean": stats[0],
        "pet_std": stats[1],
        "ct_range": list(norm_cfg.ct_range),
        "ct_logit_span": norm_cfg.ct_logit_span,
        "pad_values": {
            "ct": float(expit(ct_logit(ct_fill, norm_cfg))),
            "pet": float(expit((0.0 - stats[0]) / stats[1])),
        },
    }
    return PreprocessedCase(case_id, ct_n, pet_n, pet_c, lab_c, sidecar)


def save_preprocessed(case: PreprocessedCase, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_nifti(case.ct, out / "ct.nii.gz")
    write_nifti(case.pet, out / "pet.nii.gz")
    write_nifti(case.pet_raw, out / "pet_raw.nii.gz")
    if case.label is not None:
        write_nifti(case.label, out / "label.nii.gz")
    with open(out / SIDECAR, "w") as f:
        json.dump(case.sidecar, f, indent=1, sort_keys=True)
    return out


def load_preprocessed(case_dir: str | os.PathLike) -> PreprocessedCase:
    d = Path(case_dir)
    with open(d / SIDECAR) as f:
        sidecar = json.load(f)
    label = read_nifti(d / "label.nii.gz", kind="label") if (d / "label.nii.gz").exists() else None
    return PreprocessedCase(
        sidecar["case_id"],
        read_nifti(d / "ct.nii.gz", kind="scalar"),
        read_nifti(d / "pet.nii.gz", kind="scalar"),
        read_nifti(d / "pet_raw.nii.gz", kind="scalar"),
        label,
        sidecar,
    )


def load_raw_case(case_dir: str | os.PathLike):
    """``(ct, pet, label-or-None)`` from a raw case directory."""
    d = Path(case_dir)
    ct = read_nifti(d / "ct.nii.gz", kind="scalar")
    pet = read_nifti(d / "pet.nii.gz", kind="scalar")
    label = read_nifti(d / "label.nii.gz", kind="label") if (d / "label.nii.gz").exists() else None
    return ct, pet, label


def preprocess_corpus(
    in_dir: str | os.PathLike,
    out_dir: str | os.PathLike,
    crop_cfg: CropHeuristicConfig,
    norm_cfg: NormalizationConfig,
    spacing: tuple[float, float, float],
) -> list[str]:
    """Preprocess every case directory under ``in_dir``; returns case ids."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    ids = []
    for case_dir in sorted(p for p in in_dir.iterdir() if (p / "ct.nii.gz").exists()):
        ct, pet, label = load_raw_case(case_dir)
        case = preprocess_case(ct, pet, label, crop_cfg, norm_cfg, spacing, case_dir.name)
        save_preprocessed(case, out_dir / case_dir.name)
        ids.append(case_dir.name)
        log.info("preprocessed %s box=%s", case_dir.name, case.sidecar["box"])
    return ids
