"""
Synthetic PET/CT head-and-neck cases with analytically known geometry.

World frame is RAS in mm with the volume spanning ``[0, extent]`` on every
axis and +z superior. Anatomy: a head sphere on top of an elliptic neck
cylinder with a spine, above a wide torso. Lesions are superellipsoids in the
neck: primary tumors (label 1) near the midline, lymph nodes (label 2)
laterally. CT and PET live on different grids sharing the world frame.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .volume import ImageGeometry, LabelVolume, ScalarVolume, write_nifti

TUMOR, NODE = 1, 2


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    extent_mm: tuple[float, float, float] = (192.0, 192.0, 288.0)
    ct_spacing: tuple[float, float, float] = (1.5, 1.5, 3.0)
    pet_spacing: tuple[float, float, float] = (4.0, 4.0, 4.0)
    # every *_mm anatomy range below is multiplied by this factor
    anatomy_scale: float = 1.0
    head_radius_mm: tuple[float, float] = (28.0, 34.0)
    head_xy_jitter_mm: float = 16.0
    head_top_margin_mm: tuple[float, float] = (12.0, 48.0)
    neck_semi_axes_mm: tuple[float, float] = (35.0, 26.0)
    torso_semi_axes_mm: tuple[float, float] = (80.0, 50.0)
    torso_top_below_head_mm: tuple[float, float] = (112.0, 124.0)
    tumor_count_probs: tuple[float, float, float] = (0.1, 0.8, 0.1)
    tumor_radius_mm: tuple[float, float] = (9.0, 13.0)
    tumor_depth_mm: tuple[float, float] = (55.0, 95.0)
    node_count_range: tuple[int, int] = (1, 3)
    node_radius_mm: tuple[float, float] = (7.0, 11.0)
    node_depth_mm: tuple[float, float] = (60.0, 122.0)
    node_lateral_mm: tuple[float, float] = (12.0, 22.0)
    pet_body: float = 0.2
    pet_head: float = 1.5
    pet_tumor_peak: tuple[float, float] = (6.0, 8.0)
    pet_node_peak: tuple[float, float] = (4.5, 6.5)
    pet_noise: float = 0.05
    ct_air: float = -1000.0
    ct_soft: float = 40.0
    ct_brain: float = 35.0
    ct_bone: float = 700.0
    ct_tumor: float = 90.0
    ct_node: float = 15.0
    ct_noise: float = 10.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Lesion:
    cls: int
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    exponent: float
    pet_peak: float

    def bounding_radius(self) -> float:
        return max(self.radii)

    def rho(self, x, y, z):
        """Superellipsoid radius; the lesion is ``rho <= 1``."""
        p = self.exponent
        cx, cy, cz = self.center
        rx, ry, rz = self.radii
        s = np.abs((x - cx) / rx) ** p + np.abs((y - cy) / ry) ** p + np.abs((z - cz) / rz) ** p
        return s ** (1.0 / p)


@dataclass
class PhantomCase:
    case_id: str
    ct: ScalarVolume
    pet: ScalarVolume
    label: LabelVolume
    params: dict = field(default_factory=dict)


def _grid(extent, spacing) -> ImageGeometry:
    spacing = np.asarray(spacing, dtype=float)
    size = np.round(np.asarray(extent) / spacing).astype(int)
    return ImageGeometry(tuple(size), tuple(spacing), tuple(spacing / 2))


def _draw_anatomy(spec: PhantomSpec, rng: np.random.Generator) -> dict:
    s = spec.anatomy_scale
    ex, ey, ez = spec.extent_mm
    r_head = rng.uniform(*spec.head_radius_mm) * s
    jit = spec.head_xy_jitter_mm * s
    cx = ex / 2 + rng.uniform(-jit, jit)
    cy = ey / 2 + rng.uniform(-jit, jit)
    top = ez - rng.uniform(*spec.head_top_margin_mm) * s
    neck_ax = spec.neck_semi_axes_mm[0] * s * rng.uniform(0.95, 1.08)
    neck_ay = spec.neck_semi_axes_mm[1] * s * rng.uniform(0.95, 1.08)
    torso_top = top - rng.uniform(*spec.torso_top_below_head_mm) * s
    return {
        "head_center": [cx, cy, top - r_head],
        "head_radius": r_head,
        "head_top_z": top,
        "neck_semi_axes": [neck_ax, neck_ay],
        "neck_center": [cx, cy],
        "torso_top_z": torso_top,
        "torso_semi_axes": [spec.torso_semi_axes_mm[0] * s, spec.torso_semi_axes_mm[1] * s],
        "spine_center": [cx, cy - 0.6 * neck_ay],
        "spine_radius": 7.0 * s,
        "skull_thickness": 4.0 * s,
    }


def _place(lesions: list[Lesion], cand: Lesion, gap: float) -> bool:
    for other in lesions:
        d = np.linalg.norm(np.subtract(cand.center, other.center))
        if d < cand.bounding_radius() + other.bounding_radius() + gap:
            return False
    return True


def _draw_lesions(spec: PhantomSpec, anat: dict, rng: np.random.Generator) -> list[Lesion]:
    s = spec.anatomy_scale
    cx, cy = anat["neck_center"]
    top = anat["head_top_z"]
    n_tumor = int(rng.choice(3, p=spec.tumor_count_probs))
    lo, hi = spec.node_count_range
    n_node = int(rng.integers(lo, hi + 1))
    lesions: list[Lesion] = []

    def shape(r):
        return tuple(r * rng.uniform(0.85, 1.15, size=3)), float(rng.uniform(2.0, 3.0))

    for _ in range(n_tumor):
        for _attempt in range(200):
            r = rng.uniform(*spec.tumor_radius_mm) * s
            radii, p = shape(r)
            center = (
                cx + rng.uniform(-6, 6) * s,
                cy + rng.uniform(2, 10) * s,
                top - rng.uniform(*spec.tumor_depth_mm) * s,
            )
            cand = Lesion(TUMOR, center, radii, p, float(rng.uniform(*spec.pet_tumor_peak)))
            if _place(lesions, cand, 3.0 * s):
                lesions.append(cand)
                break
    for _ in range(n_node):
        for _attempt in range(200):
            r = rng.uniform(*spec.node_radius_mm) * s
            radii, p = shape(r)
            side = rng.choice([-1.0, 1.0])
            center = (
                cx + side * rng.uniform(*spec.node_lateral_mm) * s,
                cy + rng.uniform(-8, 8) * s,
                top - rng.uniform(*spec.node_depth_mm) * s,
            )
            cand = Lesion(NODE, center, radii, p, float(rng.uniform(*spec.pet_node_peak)))
            if _place(lesions, cand, 3.0 * s):
                lesions.append(cand)
                break
    return lesions


def _tissue(anat: dict, spec: PhantomSpec, geom: ImageGeometry):
    """Boolean masks of head, skull shell, neck/torso body and spine on ``geom``."""
    x = geom.axis_coords(0)[:, None, None]
    y = geom.axis_coords(1)[None, :, None]
    z = geom.axis_coords(2)[None, None, :]
    hx, hy, hz = anat["head_center"]
    r = anat["head_radius"]
    d_head = np.sqrt((x - hx) ** 2 + (y - hy) ** 2 + (z - hz) ** 2)
    head = d_head <= r
    skull = head & (d_head > r - anat["skull_thickness"])
    nx, ny = anat["neck_center"]
    ax, ay = anat["neck_semi_axes"]
    neck = (((x - nx) / ax) ** 2 + ((y - ny) / ay) ** 2 <= 1.0) & (z <= hz)
    tx, ty = anat["torso_semi_axes"]
    torso = (((x - nx) / tx) ** 2 + ((y - ny) / ty) ** 2 <= 1.0) & (z <= anat["torso_top_z"])
    sx, sy = anat["spine_center"]
    spine = ((x - sx) ** 2 + (y - sy) ** 2 <= anat["spine_radius"] ** 2) & (z <= hz - 0.5 * r)
    body = (neck | torso) & ~head
    return head, skull, body, spine


def _lesion_window(les: Lesion, geom: ImageGeometry, margin: float):
    """Index slices of ``geom`` covering the lesion bounding box plus margin."""
    sl = []
    for a in range(3):
        lo = (les.center[a] - les.radii[a] - margin - geom.origin[a]) / geom.spacing[a]
        hi = (les.center[a] + les.radii[a] + margin - geom.origin[a]) / geom.spacing[a]
        sl.append(slice(max(int(np.floor(lo)), 0), min(int(np.ceil(hi)) + 1, geom.size[a])))
    return tuple(sl)


def _coords(geom: ImageGeometry, sl):
    x = geom.axis_coords(0)[sl[0]][:, None, None]
    y = geom.axis_coords(1)[sl[1]][None, :, None]
    z = geom.axis_coords(2)[sl[2]][None, None, :]
    return x, y, z


def generate_case(spec: PhantomSpec, index: int) -> PhantomCase:
    """Deterministic case for ``(spec.seed, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    anat = _draw_anatomy(spec, rng)
    lesions = _draw_lesions(spec, anat, rng)
    ct_geom = _grid(spec.extent_mm, spec.ct_spacing)
    pet_geom = _grid(spec.extent_mm, spec.pet_spacing)

    # CT and labels
    head, skull, body, spine = _tissue(anat, spec, ct_geom)
    ct = np.full(ct_geom.size, spec.ct_air, dtype=np.float64)
    ct[body] = spec.ct_soft
    ct[head] = spec.ct_brain
    ct[skull | (spine & body)] = spec.ct_bone
    label = np.zeros(ct_geom.size, dtype=np.uint8)
    for les in lesions:
        sl = _lesion_window(les, ct_geom, 0.0)
        inside = les.rho(*_coords(ct_geom, sl)) <= 1.0
        label[sl][inside] = les.cls
        ct[sl][inside] = spec.ct_tumor if les.cls == TUMOR else spec.ct_node
    ct += rng.normal(0.0, spec.ct_noise, size=ct.shape)

    # PET: smooth lesion uptake on the coarse grid
    head_p, _, body_p, _ = _tissue(anat, spec, pet_geom)
    pet = np.zeros(pet_geom.size, dtype=np.float64)
    pet[body_p] = spec.pet_body
    pet[head_p] = spec.pet_head
    width = 0.08
    for les in lesions:
        sl = _lesion_window(les, pet_geom, 4.0 * max(les.radii) * width + 2 * max(spec.pet_spacing))
        rho = les.rho(*_coords(pet_geom, sl))
        pet[sl] += les.pet_peak * expit((1.0 - rho) / width)
    pet *= 1.0 + rng.normal(0.0, spec.pet_noise, size=pet.shape)
    np.maximum(pet, 0.0, out=pet)

    params = {
        "index": index,
        "anatomy": anat,
        "lesions": [asdict(les) for les in lesions],
        "tumor_count": sum(les.cls == TUMOR for les in lesions),
        "node_count": sum(les.cls == NODE for les in lesions),
    }
    case_id = f"case_{index:03d}"
    return PhantomCase(
        case_id,
        ScalarVolume(ct_geom, ct.astype(np.float32)),
        ScalarVolume(pet_geom, pet.astype(np.float32)),
        LabelVolume(ct_geom, label),
        params,
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def generate_corpus(spec: PhantomSpec, n: int, out_dir: str | os.PathLike, start: int = 0) -> dict:
    """Write ``n`` case directories plus ``manifest.json``; returns the manifest."""
    if n < 1:
        raise ValueError("corpus needs at least one case")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for index in range(start, start + n):
        case = generate_case(spec, index)
        case_dir = out / case.case_id
        case_dir.mkdir(exist_ok=True)
        write_nifti(case.ct, case_dir / "ct.nii.gz")
        write_nifti(case.pet, case_dir / "pet.nii.gz")
        write_nifti(case.label, case_dir / "label.nii.gz")
        rows.append({"case_id": case.case_id, **case.params})
    manifest = _jsonable({"spec": spec.to_dict(), "cases": rows})
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest
