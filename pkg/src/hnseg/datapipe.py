"""
Fold splitting, class-biased patch sampling and training augmentation.

Patches are ``[1, 2, p, p, p]`` float32 images (channel 0 CT, 1 PET) with
``[1, p, p, p]`` uint8 targets.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation
from scipy.special import expit, logit

from .errors import ArgumentError
from .volume import read_nifti

BACKGROUND, TUMOR, NODE = 0, 1, 2
# order of SamplerConfig.class_probs
DRAW_ORDER = (TUMOR, NODE, BACKGROUND)


@dataclass(frozen=True)
class SamplerConfig:
    patch_size: tuple[int, int, int] = (32, 32, 32)
    class_probs: tuple[float, float, float] = (0.45, 0.45, 0.1)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        object.__setattr__(self, "class_probs", tuple(float(p) for p in self.class_probs))
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            raise ArgumentError(f"patch_size must be three positive ints, got {self.patch_size}")
        if len(self.class_probs) != 3 or min(self.class_probs) < 0:
            raise ArgumentError("class_probs must be three nonnegative numbers")
        if abs(sum(self.class_probs) - 1.0) > 1e-9:
            raise ArgumentError(f"class_probs must sum to 1, got {sum(self.class_probs)}")


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    affine_prob: float = 0.2
    rotate_deg: float = 15.0
    scale_range: float = 0.1
    intensity_prob: float = 0.2
    intensity_scale: float = 0.1
    intensity_shift: float = 0.1
    noise_std: float = 0.05
    blur_sigma: float = 1.0
    # CT logit span from normalization; intensity changes act on the logit
    ct_logit_span: float = 4.0

    def __post_init__(self):
        for name in ("flip_prob", "affine_prob", "intensity_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ArgumentError(f"{name} must lie in [0, 1]")
        for name in ("rotate_deg", "scale_range", "intensity_scale", "intensity_shift", "noise_std", "blur_sigma"):
            if getattr(self, name) < 0:
                raise ArgumentError(f"{name} must be nonnegative")
        if self.scale_range >= 1:
            raise ArgumentError("scale_range must be below 1")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(flip_prob=0.0, affine_prob=0.0, intensity_prob=0.0)


# ---------------------------------------------------------------------------
# cases and folds
# ---------------------------------------------------------------------------


@dataclass
class CaseRecord:
    case_id: str
    image: np.ndarray  # [2, X, Y, Z] float32
    label: np.ndarray  # [X, Y, Z] uint8
    paths: dict[str, str] = field(default_factory=dict)
    pad_values: tuple[float, float] = (0.0, 0.0)
    foreground: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[0] != 2 or self.image.shape[1:] != self.label.shape:
            raise ArgumentError(f"image {self.image.shape} and label {self.label.shape} are inconsistent")
        flat = self.label.ravel()
        self.foreground = {c: np.flatnonzero(flat == c) for c in (TUMOR, NODE)}

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.label.shape

    def available(self) -> tuple[bool, bool, bool]:
        """Availability of (tumor, node, background) for drawing."""
        return (self.foreground[TUMOR].size > 0, self.foreground[NODE].size > 0, True)

    @classmethod
    def load(cls, case_dir: str | os.PathLike) -> "CaseRecord":
        d = Path(case_dir)
        with open(d / "sidecar.json") as f:
            sidecar = json.load(f)
        paths = {k: str(d / f"{k}.nii.gz") for k in ("ct", "pet", "label")}
        ct = read_nifti(paths["ct"], kind="scalar").values
        pet = read_nifti(paths["pet"], kind="scalar").values
        label = read_nifti(paths["label"], kind="label").labels
        pad = sidecar["pad_values"]
        return cls(sidecar["case_id"], np.stack([ct, pet]), np.asarray(label), paths, (pad["ct"], pad["pet"]))


def split_folds(case_ids: Sequence[str], k: int, seed: int = 0) -> list[list[str]]:
    """Random partition into ``k`` folds whose sizes differ by at most one."""
    ids = sorted(case_ids)
    if len(set(ids)) != len(ids):
        raise ArgumentError("case ids must be unique")
    if not 1 <= k <= len(ids):
        raise ArgumentError(f"need 1 <= k <= {len(ids)} cases, got k={k}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return [sorted(ids[i] for i in part) for part in np.array_split(perm, k)]


def write_folds(folds: Sequence[Sequence[str]], path: str | os.PathLike) -> None:
    mapping = {cid: i for i, fold in enumerate(folds) for cid in fold}
    with open(path, "w") as f:
        json.dump(dict(sorted(mapping.items())), f, indent=1)


def read_folds(path: str | os.PathLike) -> list[list[str]]:
    with open(path) as f:
        mapping = json.load(f)
    k = max(mapping.values()) + 1 if mapping else 0
    return [sorted(c for c, i in mapping.items() if i == f) for f in range(k)]


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


class Patch(NamedTuple):
    image: np.ndarray
    label: np.ndarray
    cls: int
    center: tuple[int, int, int]


def draw_class(available: Sequence[bool], probs: Sequence[float], rng: np.random.Generator) -> int:
    """Draw tumor/node/background; absent classes are dropped and the rest renormalized."""
    p = np.array([pr if ok else 0.0 for pr, ok in zip(probs, available)])
    if p.sum() <= 0:
        return BACKGROUND
    return DRAW_ORDER[int(rng.choice(3, p=p / p.sum()))]


def extract_patch(
    image: np.ndarray, label: np.ndarray, center: Sequence[int], size: Sequence[int], pad_values: Sequence[float]
) -> tuple[np.ndarray, np.ndarray]:
    """Window of ``size`` with voxel ``center`` at index ``size // 2``; outside is padded."""
    shape = label.shape
    lo = [int(c) - s // 2 for c, s in zip(center, size)]
    src, dst = [], []
    for l, s, n in zip(lo, size, shape):
        a, b = max(l, 0), min(l + s, n)
        src.append(slice(a, b))
        dst.append(slice(a - l, b - l))
    img = np.empty((image.shape[0], *size), dtype=np.float32)
    for ch in range(image.shape[0]):
        img[ch] = pad_values[ch]
    lab = np.zeros(tuple(size), dtype=np.uint8)
    if all(d.stop > d.start for d in dst):
        img[(slice(None), *dst)] = image[(slice(None), *src)]
        lab[tuple(dst)] = label[tuple(src)]
    return img, lab


def sample_patch(case: CaseRecord, cfg: SamplerConfig, rng: np.random.Generator) -> Patch:
    cls = draw_class(case.available(), cfg.class_probs, rng)
    if cls == BACKGROUND:
        flat = int(rng.integers(case.label.size))
    else:
        pool = case.foreground[cls]
        flat = int(pool[rng.integers(pool.size)])
    center = tuple(int(i) for i in np.unravel_index(flat, case.shape))
    img, lab = extract_patch(case.image, case.label, center, cfg.patch_size, case.pad_values)
    return Patch(img[None], lab[None], cls, center)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _affine_matrix(cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    angles = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg, size=3)
    rot = Rotation.from_euler("xyz", angles, degrees=True).as_matrix()
    scale = 1.0 + rng.uniform(-cfg.scale_range, cfg.scale_range, size=3)
    return rot @ np.diag(1.0 / scale)


def apply_affine(image: np.ndarray, label: np.ndarray, matrix: np.ndarray, image_fill: float = 0.5):
    """Resample ``[C, X, Y, Z]`` image (linear) and ``[X, Y, Z]`` label (nearest) about the center."""
    center = (np.asarray(label.shape) - 1) / 2.0
    offset = center - matrix @ center
    out = np.empty_like(image)
    for ch in range(image.shape[0]):
        out[ch] = ndimage.affine_transform(
            image[ch].astype(np.float64), matrix, offset=offset, order=1, mode="constant", cval=image_fill
        )
    # edge replication keeps the label set from growing
    lab = ndimage.affine_transform(label, matrix, offset=offset, order=0, mode="nearest")
    return out, lab


def _ct_intensity(ct: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Scale, shift, noise and blur applied to the CT logit, then squashed again."""
    width = 2.0 * cfg.ct_logit_span
    z = logit(np.clip(ct.astype(np.float64), 1e-7, 1 - 1e-7))
    if rng.random() < cfg.intensity_prob:
        z = z * (1.0 + rng.uniform(-cfg.intensity_scale, cfg.intensity_scale))
    if rng.random() < cfg.intensity_prob:
        z = z + rng.uniform(-cfg.intensity_shift, cfg.intensity_shift) * width
    if rng.random() < cfg.intensity_prob:
        z = z + rng.normal(0.0, rng.uniform(0.0, cfg.noise_std) * width, size=z.shape)
    if rng.random() < cfg.intensity_prob:
        z = ndimage.gaussian_filter(z, rng.uniform(0.0, cfg.blur_sigma), mode="nearest")
    return expit(z).astype(np.float32)


def augment(image: np.ndarray, label: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Affine, flips, then CT-only intensity changes. Shapes ``[1,2,p,p,p]`` / ``[1,p,p,p]``."""
    img, lab = image[0], label[0]
    if rng.random() < cfg.affine_prob:
        img, lab = apply_affine(img, lab, _affine_matrix(cfg, rng))
    for axis in range(3):
        if rng.random() < cfg.flip_prob:
            img = np.flip(img, axis=axis + 1)
            lab = np.flip(lab, axis=axis)
    if cfg.intensity_prob > 0:
        ct = _ct_intensity(img[0], cfg, rng)
        img = np.stack([ct, img[1]])
    return np.ascontiguousarray(img, dtype=np.float32)[None], np.ascontiguousarray(lab)[None]


# ---------------------------------------------------------------------------
# patch streams
# ---------------------------------------------------------------------------


def step_rng(seed: int, run: int, fold: int, epoch: int, step: int) -> np.random.Generator:
    """Independent generator per training step so streams do not depend on worker timing."""
    return np.random.default_rng([seed, run, fold, epoch, step])


def training_patch(
    case: CaseRecord, sampler: SamplerConfig, aug: AugmentConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    p = sample_patch(case, sampler, rng)
    return augment(p.image, p.label, aug, rng)


def patch_stream(jobs: Iterable, make: Callable, workers: int = 0):
    """Yield ``make(job)`` in job order; ``workers > 0`` builds patches in a thread pool."""
    if workers <= 0:
        for job in jobs:
            yield make(job)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(make, jobs)
