"""
Whole-volume prediction: Gaussian-blended sliding window, flip TTA, mean
ensembling, mapping back to the CT grid and node post-processing.

A predictor is any callable taking a ``[1, 2, r, r, r]`` float32 array and
returning ``[1, K, r, r, r]`` logits (or probabilities when the window
activation is ``None``).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np
from scipy import ndimage

from .autodiff import load_checkpoint, no_grad
from .errors import ArgumentError, CaseError
from .segresnet import NetworkParams, SegResNetConfig, build, forward
from .volume import ImageGeometry, LabelVolume, ScalarVolume, paste, resample_nearest

Predictor = Callable[[np.ndarray], np.ndarray]

# every subset of the three spatial axes
FLIP_SETS: tuple[tuple[int, ...], ...] = tuple(
    c for r in range(4) for c in itertools.combinations(range(3), r)
)


@dataclass(frozen=True)
class PostprocessConfig:
    enabled: bool = False
    min_volume_mm3: float = 100.0
    min_mean_pet: float = 1.5


@dataclass(frozen=True)
class InferenceConfig:
    roi_size: tuple[int, int, int] = (32, 32, 32)
    overlap: float = 0.5
    sigma_scale: float = 0.125
    tta: bool = True
    postprocess: PostprocessConfig = PostprocessConfig()

    def __post_init__(self):
        object.__setattr__(self, "roi_size", tuple(int(r) for r in self.roi_size))
        if not 0.0 <= self.overlap < 1.0:
            raise ArgumentError(f"overlap must lie in [0, 1), got {self.overlap}")
        if len(self.roi_size) != 3 or min(self.roi_size) < 1:
            raise ArgumentError("roi_size needs three positive components")
        if isinstance(self.postprocess, dict):
            object.__setattr__(self, "postprocess", PostprocessConfig(**self.postprocess))


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-class probabilities ``[K, X, Y, Z]`` on a grid."""

    geometry: ImageGeometry
    probs: np.ndarray

    def __post_init__(self):
        if self.probs.ndim != 4 or self.probs.shape[1:] != self.geometry.size:
            raise ArgumentError(f"probs {self.probs.shape} do not match geometry {self.geometry.size}")

    @property
    def n_classes(self) -> int:
        return self.probs.shape[0]

    def channel(self, c: int) -> ScalarVolume:
        return ScalarVolume(self.geometry, self.probs[c])

    def argmax(self) -> LabelVolume:
        # np.argmax returns the first maximum, so ties go to the lower class
        return LabelVolume(self.geometry, np.argmax(self.probs, axis=0).astype(np.uint8))


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------


class NetPredictor:
    """Eval-mode SegResNet returning full-resolution logits."""

    def __init__(self, net: NetworkParams):
        self.net = net

    def __call__(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return forward(self.net, x, mode="eval")[0].data

    @classmethod
    def from_checkpoint(cls, path) -> "NetPredictor":
        ck = load_checkpoint(path)
        net = build(SegResNetConfig.from_arch(ck.config), seed=0)
        net.load_arrays(ck.params, ck.buffers)
        return cls(net)


# ---------------------------------------------------------------------------
# sliding window
# ---------------------------------------------------------------------------


def gaussian_importance(roi: Sequence[int], sigma_scale: float = 0.125) -> np.ndarray:
    axes = []
    for r in roi:
        c = (r - 1) / 2.0
        sigma = max(sigma_scale * r, 1e-6)
        axes.append(np.exp(-0.5 * ((np.arange(r) - c) / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    w /= w.max()
    # keep every weight positive so corners are still normalized
    return np.maximum(w, 1e-6)


def window_starts(size: int, roi: int, overlap: float) -> list[int]:
    if size <= roi:
        return [0]
    stride = max(1, int(roi * (1.0 - overlap)))
    starts = list(range(0, size - roi + 1, stride))
    if starts[-1] != size - roi:
        starts.append(size - roi)
    return starts


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def sliding_window(
    predict: Predictor,
    image: np.ndarray,
    cfg: InferenceConfig,
    geometry: ImageGeometry | None = None,
    pad_values: Sequence[float] | None = None,
    activation: Literal["softmax"] | None = "softmax",
) -> ProbabilityMap:
    """Tile ``image`` (``[1, C, X, Y, Z]``) with overlapping windows and blend."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 5 or image.shape[0] != 1:
        raise ArgumentError(f"expected image [1, C, X, Y, Z], got {image.shape}")
    spatial = image.shape[2:]
    roi = cfg.roi_size
    padded = tuple(max(s, r) for s, r in zip(spatial, roi))
    x = image
    if padded != spatial:
        widths = [(0, 0), (0, 0)] + [(0, p - s) for p, s in zip(padded, spatial)]
        if pad_values is None:
            x = np.pad(image, widths, mode="edge")
        else:
            x = np.concatenate(
                [np.pad(image[:, c : c + 1], widths, constant_values=v) for c, v in enumerate(pad_values)], axis=1
            )

    weight = gaussian_importance(roi, cfg.sigma_scale)
    acc = None
    norm = np.zeros(padded, dtype=np.float64)
    grids = [window_starts(p, r, cfg.overlap) for p, r in zip(padded, roi)]
    for i, j, k in itertools.product(*grids):
        sl = (slice(i, i + roi[0]), slice(j, j + roi[1]), slice(k, k + roi[2]))
        out = np.asarray(predict(np.ascontiguousarray(x[(slice(None), slice(None), *sl)])), dtype=np.float64)[0]
        if activation == "softmax":
            out = _softmax(out)
        if acc is None:
            acc = np.zeros((out.shape[0], *padded), dtype=np.float64)
        acc[(slice(None), *sl)] += out * weight
        norm[sl] += weight
    probs = (acc / norm)[(slice(None), *(slice(0, s) for s in spatial))]
    geometry = geometry or ImageGeometry(spatial, (1.0, 1.0, 1.0))
    return ProbabilityMap(geometry, probs.astype(np.float32))


def flip_spatial(arr: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    """Flip the last three axes listed in ``axes`` (0, 1, 2 = x, y, z)."""
    if not axes:
        return arr
    return np.flip(arr, axis=tuple(arr.ndim - 3 + a for a in axes))


def tta_predict(
    predict: Predictor,
    image: np.ndarray,
    cfg: InferenceConfig,
    geometry: ImageGeometry | None = None,
    pad_values: Sequence[float] | None = None,
    activation: Literal["softmax"] | None = "softmax",
) -> ProbabilityMap:
    """Average of the 8 flip-conjugated sliding-window predictions."""
    acc = None
    for axes in FLIP_SETS:
        flipped = np.ascontiguousarray(flip_spatial(image, axes))
        pm = sliding_window(predict, flipped, cfg, geometry, pad_values, activation)
        p = flip_spatial(pm.probs, axes).astype(np.float64)
        acc = p if acc is None else acc + p
    return ProbabilityMap(pm.geometry, (acc / len(FLIP_SETS)).astype(np.float32))


def ensemble_mean(maps: Sequence[ProbabilityMap]) -> ProbabilityMap:
    if not maps:
        raise ArgumentError("ensemble needs at least one probability map")
    first = maps[0]
    for m in maps[1:]:
        if not m.geometry.isclose(first.geometry) or m.probs.shape != first.probs.shape:
            raise ArgumentError("ensemble members must share geometry and class count")
    if len(maps) == 1:
        return first
    acc = np.zeros(first.probs.shape, dtype=np.float64)
    for m in maps:
        acc += m.probs
    return ProbabilityMap(first.geometry, (acc / len(maps)).astype(np.float32))


def predict_volume(
    predictors: Sequence[Predictor],
    image: np.ndarray,
    cfg: InferenceConfig,
    geometry: ImageGeometry | None = None,
    pad_values: Sequence[float] | None = None,
) -> ProbabilityMap:
    """Per-model (TTA or plain) prediction followed by the mean ensemble."""
    run = tta_predict if cfg.tta else sliding_window
    return ensemble_mean([run(p, image, cfg, geometry, pad_values) for p in predictors])


# ---------------------------------------------------------------------------
# post-processing and export
# ---------------------------------------------------------------------------


def postprocess_nodes(mask: LabelVolume, pet: ScalarVolume, cfg: PostprocessConfig) -> LabelVolume:
    """Drop 26-connected node components that are too small or too faint on PET."""
    if not mask.geometry.isclose(pet.geometry):
        raise CaseError("post-processing needs the mask and PET on the same grid")
    labels = mask.labels.copy()
    comp, n = ndimage.label(labels == 2, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        return mask
    idx = np.arange(1, n + 1)
    counts = ndimage.sum_labels(np.ones_like(comp), comp, idx)
    mean_pet = ndimage.mean(pet.values.astype(np.float64), comp, idx)
    volume = counts * mask.geometry.voxel_volume
    drop = idx[(volume < cfg.min_volume_mm3) | (mean_pet < cfg.min_mean_pet)]
    labels[np.isin(comp, drop)] = 0
    return LabelVolume(mask.geometry, labels)


def finalize(
    pmap: ProbabilityMap,
    sidecar: dict,
    ct_geometry: ImageGeometry | None = None,
    pet_raw: ScalarVolume | None = None,
    post: PostprocessConfig | None = None,
) -> LabelVolume:
    """Argmax on the crop grid, paste into the resampled frame, resample to CT."""
    crop_geom = ImageGeometry.from_dict(sidecar["crop_geometry"])
    if not pmap.geometry.isclose(crop_geom, tol=1e-4):
        raise CaseError(f"case {sidecar.get('case_id', '?')}: probability map is not on the crop grid")
    mask = pmap.argmax()
    if post is not None and post.enabled:
        if pet_raw is None:
            raise ArgumentError("post-processing requires the raw PET crop")
        mask = postprocess_nodes(mask, pet_raw, post)
    frame = ImageGeometry.from_dict(sidecar["frame_geometry"])
    full = paste(mask, frame, fill=0)
    target = ct_geometry or ImageGeometry.from_dict(sidecar["ct_geometry"])
    return resample_nearest(full, target)
