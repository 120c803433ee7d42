"""
One serializable record for every tunable, with ``desk`` and ``paper`` presets.

Configs are JSON. Loading rejects unknown keys; a config file is an overlay
on its preset, so only the fields that differ need to be written.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Any

from .datapipe import AugmentConfig, SamplerConfig
from .errors import ConfigError, HNSegError
from .inference import InferenceConfig, PostprocessConfig
from .loss import LossConfig
from .phantom import PhantomSpec
from .preprocess import CropHeuristicConfig, NormalizationConfig
from .segresnet import SegResNetConfig

PRESETS = ("desk", "paper")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    # 0 means one patch per training case per epoch
    steps_per_epoch: int = 0
    batch_size: int = 1
    grad_accum: int = 1
    lr0: float = 2e-4
    weight_decay: float = 1e-5
    val_every: int = 5
    workers: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr0 >= 0:
            raise ConfigError("lr0 must be nonnegative")
        if self.batch_size < 1 or self.grad_accum < 1 or self.val_every < 1 or self.steps_per_epoch < 0:
            raise ConfigError("batch_size, grad_accum and val_every must be >= 1")


@dataclass(frozen=True)
class CrossvalConfig:
    folds: int = 5
    runs: int = 3
    # cases kept out of every fold for the submission-style comparison
    test_holdout: int = 0
    with_postprocess: bool = True

    def __post_init__(self):
        if self.folds < 1 or self.runs < 1 or self.test_holdout < 0:
            raise ConfigError("folds and runs must be >= 1, test_holdout >= 0")

    @property
    def ensemble_size(self) -> int:
        return self.folds * self.runs


@dataclass(frozen=True)
class PipelineConfig:
    preset: str = "desk"
    seed: int = 0
    spacing: tuple[float, float, float] = (3.0, 3.0, 3.0)
    crop: CropHeuristicConfig = CropHeuristicConfig()
    normalization: NormalizationConfig = NormalizationConfig()
    network: SegResNetConfig = SegResNetConfig()
    loss: LossConfig = LossConfig()
    sampler: SamplerConfig = SamplerConfig()
    augment: AugmentConfig = AugmentConfig()
    train: TrainConfig = TrainConfig()
    inference: InferenceConfig = InferenceConfig()
    crossval: CrossvalConfig = CrossvalConfig()
    phantom: PhantomSpec = PhantomSpec()

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigError("spacing needs three positive components")
        if self.sampler.patch_size != self.network.patch_size:
            raise ConfigError("sampler.patch_size must equal network.patch_size")
        if self.inference.roi_size != self.network.patch_size:
            raise ConfigError("inference.roi_size must equal network.patch_size")
        if self.augment.ct_logit_span != self.normalization.ct_logit_span:
            raise ConfigError("augment.ct_logit_span must equal normalization.ct_logit_span")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def desk_preset() -> PipelineConfig:
    patch = (32, 32, 32)
    return PipelineConfig(
        preset="desk",
        spacing=(3.0, 3.0, 3.0),
        crop=CropHeuristicConfig(box_xy_mm=96.0, box_z_mm=144.0),
        network=SegResNetConfig(init_filters=8, blocks_down=(1, 2, 2, 4), ds_levels=3, patch_size=patch),
        sampler=SamplerConfig(patch_size=patch),
        train=TrainConfig(epochs=40, lr0=2e-3, val_every=5),
        inference=InferenceConfig(roi_size=patch, tta=True),
        crossval=CrossvalConfig(folds=2, runs=1, test_holdout=5),
        phantom=PhantomSpec(),
    )


def paper_preset() -> PipelineConfig:
    patch = (192, 192, 192)
    return PipelineConfig(
        preset="paper",
        spacing=(1.0, 1.0, 1.0),
        crop=CropHeuristicConfig(box_xy_mm=200.0, box_z_mm=310.0),
        network=SegResNetConfig(init_filters=32, blocks_down=(1, 2, 2, 4, 4, 4), ds_levels=5, patch_size=patch),
        sampler=SamplerConfig(patch_size=patch, class_probs=(0.45, 0.45, 0.1)),
        train=TrainConfig(epochs=300, lr0=2e-4, weight_decay=1e-5, batch_size=1, val_every=10),
        inference=InferenceConfig(roi_size=patch, tta=True),
        crossval=CrossvalConfig(folds=5, runs=3),
        phantom=PhantomSpec(
            extent_mm=(256.0, 256.0, 512.0), ct_spacing=(1.0, 1.0, 3.0), pet_spacing=(4.0, 4.0, 4.0), anatomy_scale=2.0
        ),
    )


def preset(name: str) -> PipelineConfig:
    if name == "desk":
        return desk_preset()
    if name == "paper":
        return paper_preset()
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, path) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, path) for a, v in zip(args, value))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def _from_dict(cls, data: dict, path: str = "", base=None):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        tp = hints[name]
        if base is not None and is_dataclass(tp) and isinstance(value, dict):
            kwargs[name] = _from_dict(tp, value, sub, getattr(base, name))
        else:
            kwargs[name] = _coerce(tp, value, sub)
    try:
        return replace(base, **kwargs) if base is not None else cls(**kwargs)
    except HNSegError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: dict, preset_name: str | None = None) -> PipelineConfig:
    """Overlay ``data`` on its preset (``data['preset']``, else ``preset_name``, else desk)."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    name = data.get("preset", preset_name or "desk")
    if not isinstance(name, str):
        raise ConfigError("preset must be a string")
    return _from_dict(PipelineConfig, data, base=preset(name))


def load(path: str | os.PathLike, preset_name: str | None = None) -> PipelineConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data, preset_name)


def dump(cfg: PipelineConfig, path: str | os.PathLike) -> None:
    with open(path, "w") as f:
        f.write(cfg.dumps() + "\n")


def loads(text: str) -> PipelineConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON ({exc})") from exc
    return from_dict(data)


def arch_hash(cfg: PipelineConfig) -> str:
    from .autodiff import config_hash

    return config_hash(cfg.network.arch_dict())


def describe_constants(cfg: PipelineConfig) -> dict[str, Any]:
    """The headline constants of a preset, in a fixed order."""
    n = cfg.network
    return {
        "preset": cfg.preset,
        "spacing_mm": list(cfg.spacing),
        "crop_box_mm": [cfg.crop.box_xy_mm, cfg.crop.box_xy_mm, cfg.crop.box_z_mm],
        "ct_window": list(cfg.normalization.ct_range),
        "ct_logit_span": cfg.normalization.ct_logit_span,
        "in_channels": n.in_channels,
        "out_channels": n.out_channels,
        "init_filters": n.init_filters,
        "blocks_down": list(n.blocks_down),
        "deep_supervision_levels": n.ds_levels,
        "deep_supervision_weights": LossConfig().ds_weights(n.ds_levels),
        "patch_size": list(cfg.sampler.patch_size),
        "class_probs_tumor_node_background": list(cfg.sampler.class_probs),
        "optimizer": "AdamW",
        "lr0": cfg.train.lr0,
        "lr_schedule": "cosine to 0",
        "weight_decay": cfg.train.weight_decay,
        "epochs": cfg.train.epochs,
        "batch_size": cfg.train.batch_size,
        "folds": cfg.crossval.folds,
        "runs": cfg.crossval.runs,
        "ensemble_models": cfg.crossval.ensemble_size,
        "tta_flips": 8 if cfg.inference.tta else 1,
        "sliding_window_overlap": cfg.inference.overlap,
    }
