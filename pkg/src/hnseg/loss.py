"""Soft Dice + cross-entropy, and its deep-supervision weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, log_softmax_channels, mean, mul, nearest_downsample, softmax_channels, sum_
from .autodiff.tensor import make_node
from .errors import ArgumentError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    dice_smooth: float = 1e-5
    include_background: bool = True

    def __post_init__(self):
        if not self.dice_smooth > 0:
            raise ArgumentError("dice_smooth must be > 0")

    def ds_weights(self, levels: int) -> list[float]:
        return [2.0**-i for i in range(levels)]


def one_hot(target: np.ndarray, n_classes: int, dtype) -> np.ndarray:
    """``[N, D, H, W]`` integer labels -> ``[N, C, D, H, W]`` indicator array."""
    target = np.asarray(target)
    if target.size and (target.min() < 0 or target.max() >= n_classes):
        raise ArgumentError(f"target labels must lie in [0, {n_classes - 1}]")
    if not np.issubdtype(target.dtype, np.integer):
        raise ArgumentError("target must be an integer label array")
    classes = np.arange(n_classes).reshape(1, n_classes, *([1] * (target.ndim - 1)))
    return (target[:, None] == classes).astype(dtype)


def dice_ce(logits: Tensor, target: np.ndarray, cfg: LossConfig = LossConfig(), parts: dict | None = None) -> Tensor:
    """Mean soft-Dice loss over (sample, class) plus voxel-mean cross-entropy.

    ``parts``, when given, receives the float values of the two terms.
    """
    target = np.asarray(target)
    if logits.ndim != 5 or target.shape != (logits.shape[0], *logits.shape[2:]):
        raise ShapeError(f"logits {logits.shape} and target {target.shape} are inconsistent")
    n_classes = logits.shape[1]
    g = one_hot(target, n_classes, logits.dtype)
    spatial = (2, 3, 4)
    s = cfg.dice_smooth

    p = softmax_channels(logits)
    if not cfg.include_background:
        p = _drop_background(p)
        g = g[:, 1:]
    inter = sum_(mul(p, g), spatial)
    denom = sum_(p, spatial) + g.sum(axis=spatial)
    dice = 1.0 - (2.0 * inter + s) / (denom + s)
    dice_loss = mean(dice)

    logp = log_softmax_channels(logits)
    ce = -mean(sum_(mul(logp, one_hot(target, n_classes, logits.dtype)), 1))
    if parts is not None:
        parts["dice"] = dice_loss.item()
        parts["ce"] = ce.item()
    return dice_loss + ce


def _drop_background(p: Tensor) -> Tensor:
    shape = p.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, 1:] = g
        return (full,)

    return make_node(np.ascontiguousarray(p.data[:, 1:]), (p,), bw, "drop_background")


def deep_supervision_loss(
    preds: Sequence[Tensor], target: np.ndarray, cfg: LossConfig = LossConfig(), parts: dict | None = None
) -> Tensor:
    """``sum_i 2^-i * dice_ce(preds[i], nearest_downsample(target, 2^i))``."""
    if not preds:
        raise ArgumentError("need at least one prediction")
    target = np.asarray(target)
    full = np.asarray(target.shape[1:])
    total = None
    for i, (pred, w) in enumerate(zip(preds, cfg.ds_weights(len(preds)))):
        factor = 2**i
        if tuple(np.asarray(pred.shape[2:]) * factor) != tuple(full):
            raise ShapeError(f"level {i}: prediction {pred.shape[2:]} is not target {tuple(full)} / {factor}")
        term = dice_ce(pred, nearest_downsample(target, factor), cfg)
        if parts is not None:
            parts[f"level{i}"] = term.item()
        term = term * w
        total = term if total is None else total + term
    if parts is not None:
        parts["total"] = total.item()
    return total
