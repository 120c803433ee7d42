"""Catalog of differentiable operators with random small inputs for gradient checks."""

from __future__ import annotations

import numpy as np

from hnseg.autodiff import (
    add,
    batch_norm3d,
    conv3d,
    conv_transpose3d,
    div,
    exp,
    flip,
    log,
    log_softmax_channels,
    mean,
    mul,
    nearest_downsample,
    relu,
    reshape,
    softmax_channels,
    sum_,
)
from hnseg.loss import LossConfig, deep_supervision_loss, dice_ce


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _bn(training):
    def fn(x, gamma, beta):
        c = x.shape[1]
        rm, rv = np.zeros(c), np.ones(c) * 1.5
        return batch_norm3d(x, gamma, beta, rm.astype(x.dtype), rv.astype(x.dtype), training)

    return fn


def cases(rng: np.random.Generator):
    """``(name, fn, inputs)`` triples; inputs are float64 arrays."""
    s = lambda *shape: rng.standard_normal(shape)
    target = rng.integers(0, 3, (2, 4, 4, 4))
    yield "conv3d_k3", lambda x, w, b: conv3d(x, w, b), {"x": s(1, 2, 5, 5, 5), "w": s(3, 2, 3, 3, 3), "b": s(3)}
    yield "conv3d_k3_s2", lambda x, w: conv3d(x, w, stride=2), {"x": s(1, 2, 6, 6, 6), "w": s(2, 2, 3, 3, 3)}
    yield "conv3d_k1", lambda x, w, b: conv3d(x, w, b), {"x": s(2, 3, 3, 4, 2), "w": s(2, 3, 1, 1, 1), "b": s(2)}
    yield "conv_transpose3d", lambda x, w, b: conv_transpose3d(x, w, b), {
        "x": s(1, 3, 2, 3, 2), "w": s(3, 2, 2, 2, 2), "b": s(2)}
    yield "batch_norm3d_train", _bn(True), {"x": s(1, 2, 3, 3, 3), "gamma": s(2), "beta": s(2)}
    yield "batch_norm3d_eval", _bn(False), {"x": s(2, 2, 3, 3, 3), "gamma": s(2), "beta": s(2)}
    yield "relu", lambda x: relu(x), {"x": _away_from_zero(rng, (1, 2, 3, 3, 3))}
    yield "add", lambda x, y: add(x, y), {"x": s(1, 2, 3, 3, 3), "y": s(1, 2, 3, 3, 3)}
    yield "mul", lambda x, y: mul(x, y), {"x": s(1, 2, 3, 3, 3), "y": s(1, 2, 3, 3, 3)}
    yield "div", lambda x, y: div(x, y), {"x": s(2, 3, 4), "y": 1.5 + rng.random((2, 3, 4))}
    yield "exp", lambda x: exp(x), {"x": s(2, 3, 4)}
    yield "log", lambda x: log(x), {"x": 0.5 + rng.random((2, 3, 4))}
    yield "sum_axis", lambda x: sum_(x, (2, 3, 4)), {"x": s(1, 2, 3, 3, 3)}
    yield "mean", lambda x: mean(x), {"x": s(1, 2, 3, 3, 3)}
    yield "reshape", lambda x: reshape(x, (6, 9)), {"x": s(2, 3, 9)}
    yield "flip", lambda x: flip(x, (2, 4)), {"x": s(1, 2, 3, 3, 3)}
    yield "softmax_channels", lambda x: softmax_channels(x), {"x": s(1, 3, 3, 3, 3)}
    yield "log_softmax_channels", lambda x: log_softmax_channels(x), {"x": s(1, 3, 3, 3, 3)}
    yield "nearest_downsample", lambda x: nearest_downsample(x, 2), {"x": s(1, 2, 4, 4, 4)}
    yield "dice_ce", lambda z: dice_ce(z, target), {"z": s(2, 3, 4, 4, 4)}
    yield "dice_ce_no_background", lambda z: dice_ce(z, target, LossConfig(include_background=False)), {
        "z": s(2, 3, 4, 4, 4)}

    full = rng.integers(0, 3, (1, 8, 8, 8))

    def ds(z0, z1, z2):
        return deep_supervision_loss([z0, z1, z2], full)

    yield "deep_supervision_loss", ds, {"z0": s(1, 3, 8, 8, 8), "z1": s(1, 3, 4, 4, 4), "z2": s(1, 3, 2, 2, 2)}


def names() -> list[str]:
    return [c[0] for c in cases(np.random.default_rng(0))]
