"""AdamW with decoupled weight decay, and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ArgumentError, StateError
from .tensor import Tensor


@dataclass
class AdamWState:
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **hyper) -> "AdamWState":
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adamw_step(params: Mapping[str, Tensor], state: AdamWState, lr_t: float) -> None:
    """One in-place AdamW update; every parameter must hold a gradient."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise StateError(f"adamw_step: missing gradients for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.shape:
            raise StateError(f"moment shape {m.shape} does not match parameter {name} {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        # decoupled decay first, then the bias-corrected Adam direction
        p.data *= 1.0 - lr_t * state.weight_decay
        p.data -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    if total_epochs < 1 or not 0 <= epoch <= total_epochs:
        raise ArgumentError(f"epoch {epoch} outside [0, {total_epochs}]")
    if epoch == total_epochs:
        return 0.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))
