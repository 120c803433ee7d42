"""
SegResNet encoder-decoder with deep-supervision heads.

Encoder stage ``s`` runs at width ``init_filters * 2**s`` and spatial scale
``1 / 2**s``; every stage after the first opens with a stride-2 3x3x3 conv.
Residual blocks are pre-activation: ``x + conv(relu(bn(conv(relu(bn(x))))))``.
Each decoder level upsamples with norm -> relu -> 2x2x2 transposed conv, adds
the matching encoder output and runs one residual block. Heads are 1x1x1
convs producing logits; softmax is left to the loss and inference code.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .autodiff import Tensor, batch_norm3d, conv3d, conv_transpose3d, relu
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class SegResNetConfig:
    in_channels: int = 2
    out_channels: int = 3
    init_filters: int = 32
    blocks_down: tuple[int, ...] = (1, 2, 2, 4, 4, 4)
    ds_levels: int = 5
    patch_size: tuple[int, int, int] = (192, 192, 192)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "blocks_down", tuple(int(b) for b in self.blocks_down))
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        if len(self.blocks_down) < 2:
            raise ConfigError("blocks_down needs at least two stages (no decoder otherwise)")
        if min(self.blocks_down) < 1:
            raise ConfigError("every encoder stage needs at least one block")
        if not 1 <= self.ds_levels <= len(self.blocks_down) - 1:
            raise ConfigError(f"ds_levels must lie in [1, {len(self.blocks_down) - 1}], got {self.ds_levels}")
        if self.init_filters < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if len(self.patch_size) != 3:
            raise ConfigError("patch_size needs three components")
        check_divisible(self.patch_size, self.n_stages, ConfigError)

    @property
    def n_stages(self) -> int:
        return len(self.blocks_down)

    def width(self, level: int) -> int:
        return self.init_filters * 2**level

    def arch_dict(self) -> dict:
        """The architecture-defining fields, used for checkpoint hashing."""
        d = asdict(self)
        d.pop("patch_size")
        d["blocks_down"] = list(d["blocks_down"])
        return d

    @classmethod
    def from_arch(cls, arch: dict) -> "SegResNetConfig":
        """Rebuild from ``arch_dict`` output; the patch hint is set to the smallest valid size."""
        n = len(arch["blocks_down"])
        return cls(**arch, patch_size=(2 ** (n - 1),) * 3)


def check_divisible(spatial, n_stages: int, exc=ShapeError) -> None:
    div = 2 ** (n_stages - 1)
    if any(int(s) % div for s in spatial):
        raise exc(f"spatial size {tuple(spatial)} must be divisible by {div}")


@dataclass
class NetworkParams:
    config: SegResNetConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def count(self) -> int:
        return sum(p.size for p in self.params.values())

    def load_arrays(self, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]) -> None:
        if set(params) != set(self.params) or set(buffers) != set(self.buffers):
            raise ConfigError("checkpoint tensors do not match the network layout")
        for name, arr in params.items():
            if arr.shape != self.params[name].shape:
                raise ConfigError(f"{name}: shape {arr.shape} != {self.params[name].shape}")
            self.params[name].data[...] = arr
        for name, arr in buffers.items():
            self.buffers[name][...] = arr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


class _Builder:
    def __init__(self, net: NetworkParams, rng: np.random.Generator):
        self.net = net
        self.rng = rng

    def _param(self, name, data):
        self.net.params[name] = Tensor(data, requires_grad=True, name=name)

    def conv(self, name, cin, cout, k, bias=False):
        bound = np.sqrt(6.0 / (cin * k**3))
        self._param(f"{name}.w", self.rng.uniform(-bound, bound, (cout, cin, k, k, k)))
        if bias:
            self._param(f"{name}.b", np.zeros(cout))

    def conv_t(self, name, cin, cout, k=2):
        bound = np.sqrt(6.0 / cin)
        self._param(f"{name}.w", self.rng.uniform(-bound, bound, (cin, cout, k, k, k)))

    def norm(self, name, c):
        self._param(f"{name}.gamma", np.ones(c))
        self._param(f"{name}.beta", np.zeros(c))
        self.net.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=np.float32)
        self.net.buffers[f"{name}.running_var"] = np.ones(c, dtype=np.float32)

    def block(self, name, c):
        self.norm(f"{name}.bn1", c)
        self.conv(f"{name}.conv1", c, c, 3)
        self.norm(f"{name}.bn2", c)
        self.conv(f"{name}.conv2", c, c, 3)


def build(config: SegResNetConfig, seed: int = 0) -> NetworkParams:
    net = NetworkParams(config)
    b = _Builder(net, np.random.default_rng(seed))
    f = config.init_filters
    b.conv("stem", config.in_channels, f, 3)
    for s, nblocks in enumerate(config.blocks_down):
        if s > 0:
            b.conv(f"enc{s}.down", config.width(s - 1), config.width(s), 3)
        for i in range(nblocks):
            b.block(f"enc{s}.block{i}", config.width(s))
    for level in reversed(range(config.n_stages - 1)):
        b.norm(f"dec{level}.up.bn", config.width(level + 1))
        b.conv_t(f"dec{level}.up", config.width(level + 1), config.width(level))
        b.block(f"dec{level}.block", config.width(level))
    for i in range(config.ds_levels):
        b.conv(f"head{i}", config.width(i), config.out_channels, 1, bias=True)
    return net


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _bn(net: NetworkParams, name: str, x: Tensor, training: bool) -> Tensor:
    p, cfg = net.params, net.config
    return batch_norm3d(
        x,
        p[f"{name}.gamma"],
        p[f"{name}.beta"],
        net.buffers[f"{name}.running_mean"],
        net.buffers[f"{name}.running_var"],
        training,
        momentum=cfg.bn_momentum,
        eps=cfg.bn_eps,
    )


def _block(net: NetworkParams, name: str, x: Tensor, training: bool) -> Tensor:
    p = net.params
    h = conv3d(relu(_bn(net, f"{name}.bn1", x, training)), p[f"{name}.conv1.w"])
    h = conv3d(relu(_bn(net, f"{name}.bn2", h, training)), p[f"{name}.conv2.w"])
    return h + x


def forward(net: NetworkParams, x, mode: Literal["train", "eval"] = "train") -> list[Tensor]:
    """Logits per deep-supervision level; eval mode returns only full resolution."""
    cfg = net.config
    p = net.params
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected input [N, {cfg.in_channels}, D, H, W], got {x.shape}")
    check_divisible(x.shape[2:], cfg.n_stages)
    training = mode == "train"

    h = conv3d(x, p["stem.w"])
    skips = []
    for s, nblocks in enumerate(cfg.blocks_down):
        if s > 0:
            h = conv3d(h, p[f"enc{s}.down.w"], stride=2)
        for i in range(nblocks):
            h = _block(net, f"enc{s}.block{i}", h, training)
        skips.append(h)

    n_heads = cfg.ds_levels if training else 1
    outs: dict[int, Tensor] = {}
    for level in reversed(range(cfg.n_stages - 1)):
        u = relu(_bn(net, f"dec{level}.up.bn", h, training))
        u = conv_transpose3d(u, p[f"dec{level}.up.w"]) + skips[level]
        h = _block(net, f"dec{level}.block", u, training)
        if level < n_heads:
            outs[level] = conv3d(h, p[f"head{level}.w"], p[f"head{level}.b"])
    return [outs[i] for i in range(n_heads)]


# ---------------------------------------------------------------------------
# description
# ---------------------------------------------------------------------------


def layer_table(config: SegResNetConfig, spatial: tuple[int, int, int] | None = None) -> list[dict]:
    """One row per conv-like layer with output shape and parameter count."""
    spatial = tuple(spatial or config.patch_size)
    rows = []

    def row(name, kind, cin, cout, k, stride, level, params):
        shape = tuple(s // 2**level for s in spatial)
        rows.append(
            {"name": name, "kind": kind, "in": cin, "out": cout, "kernel": k, "stride": stride,
             "shape": (cout, *shape), "params": params}
        )

    def conv_params(cin, cout, k, bias=False):
        return cin * cout * k**3 + (cout if bias else 0)

    f = config.init_filters
    row("stem", "conv3", config.in_channels, f, 3, 1, 0, conv_params(config.in_channels, f, 3))
    for s, nblocks in enumerate(config.blocks_down):
        c = config.width(s)
        if s > 0:
            row(f"enc{s}.down", "conv3/s2", config.width(s - 1), c, 3, 2, s, conv_params(config.width(s - 1), c, 3))
        for i in range(nblocks):
            row(f"enc{s}.block{i}", "resblock", c, c, 3, 1, s, 2 * (2 * c) + 2 * conv_params(c, c, 3))
    for level in reversed(range(config.n_stages - 1)):
        cin, c = config.width(level + 1), config.width(level)
        row(f"dec{level}.up", "bn+convT2", cin, c, 2, 2, level, 2 * cin + cin * c * 8)
        row(f"dec{level}.block", "resblock", c, c, 3, 1, level, 2 * (2 * c) + 2 * conv_params(c, c, 3))
    for i in range(config.ds_levels):
        c = config.width(i)
        row(f"head{i}", "conv1", c, config.out_channels, 1, 1, i, conv_params(c, config.out_channels, 1, bias=True))
    return rows
