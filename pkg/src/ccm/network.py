"""Conditional U-Net denoiser.

The noisy target and the condition are concatenated channel-wise (noisy
target first) into a 2C-channel input; the net returns C channels. The noise
level enters through sinusoidal features of ``0.25 * ln(t)`` followed by a
two-layer perceptron whose output is projected into every residual block.

Parameter names (``D`` = down stage, ``U`` = up stage, ``b`` = block)::

    time.lin1.{weight,bias}  time.lin2.{weight,bias}
    conv_in.{weight,bias}
    down{D}.res{b}.{conv1,conv2,temb,skip}.{weight,bias}
    down{D}.res{b}.{norm1,norm2}.{gamma,beta}
    mid.res0.*                       (same layout as a down block)
    up{U}.res{b}.*                   (same layout as a down block)
    out.norm.{gamma,beta}  out.conv.{weight,bias}

``skip`` is present only where a block changes its channel count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

Parameters = dict[str, Tensor]


@dataclass(frozen=True)
class UNetConfig:
    out_channels: int = 3
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    depth: int = 1
    time_embed_dim: int = 64
    # noisy input is divided by sqrt(t^2 + sigma_data^2) before the first conv
    sigma_data: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        if min(self.out_channels, self.base_width, self.depth, self.time_embed_dim) < 1:
            raise ValueError(f"all widths must be positive: {self}")
        if not self.channel_mults or min(self.channel_mults) < 1:
            raise ValueError(f"channel_mults must be non-empty and positive: {self.channel_mults}")
        if self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim must be even, got {self.time_embed_dim}")

    @property
    def in_channels(self) -> int:
        return 2 * self.out_channels

    @property
    def stages(self) -> int:
        return len(self.channel_mults)

    def check_extent(self, h: int, w: int) -> None:
        f = 2 ** (self.stages - 1)
        if h % f or w % f:
            raise ShapeError(
                f"image extent {h}x{w} not divisible by {f} "
                f"(network has {self.stages} stages)")


def groups_for(channels: int) -> int:
    g = min(8, channels)
    while channels % g:
        g -= 1
    return g


@dataclass
class _Block:
    name: str
    cin: int
    cout: int


@dataclass
class _Plan:
    down: list[list[_Block]] = field(default_factory=list)
    mid: _Block | None = None
    up: list[list[_Block]] = field(default_factory=list)


def _plan(cfg: UNetConfig) -> _Plan:
    plan = _Plan()
    widths = [cfg.base_width * m for m in cfg.channel_mults]
    skips = []
    ch = cfg.base_width
    for d, width in enumerate(widths):
        stage = []
        for b in range(cfg.depth):
            stage.append(_Block(f"down{d}.res{b}", ch, width))
            ch = width
            skips.append(ch)
        plan.down.append(stage)
    plan.mid = _Block("mid.res0", ch, ch)
    for u in reversed(range(len(widths))):
        stage = []
        for b in range(cfg.depth):
            stage.append(_Block(f"up{u}.res{b}", ch + skips.pop(), widths[u]))
            ch = widths[u]
        plan.up.append(stage)
    return plan


def init(cfg: UNetConfig, seed: int, dtype=np.float32) -> Parameters:
    """Fan-in scaled normal weights, zero biases, zero output convolution."""
    rng = np.random.default_rng(seed)
    params: Parameters = {}

    def dense(name, shape):
        fan_in = int(np.prod(shape[1:]))
        params[name + ".weight"] = rng.standard_normal(shape) / math.sqrt(fan_in)
        params[name + ".bias"] = np.zeros(shape[0])

    def norm(name, ch):
        params[name + ".gamma"] = np.ones(ch)
        params[name + ".beta"] = np.zeros(ch)

    e = cfg.time_embed_dim
    dense("time.lin1", (e, e))
    dense("time.lin2", (e, e))
    dense("conv_in", (cfg.base_width, cfg.in_channels, 3, 3))

    plan = _plan(cfg)
    for blk in [b for st in plan.down for b in st] + [plan.mid] + [b for st in plan.up for b in st]:
        dense(blk.name + ".conv1", (blk.cout, blk.cin, 3, 3))
        norm(blk.name + ".norm1", blk.cout)
        dense(blk.name + ".temb", (blk.cout, e))
        dense(blk.name + ".conv2", (blk.cout, blk.cout, 3, 3))
        norm(blk.name + ".norm2", blk.cout)
        if blk.cin != blk.cout:
            dense(blk.name + ".skip", (blk.cout, blk.cin, 1, 1))

    norm("out.norm", cfg.base_width)
    params["out.conv.weight"] = np.zeros((cfg.out_channels, cfg.base_width, 3, 3))
    params["out.conv.bias"] = np.zeros(cfg.out_channels)
    return {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in params.items()}


def param_shapes(cfg: UNetConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init(cfg, 0).items()}


def time_embed(t, dim: int, dtype=np.float32) -> Tensor:
    """Sinusoidal features of 0.25 * ln(t); shape (dim,) or (N, dim)."""
    if dim % 2:
        raise ValueError(f"time_embed needs an even dim, got {dim}")
    ta = np.asarray(t, dtype=np.float64)
    if np.any(ta <= 0):
        raise ValueError(f"time_embed needs t > 0, got {t}")
    return T.sinusoidal_embedding(0.25 * np.log(ta), dim, dtype=dtype)


def _res_block(p: Parameters, blk: _Block, x: Tensor, temb: Tensor) -> Tensor:
    n = blk.name
    h = T.conv2d(x, p[n + ".conv1.weight"], p[n + ".conv1.bias"])
    h = T.group_norm(h, p[n + ".norm1.gamma"], p[n + ".norm1.beta"], groups_for(blk.cout))
    proj = T.linear(temb, p[n + ".temb.weight"], p[n + ".temb.bias"])
    h = T.add(h, T.reshape(proj, proj.shape + (1, 1)))
    h = T.silu(h)
    h = T.conv2d(h, p[n + ".conv2.weight"], p[n + ".conv2.bias"])
    h = T.group_norm(h, p[n + ".norm2.gamma"], p[n + ".norm2.beta"], groups_for(blk.cout))
    h = T.silu(h)
    if blk.cin != blk.cout:
        x = T.conv2d(x, p[n + ".skip.weight"], p[n + ".skip.bias"])
    return T.add(h, x)


def forward(cfg: UNetConfig, params: Parameters, r_noisy, v, t) -> Tensor:
    """G(r_noisy, v, t) for C×H×W inputs or N×C×H×W batches.

    ``t`` is a scalar or one level per batch element.
    """
    r_noisy = T.as_tensor(r_noisy)
    v = T.as_tensor(v)
    if r_noisy.shape != v.shape:
        raise ShapeError(f"forward: noisy target {r_noisy.shape} and condition {v.shape} differ")
    single = r_noisy.ndim == 3
    if single:
        r_noisy = T.reshape(r_noisy, (1,) + r_noisy.shape)
        v = T.reshape(v, (1,) + v.shape)
    if r_noisy.ndim != 4 or r_noisy.shape[1] != cfg.out_channels:
        raise ShapeError(
            f"forward: expected {cfg.out_channels}-channel images, got {r_noisy.shape}")
    n = r_noisy.shape[0]
    cfg.check_extent(*r_noisy.shape[2:])
    dtype = params["conv_in.weight"].dtype

    ta = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    c_in = (1.0 / np.sqrt(ta * ta + cfg.sigma_data ** 2)).astype(dtype).reshape(n, 1, 1, 1)
    x = T.concat([T.mul(r_noisy, Tensor(c_in)), v], axis=1)

    p = params
    temb = time_embed(ta, cfg.time_embed_dim, dtype=dtype)
    temb = T.silu(T.linear(temb, p["time.lin1.weight"], p["time.lin1.bias"]))
    temb = T.silu(T.linear(temb, p["time.lin2.weight"], p["time.lin2.bias"]))

    plan = _plan(cfg)
    h = T.conv2d(x, p["conv_in.weight"], p["conv_in.bias"])
    skips = []
    for d, stage in enumerate(plan.down):
        for blk in stage:
            h = _res_block(p, blk, h, temb)
            skips.append(h)
        if d < len(plan.down) - 1:
            h = T.avgpool2x(h)
    h = _res_block(p, plan.mid, h, temb)
    for i, stage in enumerate(plan.up):
        for blk in stage:
            h = _res_block(p, blk, T.concat([h, skips.pop()], axis=1), temb)
        if i < len(plan.up) - 1:
            h = T.upsample2x(h)
    h = T.silu(T.group_norm(h, p["out.norm.gamma"], p["out.norm.beta"], groups_for(cfg.base_width)))
    out = T.conv2d(h, p["out.conv.weight"], p["out.conv.bias"])
    if single:
        out = T.reshape(out, out.shape[1:])
    return out
