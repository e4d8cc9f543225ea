"""Multi-axis attention backbone: stem, MBConv + block/grid attention stages,
and the four-level feature pyramid (stage outputs after trailing max-pool)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .ndgrad import ParamStore, Tensor


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 8
    stage_dims: tuple[int, ...] = (8, 16, 32, 64)
    stage_depths: tuple[int, ...] = (1, 1, 1, 1)
    window: int = 2
    heads: int = 2
    mbconv_expansion: float = 4.0
    se_ratio: float = 0.25
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if len(self.stage_dims) != 4 or len(self.stage_depths) != 4:
            raise ValueError("backbone needs exactly four stages")
        if any(d % self.heads for d in self.stage_dims):
            raise ValueError(f"heads {self.heads} must divide stage dims "
                             f"{self.stage_dims}")
        if any(b > a for a, b in zip(self.stage_dims[1:], self.stage_dims[:-1])):
            raise ValueError("stage dims must be non-decreasing")


# paper-scale counterpart of the desk-scale default (untested at scale)
FULL_CONFIG = BackboneConfig(stem_channels=32, stage_dims=(48, 96, 192, 384),
                             stage_depths=(2, 2, 2, 2), window=7, heads=6)


@dataclass
class ModelState:
    train: bool = False
    rng: np.random.Generator | None = None


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2.0 * std, 2.0 * std)


def he_fanout(rng: np.random.Generator, shape) -> np.ndarray:
    fan_out = shape[0] * int(np.prod(shape[2:])) if len(shape) > 2 else shape[0]
    return rng.normal(0.0, math.sqrt(2.0 / fan_out), size=shape)


# ---------------------------------------------------------------------------
# parameter construction


def _init_attn_unit(ps: ParamStore, pre: str, dim: int, window: int, heads: int,
                    mlp_ratio: float, rng) -> None:
    ps.add(f"{pre}.ln1.gamma", np.ones(dim))
    ps.add(f"{pre}.ln1.beta", np.zeros(dim))
    for name in ("Wq", "Wk", "Wv", "Wo"):
        ps.add(f"{pre}.attn.{name}", trunc_normal(rng, (dim, dim)))
    for name in ("bq", "bk", "bv", "bo"):
        ps.add(f"{pre}.attn.{name}", np.zeros(dim))
    ps.add(f"{pre}.attn.rel_bias", np.zeros(((2 * window - 1) ** 2, heads)))
    ps.add(f"{pre}.ln2.gamma", np.ones(dim))
    ps.add(f"{pre}.ln2.beta", np.zeros(dim))
    hidden = int(dim * mlp_ratio)
    ps.add(f"{pre}.mlp.W1", trunc_normal(rng, (hidden, dim)))
    ps.add(f"{pre}.mlp.b1", np.zeros(hidden))
    ps.add(f"{pre}.mlp.W2", trunc_normal(rng, (dim, hidden)))
    ps.add(f"{pre}.mlp.b2", np.zeros(dim))


def _init_bn(ps: ParamStore, pre: str, ch: int) -> None:
    ps.add(f"{pre}.gamma", np.ones(ch))
    ps.add(f"{pre}.beta", np.zeros(ch))
    ps.add_buffer(f"{pre}.mean", np.zeros(ch))
    ps.add_buffer(f"{pre}.var", np.ones(ch))


def _init_block(ps: ParamStore, pre: str, in_ch: int, out_ch: int,
                cfg: BackboneConfig, rng) -> None:
    hidden = int(round(in_ch * cfg.mbconv_expansion))
    se_ch = max(1, int(round(hidden * cfg.se_ratio)))
    if in_ch != out_ch:
        ps.add(f"{pre}.mb.shortcut.W", he_fanout(rng, (out_ch, in_ch, 1, 1)))
    ps.add(f"{pre}.mb.expand.W", he_fanout(rng, (hidden, in_ch, 1, 1)))
    _init_bn(ps, f"{pre}.mb.bn1", hidden)
    ps.add(f"{pre}.mb.dw.K", he_fanout(rng, (hidden, 1, 3, 3)).reshape(hidden, 3, 3))
    _init_bn(ps, f"{pre}.mb.bn2", hidden)
    ps.add(f"{pre}.mb.se.W1", trunc_normal(rng, (se_ch, hidden)))
    ps.add(f"{pre}.mb.se.b1", np.zeros(se_ch))
    ps.add(f"{pre}.mb.se.W2", trunc_normal(rng, (hidden, se_ch)))
    ps.add(f"{pre}.mb.se.b2", np.zeros(hidden))
    ps.add(f"{pre}.mb.project.W", he_fanout(rng, (out_ch, hidden, 1, 1)))
    _init_bn(ps, f"{pre}.mb.bn3", out_ch)
    _init_attn_unit(ps, f"{pre}.blk", out_ch, cfg.window, cfg.heads,
                    cfg.mlp_ratio, rng)
    _init_attn_unit(ps, f"{pre}.grd", out_ch, cfg.window, cfg.heads,
                    cfg.mlp_ratio, rng)


def init_backbone(ps: ParamStore, cfg: BackboneConfig,
                  rng: np.random.Generator, prefix: str = "backbone") -> None:
    ps.add(f"{prefix}.stem.conv1.W", he_fanout(rng, (cfg.stem_channels, 3, 3, 3)))
    ps.add(f"{prefix}.stem.conv1.b", np.zeros(cfg.stem_channels))
    _init_bn(ps, f"{prefix}.stem.bn", cfg.stem_channels)
    ps.add(f"{prefix}.stem.conv2.W",
           he_fanout(rng, (cfg.stem_channels, cfg.stem_channels, 3, 3)))
    ps.add(f"{prefix}.stem.conv2.b", np.zeros(cfg.stem_channels))
    in_ch = cfg.stem_channels
    for si, (dim, depth) in enumerate(zip(cfg.stage_dims, cfg.stage_depths)):
        for bi in range(depth):
            _init_block(ps, f"{prefix}.stage{si}.block{bi}",
                        in_ch if bi == 0 else dim, dim, cfg, rng)
        in_ch = dim


# ---------------------------------------------------------------------------
# partitions


def block_partition(x: Tensor, p: int) -> tuple[Tensor, tuple]:
    """NCHW -> (N*nH*nW, P*P, C) of contiguous PxP tiles."""
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ng.ShapeError(f"block_partition: {h}x{w} not divisible by {p}")
    t = ng.reshape(x, (n, c, h // p, p, w // p, p))
    t = ng.transpose(t, (0, 2, 4, 3, 5, 1))
    return ng.reshape(t, (n * (h // p) * (w // p), p * p, c)), (n, c, h, w, p)


def block_unpartition(win: Tensor, meta: tuple) -> Tensor:
    n, c, h, w, p = meta
    t = ng.reshape(win, (n, h // p, w // p, p, p, c))
    t = ng.transpose(t, (0, 5, 1, 3, 2, 4))
    return ng.reshape(t, (n, c, h, w))


def grid_partition(x: Tensor, p: int) -> tuple[Tensor, tuple]:
    """NCHW -> (N*nH*nW, P*P, C) gathering a PxP grid of stride-(H/P) pixels."""
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ng.ShapeError(f"grid_partition: {h}x{w} not divisible by {p}")
    t = ng.reshape(x, (n, c, p, h // p, p, w // p))
    t = ng.transpose(t, (0, 3, 5, 2, 4, 1))
    return ng.reshape(t, (n * (h // p) * (w // p), p * p, c)), (n, c, h, w, p)


def grid_unpartition(win: Tensor, meta: tuple) -> Tensor:
    n, c, h, w, p = meta
    t = ng.reshape(win, (n, h // p, w // p, p, p, c))
    t = ng.transpose(t, (0, 5, 3, 1, 4, 2))
    return ng.reshape(t, (n, c, h, w))


_REL_INDEX_CACHE: dict[int, np.ndarray] = {}


def relative_index(p: int) -> np.ndarray:
    """(P^2, P^2) lookup of (2P-1)^2 relative-offset bins."""
    if p not in _REL_INDEX_CACHE:
        pos = np.array([(r, c) for r in range(p) for c in range(p)])
        dr = pos[:, None, 0] - pos[None, :, 0] + p - 1
        dc = pos[:, None, 1] - pos[None, :, 1] + p - 1
        _REL_INDEX_CACHE[p] = dr * (2 * p - 1) + dc
    return _REL_INDEX_CACHE[p]


# ---------------------------------------------------------------------------
# forward


def window_attention(win: Tensor, ps: ParamStore, pre: str, heads: int,
                     p: int) -> Tensor:
    """Pre-norm MHSA with relative-position bias, residual, then MLP residual."""
    bw, t, c = win.shape
    if c % heads:
        raise ng.ShapeError(f"feature dim {c} not divisible by heads {heads}")
    dh = c // heads
    x = ng.layer_norm(win, ps[f"{pre}.ln1.gamma"], ps[f"{pre}.ln1.beta"])

    def split_heads(v):
        return ng.transpose(ng.reshape(v, (bw, t, heads, dh)), (0, 2, 1, 3))

    q = split_heads(ng.linear(x, ps[f"{pre}.attn.Wq"], ps[f"{pre}.attn.bq"]))
    k = split_heads(ng.linear(x, ps[f"{pre}.attn.Wk"], ps[f"{pre}.attn.bk"]))
    v = split_heads(ng.linear(x, ps[f"{pre}.attn.Wv"], ps[f"{pre}.attn.bv"]))
    logits = ng.scale(ng.matmul(q, ng.transpose(k, (0, 1, 3, 2))),
                      1.0 / math.sqrt(dh))
    idx = relative_index(p).reshape(-1)
    bias = ng.gather_rows(ps[f"{pre}.attn.rel_bias"], idx)        # (T*T, heads)
    bias = ng.transpose(ng.reshape(bias, (t, t, heads)), (2, 0, 1))
    logits = ng.add(logits, ng.reshape(bias, (1, heads, t, t)))
    attn = ng.softmax(logits, axis=-1)
    out = ng.matmul(attn, v)
    out = ng.reshape(ng.transpose(out, (0, 2, 1, 3)), (bw, t, c))
    out = ng.linear(out, ps[f"{pre}.attn.Wo"], ps[f"{pre}.attn.bo"])
    x = ng.add(win, out)

    y = ng.layer_norm(x, ps[f"{pre}.ln2.gamma"], ps[f"{pre}.ln2.beta"])
    y = ng.linear(ng.gelu(ng.linear(y, ps[f"{pre}.mlp.W1"], ps[f"{pre}.mlp.b1"])),
                  ps[f"{pre}.mlp.W2"], ps[f"{pre}.mlp.b2"])
    return ng.add(x, y)


def _bn(x: Tensor, ps: ParamStore, pre: str, state: ModelState) -> Tensor:
    return ng.batch_norm(x, ps[f"{pre}.gamma"], ps[f"{pre}.beta"],
                         ps.buffers[f"{pre}.mean"], ps.buffers[f"{pre}.var"],
                         train=state.train)


def mbconv(x: Tensor, ps: ParamStore, pre: str, state: ModelState) -> Tensor:
    """Inverted residual: expand -> depthwise 3x3 -> SE -> project, residual."""
    shortcut = x
    if f"{pre}.shortcut.W" in ps:
        shortcut = ng.conv2d(x, ps[f"{pre}.shortcut.W"])
    h = ng.gelu(_bn(ng.conv2d(x, ps[f"{pre}.expand.W"]), ps, f"{pre}.bn1", state))
    h = ng.gelu(_bn(ng.depthwise_conv2d(h, ps[f"{pre}.dw.K"], padding=1),
                    ps, f"{pre}.bn2", state))
    h = ng.squeeze_excite(h, ps[f"{pre}.se.W1"], ps[f"{pre}.se.b1"],
                          ps[f"{pre}.se.W2"], ps[f"{pre}.se.b2"])
    h = _bn(ng.conv2d(h, ps[f"{pre}.project.W"]), ps, f"{pre}.bn3", state)
    return ng.add(shortcut, h)


def maxvit_block_forward(x: Tensor, ps: ParamStore, pre: str,
                         cfg: BackboneConfig, state: ModelState) -> Tensor:
    x = mbconv(x, ps, f"{pre}.mb", state)
    win, meta = block_partition(x, cfg.window)
    win = window_attention(win, ps, f"{pre}.blk", cfg.heads, cfg.window)
    x = block_unpartition(win, meta)
    win, meta = grid_partition(x, cfg.window)
    win = window_attention(win, ps, f"{pre}.grd", cfg.heads, cfg.window)
    return grid_unpartition(win, meta)


def stem_forward(vp: Tensor, ps: ParamStore, state: ModelState,
                 prefix: str = "backbone") -> Tensor:
    n, c, s, _ = vp.shape
    if s % 2:
        raise ng.ShapeError(f"stem requires even input size, got {s}")
    x = ng.conv2d(vp, ps[f"{prefix}.stem.conv1.W"], ps[f"{prefix}.stem.conv1.b"],
                  stride=2, padding=1)
    x = ng.gelu(_bn(x, ps, f"{prefix}.stem.bn", state))
    return ng.conv2d(x, ps[f"{prefix}.stem.conv2.W"], ps[f"{prefix}.stem.conv2.b"],
                     stride=1, padding=1)


def backbone_forward(vp: Tensor, ps: ParamStore, cfg: BackboneConfig,
                     state: ModelState, prefix: str = "backbone") -> list[Tensor]:
    """Feature pyramid F1..F4, each collected after the stage's trailing
    max-pool: spatial extents S/4, S/8, S/16, S/32."""
    s = vp.shape[-1]
    if s % 32:
        raise ng.ShapeError(f"viewport size {s} not divisible by 32")
    x = stem_forward(vp, ps, state, prefix)
    pyramid = []
    for si, depth in enumerate(cfg.stage_depths):
        for bi in range(depth):
            x = maxvit_block_forward(x, ps, f"{prefix}.stage{si}.block{bi}",
                                     cfg, state)
        x = ng.max_pool2d(x)
        pyramid.append(x)
    return pyramid
