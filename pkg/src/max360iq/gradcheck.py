"""Finite-difference verification suite for every differentiable component."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .backbone import (BackboneConfig, ModelState, _init_attn_unit,
                       init_backbone, maxvit_block_forward, stem_forward,
                       window_attention)
from .head import HeadConfig, gem_pool
from .model import Max360IQModel
from .ndgrad import ParamStore, Tensor, grad_check
from .objective import LossConfig, norm_in_norm_loss

PRIMITIVE_TOL = 1e-4
BLOCK_TOL = 1e-3
END_TO_END_TOL = 1e-3
LOSS_TOL = 1e-5


@dataclass
class ComponentResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _sumsq(t: Tensor) -> Tensor:
    return ng.sum_reduce(ng.mul(t, t))


def _project(t: Tensor, r: np.ndarray) -> Tensor:
    """Fixed random linear functional of the output.

    Preferred over a sum of squares for ops that normalize their input:
    there the squared norm of the output is (nearly) constant, so its true
    gradient vanishes and the relative finite-difference error blows up.
    """
    return ng.sum_reduce(ng.mul(t, Tensor(r)))


def _check_primitive(name: str, rng: np.random.Generator) -> float:
    """Random-shape scalar closure through one primitive; returns max rel err."""
    ps = ParamStore()
    if name == "conv2d":
        n, ci, co = rng.integers(1, 3), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h = int(rng.integers(4, 7))
        x = ps.add("x", rng.normal(size=(int(n), ci, h, h)))
        k = ps.add("k", rng.normal(size=(co, ci, 3, 3)) * 0.5)
        b = ps.add("b", rng.normal(size=co))
        stride = int(rng.integers(1, 3))
        fn = lambda: _sumsq(ng.conv2d(x, k, b, stride=stride, padding=1))
    elif name == "depthwise_conv2d":
        c, h = int(rng.integers(1, 5)), int(rng.integers(4, 7))
        x = ps.add("x", rng.normal(size=(2, c, h, h)))
        k = ps.add("k", rng.normal(size=(c, 3, 3)) * 0.5)
        b = ps.add("b", rng.normal(size=c))
        fn = lambda: _sumsq(ng.depthwise_conv2d(x, k, b, padding=1))
    elif name == "linear":
        di, do = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        x = ps.add("x", rng.normal(size=(3, di)))
        w = ps.add("w", rng.normal(size=(do, di)))
        b = ps.add("b", rng.normal(size=do))
        fn = lambda: _sumsq(ng.linear(x, w, b))
    elif name == "softmax":
        x = ps.add("x", rng.normal(size=(3, int(rng.integers(2, 6)))) * 3.0)
        r = rng.normal(size=x.data.shape)
        fn = lambda: _project(ng.softmax(x, axis=-1), r)
    elif name == "gru_cell":
        di, dh = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        x = ps.add("x", rng.normal(size=(2, di)))
        h = ps.add("h", rng.normal(size=(2, dh)))
        gp = {}
        for gate in ("z", "r", "h"):
            gp[f"W{gate}"] = ps.add(f"W{gate}", rng.normal(size=(dh, di)) * 0.5)
            gp[f"U{gate}"] = ps.add(f"U{gate}", rng.normal(size=(dh, dh)) * 0.5)
            gp[f"b{gate}"] = ps.add(f"b{gate}", rng.normal(size=dh) * 0.5)
        fn = lambda: _sumsq(ng.gru_cell(x, h, gp))
    elif name == "batch_norm":
        c = int(rng.integers(1, 4))
        x = ps.add("x", rng.normal(size=(3, c, 4, 4)))
        gm = ps.add("gamma", 1.0 + 0.1 * rng.normal(size=c))
        bt = ps.add("beta", rng.normal(size=c))
        r = rng.normal(size=x.data.shape)
        # fresh buffers per call keep the closure deterministic
        fn = lambda: _project(ng.batch_norm(x, gm, bt, np.zeros(c), np.ones(c),
                                            train=True), r)
    elif name == "layer_norm":
        d = int(rng.integers(2, 6))
        x = ps.add("x", rng.normal(size=(3, d)))
        gm = ps.add("gamma", 1.0 + 0.1 * rng.normal(size=d))
        bt = ps.add("beta", rng.normal(size=d))
        r = rng.normal(size=x.data.shape)
        fn = lambda: _project(ng.layer_norm(x, gm, bt), r)
    elif name in ("gelu", "sigmoid", "tanh", "softplus"):
        op = getattr(ng, name)
        x = ps.add("x", rng.normal(size=(4, 5)))
        fn = lambda: _sumsq(op(x))
    elif name == "relu":
        raw = rng.normal(size=(4, 5))
        x = ps.add("x", raw + np.sign(raw) * 0.05)  # stay off the kink
        fn = lambda: _sumsq(ng.relu(x))
    elif name == "max_pool2d":
        x = ps.add("x", rng.normal(size=(2, 2, 4, 4)))
        fn = lambda: _sumsq(ng.max_pool2d(x))
    elif name == "global_avg_pool":
        x = ps.add("x", rng.normal(size=(2, 3, 4, 4)))
        fn = lambda: _sumsq(ng.global_avg_pool(x))
    elif name == "squeeze_excite":
        c, se = 4, 2
        x = ps.add("x", rng.normal(size=(2, c, 3, 3)))
        w1 = ps.add("w1", rng.normal(size=(se, c)) * 0.5)
        b1 = ps.add("b1", rng.normal(size=se))
        w2 = ps.add("w2", rng.normal(size=(c, se)) * 0.5)
        b2 = ps.add("b2", rng.normal(size=c))
        fn = lambda: _sumsq(ng.squeeze_excite(x, w1, b1, w2, b2))
    elif name == "dropout":
        x = ps.add("x", rng.normal(size=(4, 4)))
        seed = int(rng.integers(0, 2 ** 31))
        fn = lambda: _sumsq(ng.dropout(x, 0.3, np.random.default_rng(seed),
                                       train=True))
    elif name == "concat":
        a = ps.add("a", rng.normal(size=(2, 3)))
        b = ps.add("b", rng.normal(size=(2, 2)))
        fn = lambda: _sumsq(ng.concat([a, b], axis=1))
    elif name == "mean_reduce":
        x = ps.add("x", rng.normal(size=(3, 4, 5)))
        fn = lambda: _sumsq(ng.mean_reduce(x, axis=(1,)))
    elif name == "power":
        x = ps.add("x", np.abs(rng.normal(size=(3, 4))) + 0.2)
        p = ps.add("p", np.array(1.0 + rng.random() * 2.0))
        fn = lambda: ng.sum_reduce(ng.power(x, p))
    elif name == "abs":
        x = ps.add("x", rng.normal(size=(3, 4)) + np.sign(rng.normal(size=(3, 4))) * 0.1)
        fn = lambda: ng.sum_reduce(ng.absolute(x))
    elif name == "gem_pool":
        x = ps.add("x", np.abs(rng.normal(size=(2, 3, 4, 4))) + 0.1)
        raw = ps.add("rho_raw", np.array(rng.normal()))
        fn = lambda: _sumsq(gem_pool(x, ng.add(ng.softplus(raw),
                                               Tensor(np.array(1.0)))))
    else:
        raise ValueError(f"unknown primitive {name!r}")
    return grad_check(fn, ps)


PRIMITIVES = ["conv2d", "depthwise_conv2d", "linear", "softmax", "gru_cell",
              "batch_norm", "layer_norm", "gelu", "sigmoid", "tanh", "softplus",
              "relu", "max_pool2d", "global_avg_pool", "squeeze_excite",
              "dropout", "concat", "mean_reduce", "power", "abs", "gem_pool"]


def _check_loss(rng: np.random.Generator) -> float:
    ps = ParamStore()
    n = int(rng.integers(4, 9))
    pred = ps.add("pred", rng.normal(size=n))
    mos = rng.normal(size=n)
    cfg = LossConfig()
    return grad_check(lambda: norm_in_norm_loss(pred, mos, cfg), ps)


def _check_loss_two_layer(rng: np.random.Generator) -> float:
    """Loss through a 2-layer linear model on fixed data.

    No output bias: the loss normalizes away shifts, so an output bias has
    an identically-zero gradient that central differences cannot certify
    against the relative-error floor.
    """
    ps = ParamStore()
    x = rng.normal(size=(6, 3))
    mos = rng.normal(size=6)
    w1 = ps.add("w1", rng.normal(size=(4, 3)) * 0.5)
    b1 = ps.add("b1", rng.normal(size=4) * 0.1)
    w2 = ps.add("w2", rng.normal(size=(1, 4)) * 0.5)

    def fn():
        h = ng.tanh(ng.linear(Tensor(x), w1, b1))
        pred = ng.reshape(ng.linear(h, w2), (6,))
        return norm_in_norm_loss(pred, mos, LossConfig())

    return grad_check(fn, ps)


TINY_BB = BackboneConfig(stem_channels=2, stage_dims=(2, 2, 4, 4),
                         stage_depths=(1, 1, 1, 1), window=2, heads=1,
                         mbconv_expansion=2.0, se_ratio=0.5, mlp_ratio=2.0)
TINY_HEAD = HeadConfig(gru_layers=1, gru_hidden=3, fc1_dim=3, dropout=0.0)


def _check_stem(rng: np.random.Generator) -> float:
    ps = ParamStore()
    init_backbone(ps, TINY_BB, rng)
    x = rng.normal(size=(1, 3, 8, 8))
    keep = [n for n in ps.names() if n.startswith("backbone.stem")]
    r = rng.normal(size=(1, TINY_BB.stem_channels, 4, 4))
    fn = lambda: _project(stem_forward(Tensor(x), ps, ModelState(train=False)), r)
    return grad_check(fn, ps, params=keep)


def _check_attention_unit(rng: np.random.Generator) -> float:
    """One pre-norm attention unit on an 8-token window of random features."""
    ps = ParamStore()
    dim = 4
    _init_attn_unit(ps, "attn", dim, TINY_BB.window, heads=2,
                    mlp_ratio=2.0, rng=rng)
    win = rng.normal(size=(2, TINY_BB.window ** 2, dim))
    r = rng.normal(size=win.shape)
    fn = lambda: _project(window_attention(Tensor(win), ps, "attn", 2,
                                           TINY_BB.window), r)
    return grad_check(fn, ps, skip_below=1e-6)


def _check_block(rng: np.random.Generator, stage: int = 0) -> float:
    ps = ParamStore()
    init_backbone(ps, TINY_BB, rng)
    in_ch = (TINY_BB.stem_channels if stage == 0
             else TINY_BB.stage_dims[stage - 1])
    x = rng.normal(size=(1, in_ch, 4, 4))
    keep = [n for n in ps.names() if n.startswith(f"backbone.stage{stage}")]
    r = rng.normal(size=(1, TINY_BB.stage_dims[stage], 4, 4))
    fn = lambda: _project(maxvit_block_forward(Tensor(x), ps,
                                               f"backbone.stage{stage}.block0",
                                               TINY_BB, ModelState(train=False)),
                          r)
    return grad_check(fn, ps, params=keep, skip_below=1e-6)


def _check_end_to_end(rng: np.random.Generator,
                      max_entries: int | None = 4) -> float:
    """Full forward + loss on a 3-sequence batch of 32x32 viewports.

    Three sequences are the minimum for a meaningful loss gradient: with two,
    the normalized scores are exactly +-1/sqrt(2) whatever the predictions,
    so the loss is locally constant.
    """
    model = Max360IQModel(TINY_BB, TINY_HEAD, rng)
    vps = rng.random(size=(3, 2, 3, 32, 32))
    mos = np.array([1.0, 3.0, 4.5])

    def fn():
        scores, _ = model.forward(vps, train=False)
        return norm_in_norm_loss(scores, mos, LossConfig())

    return grad_check(fn, model.params, max_entries=max_entries, rng=rng,
                      skip_below=1e-6)


def run_suite(seeds: int = 20, include_end_to_end: bool = True,
              end_to_end_seeds: int = 2) -> list[ComponentResult]:
    """Check every component across ``seeds`` random seeds; the end-to-end
    model (the slowest check) runs on a capped random subset of entries."""
    results = []
    for name in PRIMITIVES:
        worst = max(_check_primitive(name, np.random.default_rng(1000 + s))
                    for s in range(seeds))
        results.append(ComponentResult(name, worst, PRIMITIVE_TOL))
    worst = max(_check_loss(np.random.default_rng(2000 + s))
                for s in range(seeds))
    results.append(ComponentResult("norm_in_norm_loss", worst, LOSS_TOL))
    worst = max(_check_loss_two_layer(np.random.default_rng(3000 + s))
                for s in range(seeds))
    results.append(ComponentResult("loss_two_layer_model", worst, PRIMITIVE_TOL))
    worst = max(_check_attention_unit(np.random.default_rng(3500 + s))
                for s in range(seeds))
    results.append(ComponentResult("attention_unit", worst, PRIMITIVE_TOL))
    worst = max(_check_stem(np.random.default_rng(4000 + s))
                for s in range(min(seeds, 5)))
    results.append(ComponentResult("stem", worst, PRIMITIVE_TOL))
    for stage in range(4):
        worst = max(_check_block(np.random.default_rng(5000 + 10 * stage + s),
                                 stage=stage)
                    for s in range(min(seeds, 3)))
        results.append(ComponentResult(f"maxvit_block_stage{stage}", worst,
                                       BLOCK_TOL))
    if include_end_to_end and end_to_end_seeds > 0:
        worst = max(_check_end_to_end(np.random.default_rng(6000 + s))
                    for s in range(end_to_end_seeds))
        results.append(ComponentResult("end_to_end", worst, END_TO_END_TOL))
    return results
