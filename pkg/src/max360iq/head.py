"""Quality head: learnable generalized-mean pooling, multi-scale fusion,
deep-semantic concat, and recurrent score regression with two averaging steps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .backbone import BackboneConfig, ModelState, trunc_normal
from .ndgrad import ParamStore, Tensor

GEM_CLAMP = 1e-6
RHO_INIT = 3.0


@dataclass(frozen=True)
class HeadConfig:
    use_msfi: bool = True
    use_dsg: bool = True
    use_gru: bool = True
    gru_layers: int = 1
    gru_hidden: int = 32
    fc1_dim: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        if not (self.use_msfi or self.use_dsg):
            raise ValueError("at least one of use_msfi/use_dsg must be enabled")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")


def feature_dim(bb: BackboneConfig, cfg: HeadConfig) -> int:
    """Width of the per-viewport feature handed to the regressor."""
    d_q = bb.stage_dims[-1]  # fusion output matches the deepest stage
    return (d_q if cfg.use_msfi else 0) + (bb.stage_dims[-1] if cfg.use_dsg else 0)


def _rho_raw_init() -> float:
    # inverse of rho = 1 + softplus(raw) at RHO_INIT
    return float(np.log(np.expm1(RHO_INIT - 1.0)))


def init_head(ps: ParamStore, bb: BackboneConfig, cfg: HeadConfig,
              rng: np.random.Generator, prefix: str = "head") -> None:
    if cfg.use_msfi:
        for i in range(4):
            ps.add(f"{prefix}.gem.rho{i + 1}", np.array(_rho_raw_init()))
        d_q = bb.stage_dims[-1]
        ps.add(f"{prefix}.fuse.W", trunc_normal(rng, (d_q, sum(bb.stage_dims))))
        ps.add(f"{prefix}.fuse.b", np.zeros(d_q))
    if cfg.use_dsg:
        ps.add(f"{prefix}.gem.rho_g", np.array(_rho_raw_init()))
    d = feature_dim(bb, cfg)
    if cfg.use_gru:
        d_in = d
        for layer in range(cfg.gru_layers):
            for gate in ("z", "r", "h"):
                ps.add(f"{prefix}.gru{layer}.W{gate}",
                       trunc_normal(rng, (cfg.gru_hidden, d_in)))
                ps.add(f"{prefix}.gru{layer}.U{gate}",
                       trunc_normal(rng, (cfg.gru_hidden, cfg.gru_hidden)))
                ps.add(f"{prefix}.gru{layer}.b{gate}", np.zeros(cfg.gru_hidden))
            d_in = cfg.gru_hidden
        fc1_in = cfg.gru_hidden
    else:
        fc1_in = d
    ps.add(f"{prefix}.fc1.W", trunc_normal(rng, (cfg.fc1_dim, fc1_in)))
    ps.add(f"{prefix}.fc1.b", np.zeros(cfg.fc1_dim))
    ps.add(f"{prefix}.fc2.W", trunc_normal(rng, (1, cfg.fc1_dim)))
    ps.add(f"{prefix}.fc2.b", np.zeros(1))


def rho_value(ps: ParamStore, name: str) -> Tensor:
    """Pooling exponent constrained to [1, inf) via 1 + softplus(raw)."""
    return ng.add(ng.softplus(ps[name]), ng.Tensor(np.array(1.0)))


def gem_pool(f: Tensor, rho) -> Tensor:
    """Per-channel generalized mean over spatial dims: NCHW -> NC.

    rho may be a Tensor (learnable) or a float. Inputs are clamped at 1e-6
    before powering; the normalizer is the element count H*W.
    """
    if not isinstance(rho, Tensor):
        rho = Tensor(np.array(float(rho)))
    xc = ng.clamp_min(f, GEM_CLAMP)
    m = ng.mean_reduce(ng.power(xc, rho), axis=(2, 3))
    return ng.exp(ng.mul(ng.log(m), ng.reciprocal(rho)))


def msfi_fuse(pyramid: list[Tensor], ps: ParamStore,
              prefix: str = "head") -> Tensor:
    """GeM-pool each scale, concatenate, fuse with one FC layer -> (N, D_q)."""
    pooled = [gem_pool(f, rho_value(ps, f"{prefix}.gem.rho{i + 1}"))
              for i, f in enumerate(pyramid)]
    return ng.linear(ng.concat(pooled, axis=1),
                     ps[f"{prefix}.fuse.W"], ps[f"{prefix}.fuse.b"])


def dsg_pool(pyramid: list[Tensor], ps: ParamStore,
             prefix: str = "head") -> Tensor:
    """Deep semantic vector: GeM over the deepest feature map."""
    return gem_pool(pyramid[-1], rho_value(ps, f"{prefix}.gem.rho_g"))


def viewport_features(pyramid: list[Tensor], ps: ParamStore, cfg: HeadConfig,
                      prefix: str = "head") -> Tensor:
    """Per-viewport feature (N, D): fused multi-scale vector, deep semantic
    vector, or their concatenation, per the ablation flags."""
    parts = []
    if cfg.use_msfi:
        parts.append(msfi_fuse(pyramid, ps, prefix))
    if cfg.use_dsg:
        parts.append(dsg_pool(pyramid, ps, prefix))
    return parts[0] if len(parts) == 1 else ng.concat(parts, axis=1)


def regress_sequence(feats: Tensor, ps: ParamStore, cfg: HeadConfig,
                     state: ModelState, prefix: str = "head") -> Tensor:
    """(B, K, D) features -> (B, K) per-viewport scores.

    With GRUs enabled the stack runs across the K steps in scanpath order from
    a zero hidden state; dropout sits between FC1 and FC2 in train mode."""
    b, k, d = feats.shape
    if cfg.use_gru:
        steps = ng.transpose(feats, (1, 0, 2))  # (K, B, D)
        outputs = []
        layer_inputs = [ng.index_axis0(steps, i) for i in range(k)]
        for layer in range(cfg.gru_layers):
            params = {key: ps[f"{prefix}.gru{layer}.{key}"]
                      for key in ("Wz", "Uz", "bz", "Wr", "Ur", "br",
                                  "Wh", "Uh", "bh")}
            h = Tensor(np.zeros((b, cfg.gru_hidden)))
            outputs = []
            for x in layer_inputs:
                h = ng.gru_cell(x, h, params)
                outputs.append(h)
            layer_inputs = outputs
        hidden = outputs
    else:
        hidden = [ng.index_axis0(ng.transpose(feats, (1, 0, 2)), i)
                  for i in range(k)]
    scores = []
    for h in hidden:
        y = ng.gelu(ng.linear(h, ps[f"{prefix}.fc1.W"], ps[f"{prefix}.fc1.b"]))
        y = ng.dropout(y, cfg.dropout, state.rng, state.train)
        scores.append(ng.linear(y, ps[f"{prefix}.fc2.W"], ps[f"{prefix}.fc2.b"]))
    return ng.concat(scores, axis=1)  # (B, K)


def aggregate_sequence(scores: Tensor) -> Tensor:
    """(B, K) per-viewport scores -> (B,) per-sequence means."""
    return ng.mean_reduce(scores, axis=1)


def aggregate_image(seq_scores) -> float:
    """Mean over a sequence-score list: the per-image score."""
    seq_scores = list(seq_scores)
    if not seq_scores:
        raise ValueError("aggregate_image needs at least one sequence score")
    return float(np.mean(seq_scores))
