"""Backbone + head assembly operating on batches of viewport sequences."""

from __future__ import annotations

import numpy as np

from . import ndgrad as ng
from .backbone import BackboneConfig, ModelState, backbone_forward, init_backbone
from .head import HeadConfig, aggregate_sequence, init_head, regress_sequence, \
    viewport_features
from .ndgrad import ParamStore, Tensor


class Max360IQModel:
    def __init__(self, bb_cfg: BackboneConfig, head_cfg: HeadConfig,
                 init_rng: np.random.Generator | None = None):
        self.bb_cfg = bb_cfg
        self.head_cfg = head_cfg
        self.params = ParamStore()
        if init_rng is not None:
            init_backbone(self.params, bb_cfg, init_rng)
            init_head(self.params, bb_cfg, head_cfg, init_rng)

    def forward(self, sequences: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """(B, K, 3, S, S) viewport batch -> ((B,) sequence scores, (B, K)
        per-viewport scores). All K viewports flow through the backbone as one
        flat batch."""
        b, k, c, s, _ = sequences.shape
        state = ModelState(train=train, rng=rng)
        flat = Tensor(sequences.reshape(b * k, c, s, s))
        pyramid = backbone_forward(flat, self.params, self.bb_cfg, state)
        feats = viewport_features(pyramid, self.params, self.head_cfg)
        feats = ng.reshape(feats, (b, k, feats.shape[-1]))
        step_scores = regress_sequence(feats, self.params, self.head_cfg, state)
        return aggregate_sequence(step_scores), step_scores

    def num_params(self) -> int:
        return self.params.num_params()
