"""Training objectives: batch-normalized score loss plus plain MAE/MSE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .ndgrad import Tensor


class DegenerateBatchError(Exception):
    """Constant score vector: the centered norm vanishes."""


@dataclass(frozen=True)
class LossConfig:
    p: float = 1.0
    q: float = 2.0
    sigma_floor: float = 1e-12

    def __post_init__(self):
        if self.p < 1.0 or self.q < 1.0:
            raise ValueError(f"p and q must be >= 1, got p={self.p}, q={self.q}")


def normalize_scores(s: Tensor, q: float = 2.0,
                     sigma_floor: float = 1e-12) -> tuple[Tensor, float, float]:
    """Center by the mean and divide by the centered q-norm (not /N).

    Returns (normalized tensor, mu, sigma); raises on a constant batch.
    """
    n = s.size
    if n < 2:
        raise DegenerateBatchError(f"need at least 2 scores, got {n}")
    mu = ng.mean_reduce(s)
    centered = ng.sub(s, mu)
    sigma_val = float(np.sum(np.abs(centered.data) ** q) ** (1.0 / q))
    if sigma_val <= sigma_floor:
        raise DegenerateBatchError(
            f"constant score batch (sigma={sigma_val:.3g}, n={n})")
    # one rounding step: sigma^(-1) straight from the power sum keeps the
    # two-point case at exactly +-2^(-1/2)
    inv_sigma = ng.power(ng.sum_reduce(ng.power(ng.absolute(centered), q)),
                         -1.0 / q)
    normalized = ng.mul(centered, inv_sigma)
    return normalized, float(mu.data), sigma_val


def norm_in_norm_loss(pred: Tensor, mos, cfg: LossConfig = LossConfig()) -> Tensor:
    """Sum of |normalized pred - normalized mos|^p scaled into [0, 1].

    The scale factor is 2^p * N^(1 - p/q), which bounds the loss by 1 for the
    default p=1, q=2.
    """
    mos_t = mos if isinstance(mos, Tensor) else Tensor(np.asarray(mos, dtype=np.float64))
    if pred.size != mos_t.size:
        raise ValueError(f"length mismatch: pred {pred.size} vs mos {mos_t.size}")
    n = pred.size
    qp, _, _ = normalize_scores(pred, cfg.q, cfg.sigma_floor)
    qm, _, _ = normalize_scores(mos_t, cfg.q, cfg.sigma_floor)
    eps = 2.0 ** cfg.p * n ** (1.0 - cfg.p / cfg.q)
    diff = ng.absolute(ng.sub(qp, qm))
    total = ng.sum_reduce(diff if cfg.p == 1.0 else ng.power(diff, cfg.p))
    return ng.div(total, Tensor(np.asarray(eps)))


def mae_loss(pred: Tensor, mos) -> Tensor:
    mos_t = mos if isinstance(mos, Tensor) else Tensor(np.asarray(mos, dtype=np.float64))
    return ng.mean_reduce(ng.absolute(ng.sub(pred, mos_t)))


def mse_loss(pred: Tensor, mos) -> Tensor:
    mos_t = mos if isinstance(mos, Tensor) else Tensor(np.asarray(mos, dtype=np.float64))
    return ng.mean_reduce(ng.power(ng.sub(pred, mos_t), 2.0))


LOSSES = {
    "norm_in_norm": lambda pred, mos, cfg: norm_in_norm_loss(pred, mos, cfg),
    "mae": lambda pred, mos, cfg: mae_loss(pred, mos),
    "mse": lambda pred, mos, cfg: mse_loss(pred, mos),
}
