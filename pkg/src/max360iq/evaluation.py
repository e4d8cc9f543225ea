"""Correlation metrics, five-parameter logistic remapping, and report assembly."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateInputError(Exception):
    pass


@dataclass
class EvalReport:
    plcc: float
    srcc: float
    rmse: float
    theta: list[float]
    n: int
    fit_fallback: bool = False
    per_condition: dict[str, "EvalReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"plcc": self.plcc, "srcc": self.srcc, "rmse": self.rmse,
             "theta": self.theta, "n": self.n, "fit_fallback": self.fit_fallback}
        if self.per_condition:
            d["per_condition"] = {k: v.to_dict() for k, v in self.per_condition.items()}
        return d


def _validated(x, y, min_n: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"expected equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < min_n:
        raise ValueError(f"need at least {min_n} samples, got {len(x)}")
    return x, y


def plcc(x, y) -> float:
    """Pearson linear correlation."""
    x, y = _validated(x, y, 3)
    cx, cy = x - x.mean(), y - y.mean()
    denom = np.sqrt((cx ** 2).sum()) * np.sqrt((cy ** 2).sum())
    if denom == 0.0:
        raise DegenerateInputError("constant input to plcc")
    return float((cx * cy).sum() / denom)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srcc(x, y) -> float:
    """Spearman rank correlation; average ranks break ties."""
    x, y = _validated(x, y, 3)
    rx, ry = _average_ranks(x), _average_ranks(y)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        raise DegenerateInputError("all-tied input to srcc")
    n = len(x)
    ties = (len(np.unique(x)) < n) or (len(np.unique(y)) < n)
    if not ties:
        d = rx - ry
        return float(1.0 - 6.0 * (d ** 2).sum() / (n * (n * n - 1)))
    return plcc(rx, ry)


def rmse(x, y) -> float:
    x, y = _validated(x, y, 1)
    return float(np.sqrt(((x - y) ** 2).mean()))


def logistic5(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """t1*(1/2 - 1/(1+exp(t2*(x-t3)))) + t4*x + t5 with an overflow-safe sigmoid."""
    t1, t2, t3, t4, t5 = theta
    z = np.clip(t2 * (x - t3), -500.0, 500.0)
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                   np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return t1 * (0.5 - sig) + t4 * x + t5


def _logistic5_jacobian(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    t1, t2, t3, _, _ = theta
    z = np.clip(t2 * (x - t3), -500.0, 500.0)
    ez = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    dsig = sig * (1.0 - sig)
    jac = np.empty((len(x), 5))
    jac[:, 0] = 0.5 - sig
    jac[:, 1] = -t1 * dsig * (x - t3)
    jac[:, 2] = t1 * dsig * t2
    jac[:, 3] = x
    jac[:, 4] = 1.0
    return jac


def _lm_fit(x: np.ndarray, y: np.ndarray, theta0: np.ndarray,
            max_iter: int = 500, rtol: float = 1e-10) -> tuple[np.ndarray, float, bool]:
    """Damped least squares with monotone residual; returns (theta, sse, ok)."""
    theta = theta0.astype(np.float64).copy()
    resid = logistic5(x, theta) - y
    sse = float(resid @ resid)
    lam = 1e-3
    for _ in range(max_iter):
        jac = _logistic5_jacobian(x, theta)
        jtj = jac.T @ jac
        jtr = jac.T @ resid
        stepped = False
        for _ in range(40):
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj) + 1e-12),
                                        -jtr)
            except np.linalg.LinAlgError:
                return theta, sse, False
            if not np.all(np.isfinite(delta)):
                return theta, sse, False
            cand = theta + delta
            cresid = logistic5(x, cand) - y
            csse = float(cresid @ cresid)
            if np.isfinite(csse) and csse <= sse:
                theta, resid = cand, cresid
                prev, sse = sse, csse
                lam = max(lam * 0.3, 1e-12)
                stepped = True
                break
            lam *= 10.0
            if lam > 1e12:
                break
        if not stepped:
            break
        if prev - sse <= rtol * max(prev, 1e-30):
            break
    return theta, sse, True


def fit_logistic(pred, mos) -> tuple[np.ndarray, np.ndarray, bool]:
    """Fit the five-parameter monotone+linear mapping from predictions to MOS.

    Returns (theta, mapped predictions, fallback flag). Tries the conventional
    range-based start and the exact identity mapping, keeping the lower
    residual; falls back to identity if the solver degenerates.
    """
    x, y = _validated(pred, mos, 5)
    span = x.max() - x.min()
    if span == 0.0:
        raise DegenerateInputError("constant predictions cannot be fitted")
    init = np.array([y.max() - y.min(), 4.0 / max(span, 1e-8),
                     float(x.mean()), 0.0, float(y.mean())])
    identity = np.array([0.0, 1.0, float(x.mean()), 1.0, 0.0])
    best_theta, best_sse, any_ok = None, np.inf, False
    for theta0 in (init, identity):
        theta, sse, ok = _lm_fit(x, y, theta0)
        any_ok = any_ok or ok
        if ok and sse < best_sse:
            best_theta, best_sse = theta, sse
    id_resid = x - y
    id_sse = float(id_resid @ id_resid)
    if not any_ok or best_theta is None or id_sse < best_sse:
        return identity, logistic5(x, identity), not any_ok
    return best_theta, logistic5(x, best_theta), False


def evaluate(pred, mos, conditions=None) -> EvalReport:
    """Logistic-map then PLCC/RMSE; SRCC on raw predictions. Optional
    per-condition sub-reports from aligned labels."""
    x, y = _validated(pred, mos, 3)
    if len(x) >= 5:
        theta, mapped, fallback = fit_logistic(x, y)
    else:
        theta, mapped, fallback = np.array([0.0, 1.0, 0.0, 1.0, 0.0]), x, True
    report = EvalReport(plcc=plcc(mapped, y), srcc=srcc(x, y),
                        rmse=rmse(mapped, y), theta=[float(t) for t in theta],
                        n=len(x), fit_fallback=fallback)
    if conditions is not None:
        conditions = list(conditions)
        if len(conditions) != len(x):
            raise ValueError("condition labels misaligned with scores")
        for cond in sorted(set(conditions)):
            mask = np.array([c == cond for c in conditions])
            if mask.sum() >= 5:
                report.per_condition[str(cond)] = evaluate(x[mask], y[mask])
    return report
