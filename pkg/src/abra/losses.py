"""Cross-entropy, additive-angular-margin (ArcFace) loss, their λ-mix, and the
Jensen–Shannon consistency term between clean and perturbed predictions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

COS_CLAMP = 1e-7


@dataclass
class LossConfig:
    lam: float = 0.5
    margin: float = 0.2
    scale: float = 16.0
    js_weight: float = 1.0
    num_classes: int = 10

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError(f"margin must lie in [0, pi/2), got {self.margin}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.js_weight < 0:
            raise ValueError(f"js_weight must be >= 0, got {self.js_weight}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")


def _check_labels(scores: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match scores {scores.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= scores.shape[1]))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"label {int(labels[i])} at index {i} outside [0, {scores.shape[1]})")
    return labels.astype(np.int64)


def cross_entropy(logits, labels) -> Tensor:
    logits = T.as_tensor(logits)
    labels = _check_labels(logits, labels)
    return -T.reduce_mean(T.pick(T.log_softmax(logits, axis=1), labels))


def margin_logits(cosphi, labels, margin: float, scale: float) -> Tensor:
    """s·cos φ_j, with the true class's angle widened to φ_y + m."""
    cosphi = T.as_tensor(cosphi)
    labels = _check_labels(cosphi, labels)
    target = T.pick(cosphi, labels)
    widened = T.cos(T.arccos(T.clamp(target, -1 + COS_CLAMP, 1 - COS_CLAMP)) + margin)
    onehot = np.zeros(cosphi.shape, dtype=cosphi.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    delta = T.reshape(widened - target, (-1, 1))
    return (cosphi + delta * onehot) * scale


def arcface_loss(cosphi, labels, cfg: LossConfig) -> Tensor:
    return cross_entropy(margin_logits(cosphi, labels, cfg.margin, cfg.scale), labels)


def supervised_loss(logits, cosphi, labels, cfg: LossConfig) -> Tensor:
    """λ·CE + (1 − λ)·ArcFace; a zero-weight component is not evaluated."""
    if cfg.lam == 1.0:
        return cross_entropy(logits, labels)
    if cfg.lam == 0.0:
        return arcface_loss(cosphi, labels, cfg)
    return cross_entropy(logits, labels) * cfg.lam + arcface_loss(cosphi, labels, cfg) * (1.0 - cfg.lam)


def adversarial_objective(logits, cosphi, labels, cfg: LossConfig) -> Tensor:
    """Inner-maximization objective, evaluated on the perturbed representation."""
    return supervised_loss(logits, cosphi, labels, cfg)


def js_divergence(p, q, tol: float = 1e-6) -> Tensor:
    """Mean over rows of ½KL(p‖m) + ½KL(q‖m), m = (p + q)/2, natural log."""
    p, q = T.as_tensor(p), T.as_tensor(q)
    if p.shape != q.shape or p.ndim != 2:
        raise ShapeError(f"js_divergence: shapes {p.shape} and {q.shape} must be equal and rank 2")
    for name, t in (("p", p), ("q", q)):
        if (t.data < 0).any():
            raise ValueError(f"js_divergence: {name} has negative entries")
        sums = t.data.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
        if bad.size:
            raise ValueError(f"js_divergence: row {int(bad[0])} of {name} sums to {sums[bad[0]]}, not 1")
    return T.reduce_mean(_js_rows(p, q))


def _xlog_ratio(a: np.ndarray, m: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(a > 0, a * np.log(a / m), 0.0)


def _js_rows(p: Tensor, q: Tensor) -> Tensor:
    m = (p.data + q.data) / 2
    out = 0.5 * (_xlog_ratio(p.data, m) + _xlog_ratio(q.data, m)).sum(axis=1)

    def bw(g):
        # d/dp = ½·log(p/m); zero where p = 0
        with np.errstate(divide="ignore", invalid="ignore"):
            gp = np.where(p.data > 0, 0.5 * np.log(p.data / m), 0.0) if p.requires_grad else None
            gq = np.where(q.data > 0, 0.5 * np.log(q.data / m), 0.0) if q.requires_grad else None
        g = g[:, None]
        return (None if gp is None else g * gp), (None if gq is None else g * gq)

    return T._make(out, (p, q), bw, "js")


def robust_terms(clean, perturbed, labels, cfg: LossConfig) -> tuple[Tensor, Tensor]:
    """Supervised loss over the 2N rows of {X, X_t} and the JS term between
    the clean and perturbed predictive distributions."""
    logits, cosphi = clean
    logits_t, cosphi_t = perturbed
    labels = np.asarray(labels)
    both = np.concatenate([labels, labels])
    sup = supervised_loss(T.concat([logits, logits_t]), T.concat([cosphi, cosphi_t]), both, cfg)
    js = js_divergence(T.softmax(logits, axis=1), T.softmax(logits_t, axis=1))
    return sup, js


def robust_objective(clean, perturbed, labels, cfg: LossConfig) -> Tensor:
    sup, js = robust_terms(clean, perturbed, labels, cfg)
    if cfg.js_weight == 0:
        return sup
    return sup + js * cfg.js_weight
