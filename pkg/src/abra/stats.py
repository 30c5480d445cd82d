"""Feature-statistics machinery: batch and instance moments, normalization,
AdaIN-style re-normalization, gradient reversal and AdaBN recalibration."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

EPS = 1e-5


class RecalibrationWarning(UserWarning):
    pass


@dataclass
class BatchStats:
    mu: Tensor  # (C,)
    sigma2: Tensor  # (C,)


@dataclass
class AffineParams:
    gamma: Tensor  # (C,)
    beta: Tensor  # (C,)


def _check_fmap(name: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected an N×C×H×W feature map, got shape {x.shape}")


def batch_channel_stats(x) -> BatchStats:
    """Per-channel mean and biased variance over (n, h, w)."""
    x = T.as_tensor(x)
    _check_fmap("batch_channel_stats", x)
    n, c, h, w = x.shape
    if n * h * w == 0:
        raise ValueError(f"batch_channel_stats: empty batch (shape {x.shape})")
    return BatchStats(T.reduce_mean(x, axis=(0, 2, 3)), T.reduce_var(x, axis=(0, 2, 3)))


def instance_channel_stats(x) -> tuple[Tensor, Tensor]:
    """Per-(n, c) mean and biased variance over (h, w)."""
    x = T.as_tensor(x)
    _check_fmap("instance_channel_stats", x)
    if x.shape[2] * x.shape[3] == 0:
        raise ValueError(f"instance_channel_stats: H·W = 0 (shape {x.shape})")
    return T.reduce_mean(x, axis=(2, 3)), T.reduce_var(x, axis=(2, 3))


def _per_channel(v: Tensor) -> Tensor:
    return T.reshape(v, (1, -1, 1, 1))


def bn_transform(x, stats: BatchStats, affine: AffineParams, eps: float = EPS) -> Tensor:
    """γ·(x − μ)/√(σ² + eps) + β with per-channel μ, σ², γ, β."""
    x = T.as_tensor(x)
    _check_fmap("bn_transform", x)
    c = x.shape[1]
    for name, v in (("mu", stats.mu), ("sigma2", stats.sigma2), ("gamma", affine.gamma), ("beta", affine.beta)):
        if v.shape != (c,):
            raise ShapeError(f"bn_transform: {name} has shape {v.shape}, expected ({c},)")
    inv = 1.0 / T.sqrt(stats.sigma2 + eps)
    scale = _per_channel(affine.gamma * inv)
    return (x - _per_channel(stats.mu)) * scale + _per_channel(affine.beta)


def clamped_std(sigma2, eps: float = EPS) -> Tensor:
    """√σ² with σ floored at ``eps`` (zero gradient below the floor)."""
    return T.sqrt(T.clamp(sigma2, eps * eps, np.inf))


def shift_scale_stats(x: Tensor, mu: Tensor, sigma: Tensor, delta_mu: Tensor, delta_sigma: Tensor) -> Tensor:
    """(σ + Δσ)·(x − μ)/σ + (μ + Δμ), all statistics already broadcastable to ``x``.

    Evaluated as ``x + Δσ·(x − μ)/σ + Δμ``, which is the same expression
    rearranged; zero deltas therefore return ``x`` exactly.
    """
    return x + delta_sigma * ((x - mu) / sigma) + delta_mu


def adain_renormalize(x, delta_mu, delta_sigma, eps: float = EPS) -> Tensor:
    """Instance-statistics re-normalization with additive (N, C) perturbations."""
    x = T.as_tensor(x)
    delta_mu, delta_sigma = T.as_tensor(delta_mu), T.as_tensor(delta_sigma)
    _check_fmap("adain_renormalize", x)
    nc = x.shape[:2]
    if delta_mu.shape != nc or delta_sigma.shape != nc:
        raise ShapeError(
            f"adain_renormalize: deltas {delta_mu.shape}/{delta_sigma.shape} do not match (N, C) = {nc}"
        )
    mu, var = instance_channel_stats(x)
    sigma = clamped_std(var, eps)
    n, c = nc
    return shift_scale_stats(
        x,
        T.reshape(mu, (n, c, 1, 1)),
        T.reshape(sigma, (n, c, 1, 1)),
        T.reshape(delta_mu, (n, c, 1, 1)),
        T.reshape(delta_sigma, (n, c, 1, 1)),
    )


gradient_reversal = T.grl


def adabn_recalibrate(model, batches: Iterable[np.ndarray] | np.ndarray) -> list[BatchStats]:
    """Replace every BN layer's running statistics with those of a test stream.

    The stream is pooled into a single batch so that each layer's statistics
    are computed on inputs already normalized by the recalibrated layers
    before it.  Classifier and affine parameters are untouched.
    """
    if isinstance(batches, np.ndarray):
        images = batches
    else:
        images = np.concatenate([np.asarray(b) for b in batches], axis=0)
    if images.shape[0] < 2:
        warnings.warn(
            f"AdaBN recalibration on {images.shape[0]} sample(s): variance is ill-estimated",
            RecalibrationWarning,
            stacklevel=2,
        )
    with T.no_grad():
        model.forward(images, bn_mode="recal")
    return [BatchStats(T.Tensor(bn.running_mean), T.Tensor(bn.running_var)) for bn in model.bn_layers()]
