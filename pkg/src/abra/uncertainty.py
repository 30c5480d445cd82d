"""Learnable batch-statistics uncertainty and worst-case (gradient-ascent) search."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import stats as S
from . import tensor as T
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass
class UncertaintySite:
    """Per-channel perturbation magnitudes ``k_mu``/``k_sigma`` bound to one
    insertion point, plus the most recent standard-normal draws."""

    site_id: int
    k_mu: Tensor
    k_sigma: Tensor
    eps_mu: np.ndarray
    eps_sigma: np.ndarray

    @classmethod
    def zeros(cls, site_id: int, channels: int) -> "UncertaintySite":
        return cls(
            site_id=site_id,
            k_mu=Tensor(np.zeros(channels), requires_grad=True),
            k_sigma=Tensor(np.zeros(channels), requires_grad=True),
            eps_mu=np.zeros(channels),
            eps_sigma=np.zeros(channels),
        )

    @property
    def channels(self) -> int:
        return self.k_mu.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.k_mu, self.k_sigma]

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        return self.k_mu.data.copy(), self.k_sigma.data.copy()

    def restore(self, snap) -> None:
        self.k_mu.data = snap[0].copy()
        self.k_sigma.data = snap[1].copy()


@dataclass
class AdvOptState:
    alpha: float = 1e-3
    steps: int = 1
    seed: int = 0
    events: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"ascent step size must be >= 0, got {self.alpha}")
        if self.steps < 1:
            raise ValueError(f"ascent step count must be >= 1, got {self.steps}")


def sample_noise(site: UncertaintySite, rng: np.random.Generator) -> None:
    c = site.channels
    site.eps_mu = np.asarray(rng.standard_normal(c), dtype=site.k_mu.dtype)
    site.eps_sigma = np.asarray(rng.standard_normal(c), dtype=site.k_mu.dtype)


def abra_transform(x, site: UncertaintySite, eps: float = S.EPS) -> Tensor:
    """Shift batch statistics of ``x`` by Δμ = ε_μ⊙K_μ and Δσ = ε_σ⊙K_σ.

    X_t = (σ_c + Δσ)·(X − μ_c)/σ_c + (μ_c + Δμ) with μ_c, σ_c the batch
    statistics of ``x``; differentiable in ``x``, ``k_mu`` and ``k_sigma``.
    """
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != site.channels:
        raise ShapeError(f"abra_transform: feature map {x.shape} does not match site with {site.channels} channels")
    stats = S.batch_channel_stats(x)
    sigma = S.clamped_std(stats.sigma2, eps)
    d_mu = T.as_tensor(site.eps_mu) * site.k_mu
    d_sigma = T.as_tensor(site.eps_sigma) * site.k_sigma

    def chan(v):
        return T.reshape(v, (1, -1, 1, 1))

    return S.shift_scale_stats(x, chan(stats.mu), chan(sigma), chan(d_mu), chan(d_sigma))


def make_hook(sites: Sequence[UncertaintySite]):
    by_id = {s.site_id: s for s in sites}
    return lambda site_id, x: abra_transform(x, by_id[site_id])


def ascent_step(params: Sequence[Tensor], loss_fn: Callable[[], Tensor], alpha: float) -> float:
    """One step of p ← p + α·∇ₚ loss; returns the pre-step loss value."""
    T.zero_grad(params)
    loss = loss_fn()
    value = float(loss.data)
    if not np.isfinite(value):
        return value
    T.backward(loss)
    for p in params:
        if p.grad is not None:
            p.data = p.data + alpha * p.grad
        p.grad = None
    return value


def adversarial_ascent(
    sites: Sequence[UncertaintySite],
    batch: tuple[np.ndarray, np.ndarray],
    model,
    loss_cfg,
    opt: AdvOptState,
) -> list[float]:
    """Maximize the adversarial objective over K with the network frozen.

    ε is held at its current draw for every step.  On a non-finite loss the
    K vectors are reset to their values at entry and an event is recorded.
    """
    from .losses import adversarial_objective

    images, labels = batch
    site_ids = [s.site_id for s in sites]
    hook = make_hook(sites)
    k_params = [p for s in sites for p in s.parameters()]
    before = [s.snapshot() for s in sites]

    def loss_fn():
        e, logits = model.forward(images, site_ids, hook, bn_mode="batch")
        return adversarial_objective(logits, model.angles(e), labels, loss_cfg)

    trace: list[float] = []
    with T.frozen(model.parameters()):
        for _ in range(opt.steps):
            value = ascent_step(k_params, loss_fn, opt.alpha)
            trace.append(value)
            if not np.isfinite(value):
                for s, snap in zip(sites, before):
                    s.restore(snap)
                msg = f"non-finite adversarial loss ({value}); K reset to pre-iteration values"
                opt.events.append(msg)
                log.warning(msg)
                break
    return trace
