import numpy as np
import pytest

from abra import tensor as T
from abra import uncertainty as U
from abra.losses import LossConfig
from abra.nn import Backbone, BackboneConfig, BlockSpec
from abra.rng import substream
from abra.tensor import ShapeError, Tensor

import oracles
from conftest import gradcheck


def site_with(k_mu, k_sigma, eps_mu, eps_sigma, sid=0):
    s = U.UncertaintySite.zeros(sid, len(k_mu))
    s.k_mu.data = np.asarray(k_mu, dtype=np.float64)
    s.k_sigma.data = np.asarray(k_sigma, dtype=np.float64)
    s.eps_mu = np.asarray(eps_mu, dtype=np.float64)
    s.eps_sigma = np.asarray(eps_sigma, dtype=np.float64)
    return s


def test_zero_k_is_exact_identity():
    x = np.random.default_rng(0).standard_normal((4, 3, 5, 5))
    s = U.UncertaintySite.zeros(0, 3)
    U.sample_noise(s, np.random.default_rng(1))
    out = U.abra_transform(x, s).data
    np.testing.assert_array_equal(out, x)


def test_pure_mean_shift():
    x = np.random.default_rng(2).standard_normal((4, 3, 5, 5))
    d = np.array([0.5, -1.0, 2.0])
    out = U.abra_transform(x, site_with(d, np.zeros(3), np.ones(3), np.zeros(3))).data
    np.testing.assert_allclose(out, x + d[None, :, None, None], atol=1e-12)


def test_matches_formula_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 3, 4, 4))
    s = site_with(rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3))
    mu, var = oracles.batch_stats(x)
    sig = np.sqrt(var)
    dmu, dsig = s.eps_mu * s.k_mu.data, s.eps_sigma * s.k_sigma.data
    c = lambda v: v[None, :, None, None]
    expected = c(sig + dsig) * (x - c(mu)) / c(sig) + c(mu + dmu)
    np.testing.assert_allclose(U.abra_transform(x, s).data, expected, atol=1e-10)


def test_gradients_wrt_x_and_k():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        em, es = rng.standard_normal(3), rng.standard_normal(3)

        def f(x, km, ks):
            s = U.UncertaintySite(0, km, ks, em, es)
            return U.abra_transform(x, s)

        args = [rng.standard_normal((3, 3, 3, 3)), rng.standard_normal(3), rng.standard_normal(3)]
        assert gradcheck(f, args, rng) < 1e-3


def test_channel_mismatch():
    with pytest.raises(ShapeError):
        U.abra_transform(np.zeros((2, 4, 3, 3)), U.UncertaintySite.zeros(0, 3))


def test_constant_channel_is_clamped():
    x = np.ones((2, 1, 3, 3))
    out = U.abra_transform(x, site_with([0.0], [1.0], [0.0], [1.0])).data
    assert np.isfinite(out).all()


class ZeroRng:
    def standard_normal(self, size):
        return np.zeros(size)


def test_zero_noise_gives_zero_deltas():
    x = np.random.default_rng(4).standard_normal((3, 2, 4, 4))
    s = site_with([5.0, 5.0], [5.0, 5.0], [1.0, 1.0], [1.0, 1.0])
    U.sample_noise(s, ZeroRng())
    np.testing.assert_array_equal(U.abra_transform(x, s).data, x)


def test_noise_determinism_and_moments():
    a, b = U.UncertaintySite.zeros(0, 4), U.UncertaintySite.zeros(0, 4)
    U.sample_noise(a, substream(7, "noise"))
    U.sample_noise(b, substream(7, "noise"))
    np.testing.assert_array_equal(a.eps_mu, b.eps_mu)
    np.testing.assert_array_equal(a.eps_sigma, b.eps_sigma)
    rng = substream(8, "noise")
    s = U.UncertaintySite.zeros(0, 3)
    draws = []
    for _ in range(100_000):
        U.sample_noise(s, rng)
        draws.append(s.eps_mu)
    draws = np.array(draws)
    assert np.abs(draws.mean(axis=0)).max() < 0.02
    assert np.abs(draws.var(axis=0) - 1).max() < 0.05


def test_ascent_zero_step_leaves_k():
    k = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    trace = [U.ascent_step([k], lambda: T.reduce_sum(k * k), 0.0) for _ in range(3)]
    np.testing.assert_array_equal(k.data, [1.0, 2.0])
    assert trace[0] == trace[1] == trace[2]


def test_ascent_quadratic_toy():
    target = np.array([1.0, -2.0])
    k = Tensor(np.array([0.5, 0.5]), requires_grad=True)
    alpha = 0.1
    start = k.data.copy()
    U.ascent_step([k], lambda: -T.reduce_sum((k - target) * (k - target)), alpha)
    np.testing.assert_allclose(k.data - start, 2 * alpha * (target - start), atol=1e-15)


def _desk_backbone(seed=0):
    cfg = BackboneConfig(in_channels=3, blocks=[BlockSpec(8), BlockSpec(16)], feature_dim=16, num_classes=4)
    return Backbone(cfg, substream(seed, "init"))


def test_adversarial_ascent_freezes_theta_and_moves_k():
    bb = _desk_backbone()
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((8, 3, 8, 8)), rng.integers(0, 4, 8)
    s = U.UncertaintySite.zeros(1, 16)
    U.sample_noise(s, rng)
    before = [p.data.copy() for p in bb.parameters()]
    trace = U.adversarial_ascent([s], (x, y), bb, LossConfig(num_classes=4), U.AdvOptState(alpha=0.1, steps=3))
    assert len(trace) == 3
    assert all(p.grad is None for p in bb.parameters())
    assert all(p.requires_grad for p in bb.parameters())
    for b, p in zip(before, bb.parameters()):
        np.testing.assert_array_equal(b, p.data)
    assert np.abs(s.k_mu.data).sum() > 0
    assert trace[-1] >= trace[0]


def test_non_finite_loss_resets_k_and_records_event():
    bb = _desk_backbone()
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((8, 3, 8, 8)), rng.integers(0, 4, 8)
    s = U.UncertaintySite.zeros(1, 16)
    U.sample_noise(s, rng)
    s.k_mu.data[:] = 0.25
    opt = U.AdvOptState(alpha=0.1, steps=2)
    x_bad = x.copy()
    x_bad[0, 0, 0, 0] = np.nan
    trace = U.adversarial_ascent([s], (x_bad, y), bb, LossConfig(num_classes=4), opt)
    assert not np.isfinite(trace[-1])
    np.testing.assert_array_equal(s.k_mu.data, 0.25)
    assert opt.events and "non-finite" in opt.events[0]


def test_adv_state_validation():
    with pytest.raises(ValueError):
        U.AdvOptState(alpha=-1.0)
    with pytest.raises(ValueError):
        U.AdvOptState(steps=0)
