import numpy as np
import pytest

from abra import data as D
from abra import tensor as T
from abra.losses import LossConfig
from abra.train import Adam, TrainConfig, TrainedModel, TrainingAborted, lr_at, train

import desk

TINY = D.PlateSpec(num_plates=3, images_per_plate=20, num_classes=4, image_size=8, num_train=2)


def tiny_cfg(method="abra", **kw):
    base = dict(epochs=2, batch_size=10, seed=0, profile="float64", blocks=(4, 8))
    base.update(kw)
    return TrainConfig.for_method(method, **base)


def test_config_validation_and_defaults():
    with pytest.raises(ValueError):
        TrainConfig(method="sgd")
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    assert TrainConfig.for_method("abra").loss.lam == 0.5
    assert TrainConfig.for_method("abra").loss.js_weight == 1.0
    assert TrainConfig.for_method("erm").loss.lam == 1.0
    assert TrainConfig.for_method("erm").loss.js_weight == 0.0


def test_config_dict_round_trip():
    cfg = TrainConfig.for_method("abra", sites=(0, 2), ascent_lr=0.5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_warmup_schedule():
    cfg = TrainConfig(epochs=10, lr=1e-3)
    per_epoch = 12
    assert lr_at(cfg, 0, per_epoch) == pytest.approx(1e-5)
    warm = int(round(0.1 * 10 * per_epoch))
    values = [lr_at(cfg, i, per_epoch) for i in range(warm + 5)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[warm] == pytest.approx(1e-3) and values[-1] == 1e-3


def test_adam_decay_exclusion_and_signs():
    # descent on θ, ascent on σ through the reversal layer
    theta = T.Tensor(np.array([1.0]), requires_grad=True)
    sigma = T.Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([theta, sigma], weight_decay=0.1, no_decay=[sigma])
    loss = T.reduce_sum(theta * 2.0 + T.grl(sigma) * 2.0)
    T.backward(loss)
    opt.step(0.01)
    assert theta.data[0] < 1.0 and sigma.data[0] > 1.0
    assert opt.decay == [True, False]


def test_one_iteration_accounting():
    spec = D.PlateSpec(num_plates=2, images_per_plate=20, num_classes=4, image_size=8, num_train=1)
    ds = D.generate(spec, 0)
    _, rep = train(ds, tiny_cfg(epochs=1, batch_size=20))
    assert rep.iterations == 1 and len(rep.iter_loss) == 1 and len(rep.epoch_loss) == 1


@pytest.mark.parametrize("method", ["erm", "adabn", "advstyle", "abra"])
def test_methods_run_and_are_deterministic(method):
    ds = D.generate(TINY, 1)
    _, a = train(ds, tiny_cfg(method))
    _, b = train(ds, tiny_cfg(method))
    assert a.iter_loss == b.iter_loss
    assert a.total_accuracy == b.total_accuracy
    assert np.isfinite(a.iter_loss).all()
    assert a.mode == ("tta" if method == "adabn" else "plain")


def test_zero_k_abra_matches_duplicated_erm():
    ds = D.generate(TINY, 2)
    traj = {}

    def recorder(name):
        def cb(phase, it, model):
            if phase != "phase1":
                traj.setdefault(name, []).append([p.data.copy() for p in model.backbone.parameters()])
        return cb

    loss = LossConfig(lam=0.5, js_weight=1.0)
    train(ds, tiny_cfg("abra", freeze_k=True, loss=loss), callback=recorder("abra"), evaluate_after=False)
    train(ds, tiny_cfg("erm", duplicate_batch=True, loss=loss), callback=recorder("erm"), evaluate_after=False)
    assert len(traj["abra"]) == len(traj["erm"]) > 0
    for a, b in zip(traj["abra"], traj["erm"]):
        assert max(float(np.abs(x - y).max()) for x, y in zip(a, b)) <= 1e-10


def test_non_finite_losses_abort_with_diagnostics():
    ds = D.generate(TINY, 3)
    for p in ds.split("train"):
        p.images[:] = np.nan
    with pytest.raises(TrainingAborted) as err:
        train(ds, tiny_cfg("erm"))
    diag = err.value.diagnostics
    assert {"recent_losses", "k_norm", "lr", "iteration"} <= set(diag)
    assert diag["iteration"] == 2


def test_no_train_plates_rejected():
    ds = D.generate(TINY, 0)
    for p in ds.plates:
        p.split = "test"
    with pytest.raises(ValueError):
        train(ds, tiny_cfg())


def test_checkpoint_round_trip_preserves_predictions(tmp_path):
    from abra.evaluate import infer

    ds = D.generate(TINY, 4)
    for method in ("abra", "advstyle"):
        model, _ = train(ds, tiny_cfg(method), evaluate_after=False)
        model.save(tmp_path / f"{method}.ckpt")
        back = TrainedModel.load(tmp_path / f"{method}.ckpt")
        assert back.config == model.config
        x = ds.split("test")[0].images
        np.testing.assert_array_equal(infer(model, x).embeddings, infer(back, x).embeddings)
        if method == "abra":
            np.testing.assert_array_equal(back.sites[0].k_mu.data, model.sites[0].k_mu.data)
        else:
            assert set(back.style) == set(model.style)


def test_report_text_and_csv():
    ds = D.generate(TINY, 5)
    _, rep = train(ds, tiny_cfg())
    text = rep.to_text()
    assert "method: abra" in text and "[accuracy.plain]" in text and "[epochs]" in text
    rows = rep.loss_csv().strip().splitlines()
    assert rows[0] == "epoch,loss,adv_loss,js" and len(rows) == 3
    ev = rep.evals["plain"]
    weighted = sum(ev.per_plate[k] * ev.counts[k] for k in ev.counts) / sum(ev.counts.values())
    assert ev.total == pytest.approx(weighted)


@pytest.mark.slow
def test_desk_training_loss_decreases():
    for seed in desk.SEEDS:
        _, rep = desk.run("abra", seed)
        assert rep.epoch_loss[-1] < rep.epoch_loss[0], seed
