import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats as sps

from abra import data as D

SMALL = D.PlateSpec(num_plates=4, images_per_plate=40, num_classes=4, image_size=8, num_train=3)


def test_generate_deterministic():
    a, b = D.generate(SMALL, 3), D.generate(SMALL, 3)
    for pa, pb in zip(a.plates, b.plates):
        np.testing.assert_array_equal(pa.images, pb.images)
        np.testing.assert_array_equal(pa.labels, pb.labels)
    c = D.generate(SMALL, 4)
    assert not np.array_equal(a.plates[0].images, c.plates[0].images)


def test_invalid_spec_names_field():
    with pytest.raises(ValueError, match="shift_severity"):
        D.generate(D.PlateSpec(shift_severity=-1.0), 0)
    with pytest.raises(ValueError, match="images_per_plate"):
        D.PlateSpec(images_per_plate=15).validate()
    with pytest.raises(ValueError, match="num_train"):
        D.PlateSpec(num_plates=4, num_train=4).validate()


def test_class_balance_and_splits():
    ds = D.generate(D.PlateSpec(), 0)
    for p in ds.plates:
        np.testing.assert_array_equal(np.bincount(p.labels, minlength=10), 20)
        assert p.images.dtype == np.float32 and p.images.shape == (200, 3, 16, 16)
    train = {p.plate_id for p in ds.split("train")}
    test = {p.plate_id for p in ds.split("test")}
    assert len(train) == 6 and len(test) == 2 and not train & test


def test_val_split():
    spec = D.PlateSpec(num_plates=5, images_per_plate=20, num_classes=2, image_size=4, num_train=2, num_val=1)
    ds = D.generate(spec, 0)
    assert [p.split for p in ds.plates] == ["train", "train", "val", "test", "test"]


def test_zero_severity_has_identity_shift():
    ds = D.generate(D.PlateSpec(shift_severity=0.0), 1)
    for p in ds.plates:
        np.testing.assert_array_equal(p.gain, 1.0)
        np.testing.assert_array_equal(p.offset, 0.0)


def test_plate_means_track_planted_offsets():
    spec = D.PlateSpec()
    ds = D.generate(spec, 2)
    means = np.array([p.images.astype(np.float64).mean(axis=(0, 2, 3)) for p in ds.plates]).ravel()
    offsets = np.array([p.offset for p in ds.plates]).ravel()
    fit = sps.linregress(offsets, means)
    assert abs(fit.slope - 1.0) < 2 * fit.stderr + 1e-3
    # each plate-channel mean is the offset plus the mean of the pixel noise
    se = spec.noise_level / np.sqrt(spec.images_per_plate * spec.image_size ** 2)
    assert np.abs(means - offsets).max() < 5 * se


def test_duplicate_plate_ids_rejected():
    ds = D.generate(SMALL, 0)
    with pytest.raises(ValueError):
        D.PlateDataset(SMALL, [ds.plates[0], ds.plates[0]])


def test_batches_are_single_plate_and_cover_epoch():
    ds = D.generate(SMALL, 0)
    plates = ds.split("train")
    seen = {p.plate_id: [] for p in plates}
    for b in D.plate_batches(plates, 10, np.random.default_rng(0)):
        assert len(b.indices) == 10
        p = ds.plate(b.plate_id)
        np.testing.assert_array_equal(b.labels, p.labels[b.indices])
        seen[b.plate_id].extend(b.indices.tolist())
    for pid, idx in seen.items():
        assert sorted(idx) == list(range(len(ds.plate(pid))))


def test_tail_handling():
    ds = D.generate(SMALL, 0)
    sizes = [len(b.indices) for b in D.plate_batches(ds.split("train")[:1], 13, np.random.default_rng(0))]
    assert sum(sizes) == 40 and min(sizes) >= 2
    sizes = [len(b.indices) for b in D.plate_batches(ds.split("train")[:1], 39, np.random.default_rng(0))]
    assert sizes == [40]


def test_batch_size_too_large():
    ds = D.generate(SMALL, 0)
    with pytest.raises(ValueError, match="exceeds"):
        list(D.plate_batches(ds.split("train"), 41, np.random.default_rng(0)))
    with pytest.raises(ValueError):
        D.PlateSampler(ds.split("train"), 41, np.random.default_rng(0))


def test_plate_order_is_shuffled():
    ds = D.generate(SMALL, 0)
    sampler = D.PlateSampler(ds.split("train"), 10, np.random.default_rng(0))
    orders = {tuple(b.plate_id for b in sampler.epoch()) for _ in range(5)}
    assert len(orders) > 1


def test_within_plate_order_uniform_chi_square():
    ds = D.generate(SMALL, 0)
    plate = ds.split("train")[0]
    sampler = D.PlateSampler([plate], 10, np.random.default_rng(11))
    counts = np.zeros((len(plate), 4))
    for _ in range(100):
        for slot, b in enumerate(sampler.epoch()):
            counts[b.indices, slot] += 1
    stat, p = sps.chisquare(counts.ravel(), np.full(counts.size, 25.0), ddof=len(plate) + 3 - 1)
    assert p > 0.01


def test_self_standardize_properties():
    x = np.random.default_rng(0).normal(3, 2, (4, 3, 8, 8))
    y = D.self_standardize(x)
    np.testing.assert_allclose(y.mean(axis=(2, 3)), 0, atol=1e-6)
    np.testing.assert_allclose(y.std(axis=(2, 3)), 1, atol=1e-6)
    np.testing.assert_allclose(D.self_standardize(y), y, atol=1e-6)


@given(
    arrays(np.float64, (2, 3, 4, 4), elements=st.floats(-5, 5, width=64)),
    arrays(np.float64, (3,), elements=st.floats(0.2, 5, width=64)),
    arrays(np.float64, (3,), elements=st.floats(-5, 5, width=64)),
)
def test_self_standardize_affine_invariance(x, a, b):
    if (x.std(axis=(2, 3)) < 1e-2).any():
        return
    y = a[None, :, None, None] * x + b[None, :, None, None]
    np.testing.assert_allclose(D.self_standardize(y), D.self_standardize(x), atol=1e-6)


def test_augment_preserves_content():
    x = np.random.default_rng(0).standard_normal((20, 3, 8, 8)).astype(np.float32)
    y = D.augment(x, np.random.default_rng(1))
    assert y.shape == x.shape and y.dtype == x.dtype
    np.testing.assert_allclose(np.sort(y.reshape(20, -1), axis=1), np.sort(x.reshape(20, -1), axis=1))
    assert not np.array_equal(x, y)
    np.testing.assert_array_equal(D.augment(x, np.random.default_rng(0), p=0.0), x)


def test_plt1_round_trip(tmp_path):
    ds = D.generate(SMALL, 5)
    path = tmp_path / "ds.plt"
    D.write_dataset(ds, path)
    assert path.read_bytes()[:4] == b"PLT1"
    back = D.read_dataset(path)
    assert back.spec == SMALL and back.seed == 5
    for a, b in zip(ds.plates, back.plates):
        assert a.plate_id == b.plate_id and a.split == b.split
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_allclose(a.gain, b.gain)
    truth = json.loads(D.truth_path(path).read_text())
    assert [e["split"] for e in truth["plates"]] == ["train"] * 3 + ["test"]


def test_plt1_without_sidecar(tmp_path):
    ds = D.generate(SMALL, 5)
    path = tmp_path / "ds.plt"
    D.write_dataset(ds, path)
    D.truth_path(path).unlink()
    back = D.read_dataset(path)
    assert len(back.plates) == 4 and back.spec.num_classes == 4


def test_plt1_bad_magic(tmp_path):
    path = tmp_path / "bad.plt"
    path.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(ValueError, match="PLT1"):
        D.read_dataset(path)


def test_plt1_write_deterministic(tmp_path):
    for name in ("a.plt", "b.plt"):
        D.write_dataset(D.generate(SMALL, 9), tmp_path / name)
    assert (tmp_path / "a.plt").read_bytes() == (tmp_path / "b.plt").read_bytes()
