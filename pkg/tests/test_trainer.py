import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from patchfair import autodiff as ad
from patchfair.imaging import Patch, disk_mask, new_patch
from patchfair.rng import stream
from patchfair.encoder import encode_array
from patchfair.synthdata import DatasetSpec, generate
from patchfair.trainer import (
    TrainConfig,
    batch_loss,
    fidelity_loss,
    make_noise_patch,
    mmd_sq,
    train_patch,
)
from oracles import central_diff, grad_close, linear_witness_gap_pga


def test_reference_optimizer_defaults():
    c = TrainConfig()
    assert (c.lr, c.batch, c.epochs, c.init) == (1e-3, 128, 200, 0.5)


def test_mmd_examples():
    same = np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])
    assert mmd_sq(same, same[::-1]) == 0.0
    assert mmd_sq(np.array([[1.0, 0, 0]]), np.array([[0.0, 0, 0]])) == 1.0
    with pytest.raises(ValueError):
        mmd_sq(np.zeros((0, 3)), same)


@pytest.mark.parametrize("seed", range(100))
def test_mmd_is_squared_linear_witness_supremum(seed):
    rng = np.random.default_rng(seed)
    a1, a0 = rng.normal(size=(8, 3)), rng.normal(size=(8, 3)) + rng.normal(size=3)
    delta = a1.mean(0) - a0.mean(0)
    w = delta / np.linalg.norm(delta)  # closed-form maximiser
    closed = float(np.mean(a1 @ w) - np.mean(a0 @ w))
    ascent = linear_witness_gap_pga(a1, a0, seed=seed)
    assert abs(ascent - closed) <= 1e-8
    assert abs(mmd_sq(a1, a0) - closed**2) <= 1e-8
    # no other unit witness does better
    for v in rng.normal(size=(20, 3)):
        v /= np.linalg.norm(v)
        assert np.mean(a1 @ v) - np.mean(a0 @ v) <= closed + 1e-12


def test_fidelity_examples():
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert fidelity_loss(x, x) == 0.0
    assert fidelity_loss(np.zeros((1, 3)), np.ones((1, 3))) == 3.0
    with pytest.raises(ValueError):
        fidelity_loss(np.zeros((2, 3)), np.zeros((3, 3)))


@given(st.integers(1, 20), st.integers(0, 10_000))
def test_fidelity_matches_summation(n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    direct = sum(sum((a[i, j] - b[i, j]) ** 2 for j in range(3)) for i in range(n)) / n
    assert abs(fidelity_loss(a, b) - direct) <= 1e-12


def test_tensor_and_array_forms_agree():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))
    assert mmd_sq(ad.Tensor(a), ad.Tensor(b)).item() == pytest.approx(mmd_sq(a, b), abs=1e-14)
    assert fidelity_loss(ad.Tensor(a), ad.Tensor(a[::-1])).item() == pytest.approx(fidelity_loss(a, a[::-1]), abs=1e-14)


@pytest.fixture(scope="module")
def tiny_batch():
    spec = DatasetSpec(n=8, seed=2, side=12, bar_length=8, bar_width=2, disk_radius=2.0)
    return generate(spec)


def _loss(batch, model, px, lam, radius=None, seed=0):
    g = ad.Graph()
    return batch_loss(batch, g.leaf(px), disk_mask(px.shape[0], radius), model, lam, stream(seed, "t"))


def test_lambda_zero_total_is_mmd(tiny_batch, tiny_model):
    br = _loss(tiny_batch, tiny_model, np.full((6, 6, 1), 0.5), 0.0)
    assert br.total == br.mmd_sq
    assert br.loss.item() == br.mmd_sq


def test_loss_is_affine_in_lambda(tiny_batch, tiny_model):
    px = np.random.default_rng(0).random((6, 6, 1))
    base = _loss(tiny_batch, tiny_model, px, 0.0)
    for lam in (0.1, 3.0, 250.0):
        br = _loss(tiny_batch, tiny_model, px, lam)
        assert abs(br.loss.item() - (base.loss.item() + lam * br.fidelity)) <= 1e-10
        assert abs(br.total - br.loss.item()) <= 1e-12
        assert br.mmd_sq >= 0 and br.fidelity >= 0


def test_zero_radius_patch_has_no_effect(tiny_batch, tiny_model):
    br = _loss(tiny_batch, tiny_model, np.ones((6, 6, 1)), 1.0, radius=0.0)
    reps = encode_array(tiny_model, tiny_batch.images)
    assert br.fidelity == 0.0
    assert br.mmd_sq == pytest.approx(mmd_sq(reps[tiny_batch.a == 1], reps[tiny_batch.a == 0]), abs=1e-14)


def test_single_group_batch_is_skipped(tiny_batch, tiny_model):
    only = tiny_batch.subset(np.flatnonzero(tiny_batch.a == 1))
    rng = stream(0, "skip")
    g = ad.Graph()
    assert batch_loss(only, g.leaf(np.zeros((6, 6, 1))), disk_mask(6), tiny_model, 1.0, rng) is None
    assert rng.random() == stream(0, "skip").random()  # no draws consumed


@pytest.mark.parametrize("seed", range(4))
def test_batch_loss_gradient(tiny_batch, tiny_model, seed):
    batch = tiny_batch.subset([0, 1, 2, 3]) if len(set(tiny_batch.a[:4])) == 2 else tiny_batch.subset(
        np.r_[np.flatnonzero(tiny_batch.a == 1)[:2], np.flatnonzero(tiny_batch.a == 0)[:2]]
    )
    px = np.random.default_rng(seed).uniform(0.1, 0.9, (6, 6, 1))
    g = ad.Graph()
    leaf = g.leaf(px)
    br = batch_loss(batch, leaf, disk_mask(6), tiny_model, 0.7, stream(seed, "fd"))
    analytic = g.backward(br.loss)[leaf]

    def f(v):
        h = ad.Graph()
        return batch_loss(batch, h.leaf(v), disk_mask(6), tiny_model, 0.7, stream(seed, "fd")).loss.item()

    assert grad_close(analytic, central_diff(f, px))


def test_zero_epochs_returns_initial_patch(tiny_batch, tiny_model):
    p, log = train_patch(tiny_batch, tiny_model, TrainConfig(epochs=0, side=6))
    np.testing.assert_array_equal(p.pixels, np.full((6, 6, 1), 0.5))
    assert log.epochs == []


def test_training_is_replay_deterministic(tiny_batch, tiny_model):
    cfg = TrainConfig(epochs=3, side=6, lr=0.5, batch=4, lam=0.1, seed=9)
    a, la = train_patch(tiny_batch, tiny_model, cfg)
    b, lb = train_patch(tiny_batch, tiny_model, cfg)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert [e.digest for e in la.epochs] == [e.digest for e in lb.epochs]
    assert a.config_digest == cfg.digest()


def test_pixels_stay_clamped(tiny_batch, tiny_model):
    p, _ = train_patch(tiny_batch, tiny_model, TrainConfig(epochs=3, side=6, lr=50.0, batch=8))
    assert p.pixels.min() >= 0.0 and p.pixels.max() <= 1.0


def test_training_touches_only_the_patch(tiny_batch, tiny_model):
    before = {k: v.copy() for k, v in tiny_model.weights.items()}
    images = tiny_batch.images.copy()
    train_patch(tiny_batch, tiny_model, TrainConfig(epochs=1, side=6, lr=1.0, batch=8))
    assert all(np.array_equal(before[k], tiny_model.weights[k]) for k in before)
    assert np.array_equal(images, tiny_batch.images)


def test_training_log_csv(tmp_path, tiny_batch, tiny_model):
    _, log = train_patch(tiny_batch, tiny_model, TrainConfig(epochs=2, side=6, batch=4))
    log.write_csv(tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["epoch", "mmd_sq", "fidelity", "total", "grad_norm"]
    assert len(rows) == 3


def test_loss_trends_down_on_real_encoder(trained):
    from patchfair.harness import partitions

    _, patch_split, _ = partitions(trained["data"])
    _, log = train_patch(patch_split, trained["model"], TrainConfig(lam=0.0, lr=0.1, epochs=20, seed=1))
    totals = [e.total for e in log.epochs]
    assert np.mean(totals[-10:]) <= np.mean(totals[:10])


def test_noise_patch():
    a, b = make_noise_patch(3), make_noise_patch(3)
    assert np.array_equal(a.pixels, b.pixels)
    assert not np.array_equal(a.pixels, make_noise_patch(4).pixels)
    assert not a.pixels[a.mask == 0].any()
    big = make_noise_patch(5, side=400)
    inside = big.pixels[big.mask > 0]
    assert inside.size > 100_000
    assert abs(inside.mean() - 0.5) <= 0.01
    assert inside.min() >= 0 and inside.max() <= 1
