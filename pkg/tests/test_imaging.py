import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from patchfair import autodiff as ad
from patchfair.imaging import (
    DigestMismatch,
    Patch,
    Placement,
    apply_patch,
    apply_patch_batch,
    disk_mask,
    footprint,
    load_patch,
    new_patch,
    rotate_patch,
    sample_placement,
    sample_placements,
    save_patch,
)
from oracles import central_diff, grad_close


def _random_patch(rng, side=12, channels=1, radius=None):
    return Patch(rng.random((side, side, channels)), disk_mask(side, radius))


def test_disk_mask_is_inscribed_disk():
    m = disk_mask(12)
    assert m[5, 5] == m[6, 6] == 1.0
    assert m[0, 0] == m[0, 11] == m[11, 0] == m[11, 11] == 0.0
    assert m[0, 5] == 1.0  # touches the edge midpoints
    np.testing.assert_array_equal(m, m.T)
    np.testing.assert_array_equal(m, m[::-1])
    assert not disk_mask(12, 0.0).any()


def test_full_size_patch_center_is_forced():
    rng = np.random.default_rng(0)
    for pl in sample_placements(rng, (32, 32), 32, 50):
        assert pl.center == (16, 16)
        assert 0 <= pl.theta < 2 * np.pi


def test_center_range_for_side_8():
    pls = sample_placements(np.random.default_rng(1), (32, 32), 8, 20000)
    rows = np.array([p.center[0] for p in pls])
    cols = np.array([p.center[1] for p in pls])
    # every valid top-left offset 0..24 appears; the centre sits side//2 further in
    assert rows.min() == 4 and rows.max() == 28
    assert cols.min() == 4 and cols.max() == 28


def test_center_distribution_is_uniform():
    pls = sample_placements(np.random.default_rng(2), (32, 32), 12, 100_000)
    rows = np.array([p.center[0] for p in pls])
    cols = np.array([p.center[1] for p in pls])
    cells = (rows - 6) * 21 + (cols - 6)
    counts = np.bincount(cells, minlength=21 * 21)
    assert chisquare(counts).pvalue > 0.01
    assert chisquare(np.bincount(rows - 6)).pvalue > 0.01


def test_placement_consumes_three_draws():
    a, b = np.random.default_rng(9), np.random.default_rng(9)
    sample_placement(a, (32, 32), 12)
    b.random(3)
    assert a.random() == b.random()
    sample_placements(a, (32, 32), 12, 7)
    b.random((7, 3))
    assert a.random() == b.random()


def test_patch_larger_than_image_rejected():
    with pytest.raises(ValueError):
        sample_placement(np.random.default_rng(0), (10, 10), 12)


def test_invalid_placement_rejected():
    p = new_patch(12)
    with pytest.raises(ValueError):
        apply_patch(np.zeros((32, 32, 1)), p, Placement(0.0, (3, 16)))
    with pytest.raises(ValueError):
        apply_patch(np.zeros((32, 32, 1)), p, Placement(0.0, (16, 27)))


def test_rotation_by_zero_is_identity():
    px = np.random.default_rng(0).random((12, 12, 2))
    np.testing.assert_array_equal(rotate_patch(ad.Tensor(px), 0.0).data, px)


@pytest.mark.parametrize("side", [8, 11, 12])
def test_half_turn_reverses_array_inside_mask(side):
    px = np.random.default_rng(side).random((side, side, 1))
    m = disk_mask(side)[..., None] > 0
    out = rotate_patch(ad.Tensor(px), np.pi).data
    assert np.max(np.abs(out - px[::-1, ::-1])[m]) <= 1e-9


@pytest.mark.parametrize("side", [8, 11, 12])
def test_quarter_turns_match_exact_rotation(side):
    px = np.random.default_rng(side).random((side, side, 1))
    m = disk_mask(side)[..., None] > 0
    # rotation by +theta maps output (r, c) to source (S-1-c, r): np.rot90 with k = -1
    for k, theta in ((-1, np.pi / 2), (1, 3 * np.pi / 2)):
        out = rotate_patch(ad.Tensor(px), theta).data
        assert np.max(np.abs(out - np.rot90(px, k))[m]) <= 1e-9


@pytest.mark.parametrize("theta", [0.0, np.pi / 2, np.pi, 3 * np.pi / 2])
def test_mask_rotation_invariant_at_right_angles(theta):
    m = disk_mask(12)
    out = rotate_patch(ad.Tensor(m[..., None]), theta).data[..., 0]
    assert np.max(np.abs(out - m)) <= 1e-6


def test_zero_radius_mask_leaves_image_unchanged():
    rng = np.random.default_rng(0)
    img = rng.random((32, 32, 1))
    p = _random_patch(rng, radius=0.0)
    out = apply_patch(img, p, Placement(1.0, (16, 16))).data
    np.testing.assert_array_equal(out, img)


def test_full_coverage_centered_patch_shows_patch_pixels():
    rng = np.random.default_rng(1)
    img = rng.random((12, 12, 1))
    p = _random_patch(rng)
    out = apply_patch(img, p, Placement(0.0, (6, 6))).data
    m = p.mask > 0
    np.testing.assert_array_equal(out[m], p.pixels[m])
    np.testing.assert_array_equal(out[~m], img[~m])


@given(
    seed=st.integers(0, 2**32 - 1),
    side=st.integers(4, 14),
    hw=st.tuples(st.integers(14, 24), st.integers(14, 24)),
    channels=st.integers(1, 3),
)
def test_off_mask_pixels_are_bit_identical(seed, side, hw, channels):
    rng = np.random.default_rng(seed)
    img = rng.random(hw + (channels,))
    p = _random_patch(rng, side, channels)
    pl = sample_placement(rng, hw, side)
    out = apply_patch(img, p, pl).data
    off = footprint(hw, p.mask, [pl])[0] == 0
    assert np.array_equal(out[off], img[off])
    assert out.min() >= 0.0 and out.max() <= 1.0


@given(seed=st.integers(0, 2**32 - 1))
def test_apply_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((20, 20, 1))
    p = _random_patch(rng, 9)
    pl = sample_placement(rng, (20, 20), 9)
    once = apply_patch(img, p, pl).data
    twice = apply_patch(once, p, pl).data
    assert np.max(np.abs(twice - once)) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_apply_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    imgs = rng.random((2, 10, 10, 1))
    px = rng.random((6, 6, 1))
    mask = disk_mask(6)
    pls = sample_placements(rng, (10, 10), 6, 2)
    weights = rng.normal(size=imgs.shape)

    def loss_of(graph, pixels):
        out = apply_patch_batch(imgs, pixels, mask, pls)
        return ad.sum_all(ad.square(ad.mul(out, graph.constant(weights))))

    g = ad.Graph()
    leaf = g.leaf(px)
    analytic = g.backward(loss_of(g, leaf))[leaf]

    def f(v):
        h = ad.Graph()
        return loss_of(h, h.leaf(v)).item()

    assert grad_close(analytic, central_diff(f, px))


def test_gradient_never_reaches_image():
    g = ad.Graph()
    img = g.leaf(np.random.default_rng(0).random((1, 16, 16, 1)))
    px = g.leaf(np.full((6, 6, 1), 0.5))
    out = apply_patch_batch(img.data, px, disk_mask(6), [Placement(0.3, (8, 8))])
    grads = g.backward(ad.sum_all(out))
    assert not grads[img].any()
    assert grads[px].any()


@pytest.mark.parametrize("radius", [None, 3.0, 0.0])
def test_patch_file_roundtrip(tmp_path, radius):
    p = _random_patch(np.random.default_rng(0), 10, 2, radius)
    p = Patch(p.pixels, p.mask, seed=17, lam=0.25, config_digest="abc")
    save_patch(p, tmp_path / "p.json")
    q = load_patch(tmp_path / "p.json")
    np.testing.assert_array_equal(q.pixels, p.pixels)
    np.testing.assert_array_equal(q.mask, p.mask)
    assert (q.seed, q.lam, q.config_digest) == (17, 0.25, "abc")


def test_corrupt_patch_file_raises_digest_mismatch(tmp_path):
    import json

    p = new_patch(8)
    save_patch(p, tmp_path / "p.json")
    doc = json.loads((tmp_path / "p.json").read_text())
    doc["digest"] = "0" * 64
    (tmp_path / "p.json").write_text(json.dumps(doc))
    with pytest.raises(DigestMismatch):
        load_patch(tmp_path / "p.json")
