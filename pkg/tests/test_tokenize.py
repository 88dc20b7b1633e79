import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fps_bruteforce, knn_bruteforce
from vipformer.errors import ParameterError, ShapeError
from vipformer.rng import RngStream
from vipformer.tokenize import (build_point_patches, build_point_patches_batch, farthest_point_sample,
                                knn_group, patchify_image, patchify_images, unpatchify_image)


# -- images ---------------------------------------------------------------------

def test_patchify_paper_sized_image():
    img = np.random.default_rng(0).random((144, 144, 3))
    seq = patchify_image(img, 12)
    assert seq.patches.shape == (144, 432)
    # patch (1, 2) of the 12x12 grid holds rows 12..23, cols 24..35
    assert np.array_equal(seq.patches[1 * 12 + 2], img[12:24, 24:36].reshape(-1))


def test_patchify_trivial_cases():
    img = np.arange(27.0).reshape(3, 3, 3)
    assert np.array_equal(patchify_image(img, 3).patches, img.reshape(1, -1))
    small = np.array([[[1.0], [2.0]], [[3.0], [4.0]]])
    assert patchify_image(small, 1).patches.tolist() == [[1.0], [2.0], [3.0], [4.0]]


def test_patchify_rejects_non_divisor():
    with pytest.raises(ShapeError):
        patchify_image(np.zeros((10, 12, 3)), 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(1, 3))
def test_unpatchify_roundtrip(gh, gw, q, c):
    img = np.random.default_rng(gh * 100 + gw * 10 + q).random((gh * q, gw * q, c))
    assert np.array_equal(unpatchify_image(patchify_image(img, q)), img)


def test_batched_patchify_matches_single():
    imgs = np.random.default_rng(1).random((3, 24, 24, 3))
    batch = patchify_images(imgs, 6)
    for i in range(3):
        assert np.array_equal(batch[i], patchify_image(imgs[i], 6).patches)


# -- farthest point sampling -------------------------------------------------------

def test_fps_examples():
    square = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert list(farthest_point_sample(square, 2, start=0)) == [0, 3]
    pts = np.random.default_rng(2).random((10, 3))
    one = farthest_point_sample(pts, 1, RngStream(7))
    assert len(one) == 1
    assert sorted(farthest_point_sample(pts, 10, RngStream(7))) == list(range(10))


def test_fps_start_comes_from_rng():
    pts = np.random.default_rng(3).random((50, 3))
    firsts = {int(farthest_point_sample(pts, 1, RngStream(s))[0]) for s in range(40)}
    assert len(firsts) > 10
    assert list(farthest_point_sample(pts, 5, RngStream(4))) == list(farthest_point_sample(pts, 5, RngStream(4)))


def test_fps_errors():
    pts = np.zeros((4, 3))
    with pytest.raises(ParameterError):
        farthest_point_sample(pts, 5, start=0)
    with pytest.raises(ParameterError):
        farthest_point_sample(pts, 0, start=0)


def test_fps_matches_bruteforce_many_clouds():
    rng = np.random.default_rng(4)
    for trial in range(120):
        n = int(rng.integers(1, 65))
        # integer grids force plenty of exact distance ties
        pts = rng.integers(0, 3, size=(n, 3)).astype(float) if trial % 2 else rng.random((n, 3))
        g = int(rng.integers(1, n + 1))
        start = int(rng.integers(n))
        assert list(farthest_point_sample(pts, g, start=start)) == fps_bruteforce(pts, g, start)


# -- k nearest neighbours --------------------------------------------------------

def test_knn_examples():
    pts = np.random.default_rng(5).random((16, 3))
    centers = pts[[3, 9]]
    full = knn_group(pts, centers, 16)
    for row, c in zip(full, centers):
        d = ((pts[row] - c) ** 2).sum(1)
        assert np.all(np.diff(d) >= 0) and sorted(row) == list(range(16))
    assert knn_group(pts, centers, 1)[:, 0].tolist() == [3, 9]
    got = knn_group(pts, centers, 4)
    assert got.tolist() == [knn_bruteforce(pts, c, 4) for c in centers]


def test_knn_error():
    with pytest.raises(ParameterError):
        knn_group(np.zeros((3, 3)), np.zeros((1, 3)), 4)


def test_knn_matches_bruteforce_with_ties():
    rng = np.random.default_rng(6)
    for trial in range(120):
        n = int(rng.integers(1, 65))
        pts = rng.integers(0, 3, size=(n, 3)).astype(float) if trial % 2 else rng.random((n, 3))
        centers = pts[rng.integers(0, n, size=3)]
        k = int(rng.integers(1, n + 1))
        assert knn_group(pts, centers, k).tolist() == [knn_bruteforce(pts, c, k) for c in centers]


def test_knn_permutation_stable():
    rng = np.random.default_rng(7)
    pts = rng.random((40, 3))
    centers = pts[[0, 5, 17]]
    perm = rng.permutation(40)
    a = knn_group(pts, centers, 6)
    b = perm[knn_group(pts[perm], centers, 6)]
    assert [set(r) for r in a] == [set(r) for r in b]


# -- point patches ----------------------------------------------------------------

def test_point_patches_paper_shape():
    pts = np.random.default_rng(8).random((2048, 3))
    seq = build_point_patches(pts, 128, 32, RngStream(0))
    assert seq.patches.shape == (128, 96)
    assert seq.centers.shape == (128, 3)


def test_point_patches_are_center_relative():
    pts = np.random.default_rng(9).random((64, 3))
    seq = build_point_patches(pts, 8, 5, RngStream(1))
    rows = seq.patches.reshape(8, 5, 3)
    for g in range(8):
        assert np.array_equal(rows[g], pts[seq.neighbor_indices[g]] - seq.centers[g])
        # each center is its own nearest neighbour
        assert np.array_equal(rows[g][0], np.zeros(3))


def test_single_patch_is_whole_cloud_recentred():
    pts = np.random.default_rng(10).random((20, 3))
    seq = build_point_patches(pts, 1, 20, RngStream(2))
    c = pts[seq.center_indices[0]]
    assert sorted(map(tuple, seq.patches.reshape(20, 3))) == sorted(map(tuple, pts - c))


def test_translation_invariance_on_exact_grid():
    # dyadic coordinates and offsets keep every subtraction exact in float64
    rng = np.random.default_rng(11)
    pts = rng.integers(-64, 64, size=(200, 3)) / 64.0
    t = np.array([0.5, -1.25, 3.0])
    a = build_point_patches(pts, 16, 8, RngStream(3))
    b = build_point_patches(pts + t, 16, 8, RngStream(3))
    assert np.array_equal(a.patches, b.patches)
    assert np.array_equal(b.centers, a.centers + t)


def test_translation_invariance_general_floats():
    pts = np.random.default_rng(12).random((300, 3))
    t = np.array([0.3, -0.7, 0.11])
    a = build_point_patches(pts, 16, 8, RngStream(3))
    b = build_point_patches(pts + t, 16, 8, RngStream(3))
    assert np.array_equal(a.center_indices, b.center_indices)
    assert np.abs(a.patches - b.patches).max() < 1e-12
    assert np.abs(b.centers - (a.centers + t)).max() < 1e-12


def test_batch_tokenization_independent_of_workers():
    clouds = [np.random.default_rng(s).random((100, 3)) for s in range(5)]

    def rngs():
        return [RngStream(0).substream("fps", i) for i in range(5)]

    p1, c1 = build_point_patches_batch(clouds, 8, 4, rngs(), workers=1)
    p3, c3 = build_point_patches_batch(clouds, 8, 4, rngs(), workers=3)
    assert np.array_equal(p1, p3) and np.array_equal(c1, c3)
    assert p1.shape == (5, 8, 12)
