import numpy as np
import pytest

from vipformer.augment import (AugmentationSpec, apply_augmentation, augment_image, rotation_matrix,
                               two_views)
from vipformer.errors import ParameterError
from vipformer.rng import RngStream


def cloud(n=128, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 3)).astype(np.float32)


def pairwise(p):
    p = p.astype(np.float64)
    return np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))


def test_identity_spec_is_bitwise_identity():
    p = cloud()
    assert np.array_equal(apply_augmentation(p, AugmentationSpec.identity(), RngStream(0)), p)
    a, b = two_views(p, AugmentationSpec.identity(), RngStream(1))
    assert np.array_equal(a, p) and np.array_equal(b, p)


@pytest.mark.parametrize("axis", ["up", "arbitrary"])
def test_rotation_only_preserves_distances(axis):
    spec = AugmentationSpec(rotation_axis=axis, translation_range=(0.0, 0.0), jitter_sigma=0.0,
                            jitter_clip=0.0, scale_range=(1.0, 1.0))
    p = cloud(64).astype(np.float64)
    for s in range(10):
        q = apply_augmentation(p, spec, RngStream(s))
        d0, d1 = pairwise(p), pairwise(q)
        mask = d0 > 0
        assert np.abs(d1[mask] / d0[mask] - 1).max() < 1e-5


def test_up_axis_rotation_keeps_height():
    spec = AugmentationSpec(translation_range=(0.0, 0.0), jitter_sigma=0.0, jitter_clip=0.0,
                            scale_range=(1.0, 1.0))
    p = cloud(50).astype(np.float64)
    q = apply_augmentation(p, spec, RngStream(3))
    assert np.allclose(q[:, 2], p[:, 2], atol=1e-12)


def test_rotation_matrix_is_orthonormal():
    r = rotation_matrix(np.array([0.0, 0.6, 0.8]), 1.1)
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_jitter_bounded_and_calibrated():
    spec = AugmentationSpec(rotation_range=(0.0, 0.0), translation_range=(0.0, 0.0), scale_range=(1.0, 1.0),
                            jitter_sigma=0.01, jitter_clip=0.05)
    p = np.zeros((100_000, 3))
    q = apply_augmentation(p, spec, RngStream(4))
    assert np.abs(q).max() <= 0.05
    assert abs(q.std(axis=0) / 0.01 - 1).max() < 0.2


def test_tight_clip_is_enforced():
    spec = AugmentationSpec(rotation_range=(0.0, 0.0), translation_range=(0.0, 0.0), scale_range=(1.0, 1.0),
                            jitter_sigma=0.05, jitter_clip=0.01)
    q = apply_augmentation(np.zeros((5000, 3)), spec, RngStream(5))
    assert np.abs(q).max() <= 0.01 + 1e-12


def test_views_are_reproducible_and_distinct():
    p = cloud()
    spec = AugmentationSpec()
    a1, b1 = two_views(p, spec, RngStream(9))
    a2, b2 = two_views(p, spec, RngStream(9))
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)
    distinct = sum(not np.array_equal(*two_views(p, spec, RngStream(s))) for s in range(1000))
    assert distinct == 1000


def test_output_dtype_follows_input():
    p = cloud()
    assert apply_augmentation(p, AugmentationSpec(), RngStream(0)).dtype == np.float32


@pytest.mark.parametrize("kwargs", [
    {"scale_range": (0.0, 1.0)}, {"scale_range": (1.2, 0.8)}, {"jitter_clip": -0.1},
    {"jitter_sigma": -1.0}, {"rotation_axis": "sideways"}, {"translation_range": (0.2, -0.2)},
])
def test_invalid_specs_raise(kwargs):
    with pytest.raises(ParameterError):
        apply_augmentation(cloud(), AugmentationSpec(**kwargs), RngStream(0))


def test_image_flip_option():
    img = np.arange(2 * 3 * 3, dtype=np.float32).reshape(2, 3, 3)
    assert augment_image(img, AugmentationSpec(), RngStream(0)) is img
    flipped = {augment_image(img, AugmentationSpec(image_flip=True), RngStream(s))[0, 0, 0] for s in range(20)}
    assert flipped == {0.0, 6.0}
