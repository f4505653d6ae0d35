import numpy as np
import pytest
from hypothesis import given, strategies as st

from tendo.augment import (CLASSIFICATION_TRANSFORMS, SEGMENTATION_TRANSFORMS, AugmentPolicy, apply_augment,
                           elastic_deform, sample_rng)

NONE = {"probability": 0.0}


def _phantom(seed=0, size=32):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (size, size)).astype(np.uint8)
    mask = np.zeros((size, size), np.uint8)
    mask[8:20, 5:27] = 1
    return img, mask


def test_policy_contents():
    cls = AugmentPolicy.for_task("classification")
    assert set(cls.transforms) == {"vflip", "rotation", "zoom", "translation", "shear", "noise"}
    seg = AugmentPolicy.for_task("segmentation")
    assert set(SEGMENTATION_TRANSFORMS) - set(CLASSIFICATION_TRANSFORMS) == {
        "intensity_scale", "contrast", "illumination", "hflip", "elastic", "sharpness"}
    assert set(CLASSIFICATION_TRANSFORMS) <= set(seg.transforms)
    with pytest.raises(ValueError):
        AugmentPolicy.for_task("detection")


def test_identity_draw_is_bit_identical():
    img, mask = _phantom()
    pol = AugmentPolicy.for_task("segmentation", probability=0.0)
    force = {"rotation": 0.0, "zoom": 1.0, "translation": (0.0, 0.0), "shear": (0.0, 0.0)}
    out, m = apply_augment(img, mask, pol, np.random.default_rng(0), force=force)
    np.testing.assert_array_equal(out, img)
    np.testing.assert_array_equal(m, mask)
    assert out.dtype == np.uint8 and m.dtype == mask.dtype


def test_vflip_involution():
    img, mask = _phantom(1)
    pol = AugmentPolicy.for_task("classification", **NONE)
    once = apply_augment(img, mask, pol, np.random.default_rng(0), force={"vflip": True})
    np.testing.assert_array_equal(once[0], img[::-1])
    twice = apply_augment(*once, pol, np.random.default_rng(0), force={"vflip": True})
    np.testing.assert_array_equal(twice[0], img)
    np.testing.assert_array_equal(twice[1], mask)


def test_intensity_clamp():
    img = np.full((8, 8), 200, np.uint8)
    pol = AugmentPolicy.for_task("segmentation", **NONE)
    out, _ = apply_augment(img, None, pol, np.random.default_rng(0), force={"intensity_scale": 1.3})
    assert np.all(out == 255)


def test_contrast_shift_bounded():
    img = np.array([[0, 100, 155, 255]], np.uint8)
    pol = AugmentPolicy.for_task("segmentation", **NONE)
    out, _ = apply_augment(img, None, pol, np.random.default_rng(0), force={"contrast": 20.0})
    assert np.all(np.abs(out.astype(int) - img) <= 21)
    assert out[0, 0] == 0 and out[0, 3] == 255


def test_elastic_examples():
    img, mask = _phantom(2)
    out, m = elastic_deform(img, mask, 8.0, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out, img)
    np.testing.assert_array_equal(m, mask)
    const = np.full((32, 32), 77, np.uint8)
    out, m = elastic_deform(const, mask, 8.0, 6.0, np.random.default_rng(1))
    assert np.all(out == 77)
    assert set(np.unique(m)) <= {0, 1}


def test_determinism_per_sample_stream():
    img, mask = _phantom(3)
    pol = AugmentPolicy.for_task("segmentation")
    a = apply_augment(img, mask, pol, sample_rng(5, 17, 2))
    b = apply_augment(img, mask, pol, sample_rng(5, 17, 2))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


@given(st.integers(0, 10_000), st.sampled_from(["segmentation", "classification"]))
def test_mask_stays_binary_and_shape_kept(seed, task):
    img, mask = _phantom(seed % 7)
    out, m = apply_augment(img, mask, AugmentPolicy.for_task(task, probability=0.9), sample_rng(seed, 0, 0))
    assert out.shape == img.shape and m.shape == mask.shape
    assert set(np.unique(m)) <= {0, 1}
    assert out.dtype == np.uint8


@given(st.integers(0, 10_000))
def test_geometric_consistency_mask_as_image(seed):
    _, mask = _phantom()
    pol = AugmentPolicy.for_task("segmentation", probability=0.5,
                                 transforms=("rotation", "zoom", "translation", "shear", "hflip", "vflip"))
    as_img, _ = apply_augment(mask * 255, None, pol, sample_rng(seed, 1, 1))
    _, as_mask = apply_augment(mask * 255, mask, pol, sample_rng(seed, 1, 1))
    # mask resampling is nearest-neighbour, the image path is bilinear: agree wherever the image is saturated
    sure = (as_img == 0) | (as_img == 255)
    np.testing.assert_array_equal(as_mask[sure], (as_img[sure] == 255).astype(np.uint8))
