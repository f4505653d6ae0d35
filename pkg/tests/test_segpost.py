import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from tendo.segpost import EmptyMaskWarning, binarize, label_components, largest_component, segment_postprocess

maps = st.tuples(st.integers(1, 16), st.integers(1, 16)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.floats(0, 1)))


def test_binarize_examples():
    assert not binarize(np.full((3, 3), 0.39), 0.4).any()
    assert binarize(np.array([[0.4]]), 0.4)[0, 0] == 1
    assert binarize(np.ones((2, 2))).all()
    with pytest.raises(ValueError):
        binarize(np.ones(2), 1.0)


def test_keeps_bigger_blob():
    m = np.zeros((10, 10), np.uint8)
    m[0:3, 0:4] = 1  # 12 px
    m[6:9, 6] = 1
    m[6, 7:9] = 1  # 5 px
    out = largest_component(m)
    assert out.sum() == 12 and out[0:3, 0:4].all()


def test_single_blob_unchanged():
    m = np.zeros((6, 6), np.uint8)
    m[1:4, 2:5] = 1
    np.testing.assert_array_equal(largest_component(m), m)


def test_equal_size_tie_break():
    m = np.zeros((6, 6), np.uint8)
    m[4:6, 0:2] = 1
    m[0:2, 4:6] = 1
    out = largest_component(m)
    assert out[0, 4] == 1 and out[5, 0] == 0


def test_diagonal_pixels_connect():
    m = np.eye(4, dtype=np.uint8)
    assert label_components(m)[1] == 1


def test_empty_warns():
    with pytest.warns(EmptyMaskWarning):
        out = segment_postprocess(np.zeros((4, 4)))
    assert out.shape == (4, 4) and not out.any()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        segment_postprocess(np.zeros((4, 4)), warn=False)


@given(maps)
def test_idempotent_single_component(pred):
    out = segment_postprocess(pred, warn=False)
    again = segment_postprocess(out.astype(float), warn=False)
    np.testing.assert_array_equal(out, again)
    assert ndimage.label(out, structure=np.ones((3, 3)))[1] <= 1


@given(maps, st.floats(0.01, 0.49), st.floats(0.0, 0.49))
def test_threshold_monotone(pred, lo, gap):
    hi = min(lo + gap + 0.01, 0.99)
    assert np.all(binarize(pred, hi) <= binarize(pred, lo))
