import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tendo.posinfo import (SENTINEL, EmptySegmentationError, build_position_maps, compute_centroid,
                           compute_orientation, to_preview, wrap_angle)

masks = st.tuples(st.integers(1, 14), st.integers(1, 14)).flatmap(
    lambda s: arrays(np.uint8, s, elements=st.integers(0, 1))).filter(lambda m: m.any())


def _mask(points, shape=(8, 8)):
    m = np.zeros(shape, np.uint8)
    for x, y in points:
        m[y, x] = 1
    return m


def test_centroid_examples():
    assert compute_centroid(_mask([(1, 1), (1, 3), (3, 1), (3, 3)])) == (2.0, 2.0)
    assert compute_centroid(_mask([(5, 7)])) == (5.0, 7.0)
    m = np.zeros((10, 12), np.uint8)
    m[2:7, 3:10] = 1
    assert compute_centroid(m) == (6.0, 4.0)


def test_empty_mask_rejected():
    with pytest.raises(EmptySegmentationError, match="empty segmentation"):
        build_position_maps(np.zeros((3, 3)))


def test_orientation_examples():
    row = np.zeros((5, 9), np.uint8)
    row[2, 1:8] = 1
    assert compute_orientation(row) == 0.0
    assert compute_orientation(_mask([(0, 0), (1, 1), (2, 2)])) == pytest.approx(math.pi / 4, abs=1e-15)
    sq = np.zeros((6, 6), np.uint8)
    sq[1:5, 1:5] = 1
    assert compute_orientation(sq) == 0.0
    col = np.zeros((9, 5), np.uint8)
    col[1:8, 2] = 1
    assert compute_orientation(col) == pytest.approx(math.pi / 2)


def test_full_3x3():
    pm = build_position_maps(np.ones((3, 3)))
    assert pm.origin == (1.0, 1.0)
    r = pm.radius
    assert r[1, 1] == 0.0
    for y, x in [(0, 0), (0, 2), (2, 0), (2, 2)]:
        assert abs(r[y, x] - 1.0) <= 1e-9
    for y, x in [(0, 1), (1, 0), (1, 2), (2, 1)]:
        assert abs(r[y, x] - 1 / math.sqrt(2)) <= 1e-9


def test_degenerate_single_pixel():
    pm = build_position_maps(_mask([(3, 4)]))
    assert pm.radius[4, 3] == 0.0 and pm.angle[4, 3] == 0.0
    assert (pm.radius == SENTINEL).sum() == 63


def test_wrap_and_preview():
    np.testing.assert_allclose(wrap_angle(np.array([-math.pi, math.pi, 3 * math.pi / 2])),
                               [math.pi, math.pi, -math.pi / 2])
    assert to_preview(np.array([-1.0, 0.0, 1.0, 0.5])).tolist() == [0, 0, 255, 128]


@given(masks)
def test_range_and_sentinel(m):
    pm = build_position_maps(m)
    inside = m != 0
    for v in (pm.radius, pm.angle):
        assert np.all(v[~inside] == -1.0)
        assert np.all((v[inside] >= 0) & (v[inside] <= 1))
    if inside.sum() > 1 and pm.radius[inside].max() > 0:
        assert pm.radius[inside].min() == 0.0 and pm.radius[inside].max() == 1.0


@given(masks, st.integers(0, 6), st.integers(0, 6))
def test_translation_equivariance(m, dx, dy):
    h, w = m.shape
    big = np.zeros((h + 6, w + 6), np.uint8)
    big[:h, :w] = m
    moved = np.zeros_like(big)
    moved[dy:dy + h, dx:dx + w] = m
    a, b = build_position_maps(big), build_position_maps(moved)
    np.testing.assert_array_equal(a.radius[:h, :w], b.radius[dy:dy + h, dx:dx + w])
    np.testing.assert_array_equal(a.angle[:h, :w], b.angle[dy:dy + h, dx:dx + w])


def _ellipse(h, w, a, b):
    yy, xx = np.mgrid[0:h, 0:w]
    return (((xx - (w - 1) / 2) / a) ** 2 + ((yy - (h - 1) / 2) / b) ** 2 <= 1).astype(np.uint8)


@given(st.integers(6, 20), st.integers(3, 10))
def test_scale_robustness(a, b):
    m = _ellipse(2 * b + 3, 2 * a + 3, a, b)
    big = np.kron(m, np.ones((2, 2), np.uint8))
    r1, r2 = build_position_maps(m).radius, build_position_maps(big).radius
    ys, xs = np.nonzero(m)
    # each source pixel maps onto a 2x2 block; compare the block mean
    block = (r2[2 * ys, 2 * xs] + r2[2 * ys + 1, 2 * xs] + r2[2 * ys, 2 * xs + 1] + r2[2 * ys + 1, 2 * xs + 1]) / 4
    assert np.max(np.abs(block - r1[ys, xs])) <= 0.02 or np.max(np.abs(block - r1[ys, xs])) <= 1.5 / max(a, b)


@given(st.integers(2, 15), st.integers(2, 15), st.floats(-1.5, 1.5))
def test_convex_centroid_inside(a, b, ang):
    yy, xx = np.mgrid[0:40, 0:40]
    c, s = math.cos(ang), math.sin(ang)
    u, v = (xx - 19.5) * c + (yy - 19.5) * s, -(xx - 19.5) * s + (yy - 19.5) * c
    m = ((u / a) ** 2 + (v / b) ** 2 <= 1).astype(np.uint8)
    ox, oy = compute_centroid(m)
    assert m[int(round(oy)), int(round(ox))] == 1
