import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affordheat.targets import (
    PolygonError,
    default_sigma,
    gaussian_target,
    heatmap_to_uint8,
    mask_centroid_heatmap,
    polygon_centroid,
    rasterize_polygon,
    save_heatmap_png,
)

from conftest import point_in_polygon_oracle, random_simple_quad, supersampled_centroid


def test_unit_square_centroid():
    assert polygon_centroid([(0, 0), (1, 0), (1, 1), (0, 1)]) == pytest.approx((0.5, 0.5))


def test_collinear_falls_back_to_vertex_mean():
    assert polygon_centroid([(0, 0), (1, 0), (2, 0), (3, 0)]) == pytest.approx((1.5, 0.0))


def test_skewed_quad_centroid_matches_rasterization():
    quad = [(0, 0), (4, 0), (4, 2), (0, 6)]
    ox, oy = supersampled_centroid(quad)
    cx, cy = polygon_centroid(quad)
    assert abs(cx - ox) < 1e-2 and abs(cy - oy) < 1e-2
    # the vertex mean is visibly different for this quad
    assert abs(cy - 2.0) > 0.1


def test_self_intersecting_polygon_raises_with_clip():
    with pytest.raises(PolygonError, match="clipX"):
        polygon_centroid([(0, 0), (2, 2), (2, 0), (0, 2)], clip_id="clipX")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_centroid_invariant_under_cyclic_rotation(seed, k):
    quad = random_simple_quad(np.random.default_rng(seed))
    rotated = quad[k:] + quad[:k]
    assert polygon_centroid(rotated) == pytest.approx(polygon_centroid(quad), abs=1e-9)


def test_gaussian_peak_at_pixel_centre():
    t = gaussian_target((10, 20), 3.0, 32, 32)
    assert t.values[20, 10] == 1.0
    assert t.values.max() == 1.0


def test_gaussian_value_at_sigma():
    sigma = 4.0
    t = gaussian_target((16, 16), sigma, 40, 40)
    assert abs(t.values[16, 20] - math.exp(-0.5)) < 1e-6


def test_gaussian_sum_matches_direct_summation():
    cx, cy, s = 30.3, 25.7, 3.0
    t = gaussian_target((cx, cy), s, 64, 64)
    raw = [[math.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s)) for x in range(64)]
           for y in range(64)]
    peak = max(max(r) for r in raw)
    total = sum(sum(v / peak for v in r) for r in raw)
    assert t.values.sum() == pytest.approx(total, rel=1e-9)


def test_gaussian_rejects_bad_sigma():
    with pytest.raises(ValueError):
        gaussian_target((0, 0), 0.0, 4, 4)


def test_gaussian_strictly_decreasing_with_distance():
    t = gaussian_target((15, 15), 5.0, 31, 31)
    d = np.hypot(*np.meshgrid(np.arange(31) - 15.0, np.arange(31) - 15.0))
    order = np.argsort(d.ravel(), kind="stable")
    dv, vv = d.ravel()[order], t.values.ravel()[order]
    closer = dv[:-1] < dv[1:]
    assert np.all(vv[:-1][closer] > vv[1:][closer])
    assert np.all(t.values > 0)


@settings(max_examples=20, deadline=None)
@given(st.floats(2, 20), st.floats(2, 20), st.integers(0, 10), st.integers(0, 10))
def test_gaussian_translation_invariance(cx, cy, dx, dy):
    a = gaussian_target((cx, cy), 2.5, 40, 40).values
    b = gaussian_target((cx + dx, cy + dy), 2.5, 60, 60).values
    np.testing.assert_allclose(b[dy:dy + 40, dx:dx + 40], a, rtol=0, atol=1e-12)


def test_default_sigma_is_half_equivalent_radius():
    quad = [(0, 0), (10, 0), (10, 10), (0, 10)]
    assert default_sigma(quad) == pytest.approx(0.5 * math.sqrt(100 / math.pi))


def test_rasterize_rectangle_counts_boundary_centres():
    quad = [(1, 1), (4, 1), (4, 3), (1, 3)]
    m = rasterize_polygon(quad, 8, 8)
    oracle = sum(point_in_polygon_oracle(x, y, quad) for y in range(8) for x in range(8))
    assert m.values.sum() == oracle == 12
    assert not m.empty


def test_rasterize_full_frame():
    m = rasterize_polygon([(0, 0), (7, 0), (7, 7), (0, 7)], 8, 8)
    assert m.values.all()


def test_rasterize_zero_area_flags_empty():
    m = rasterize_polygon([(0, 0), (1, 1), (2, 2), (3, 3)], 8, 8)
    assert m.empty and not m.values.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_convex_centroid_inside_mask(seed):
    rng = np.random.default_rng(seed)
    # convex: rectangle with random rotation
    c = rng.uniform(15, 45, 2)
    a, b = rng.uniform(3, 10, 2)
    phi = rng.uniform(0, np.pi)
    R = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
    quad = [tuple(c + R @ v) for v in ((-a, -b), (a, -b), (a, b), (-a, b))]
    cx, cy = polygon_centroid(quad)
    m = rasterize_polygon(quad, 64, 64)
    assert m.values[int(round(cy)), int(round(cx))]


def test_mask_centroid_heatmap_single_pixel():
    m = np.zeros((16, 16), dtype=bool)
    m[5, 5] = True
    t = mask_centroid_heatmap(m, 2.0, 16, 16)
    assert np.unravel_index(t.values.argmax(), t.values.shape) == (5, 5)


def test_mask_centroid_heatmap_disk():
    yy, xx = np.mgrid[0:32, 0:32]
    m = (xx - 12.0) ** 2 + (yy - 19.0) ** 2 <= 36
    t = mask_centroid_heatmap(m, 2.0, 32, 32)
    assert math.dist(t.centroid, (12, 19)) <= 0.5


def test_mask_centroid_heatmap_random_mask_mean():
    rng = np.random.default_rng(0)
    m = rng.random((20, 30)) < 0.3
    pts = [(x, y) for y in range(20) for x in range(30) if m[y, x]]
    t = mask_centroid_heatmap(m, 2.0, 20, 30)
    assert t.centroid == pytest.approx((sum(p[0] for p in pts) / len(pts),
                                        sum(p[1] for p in pts) / len(pts)), abs=1e-12)


def test_mask_centroid_heatmap_empty_raises():
    with pytest.raises(ValueError):
        mask_centroid_heatmap(np.zeros((4, 4), dtype=bool), 1.0, 4, 4)


def test_uint8_export(tmp_path):
    t = gaussian_target((3, 3), 1.0, 8, 8)
    img = heatmap_to_uint8(t.values)
    assert img[3, 3] == 255 and img.dtype == np.uint8
    save_heatmap_png(t.values, tmp_path / "h.png")
    from PIL import Image

    back = np.asarray(Image.open(tmp_path / "h.png"))
    np.testing.assert_array_equal(back, img)
