"""numpy/scipy implementations of the mask and polygon kernels.

Used when the compiled ``_kernels`` extension is unavailable or disabled via
``AFFORDHEAT_PURE_PYTHON=1``.
"""

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

BACKEND = "python"

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def boundary(mask):
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def directed_distances(src, dst):
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(dst) == 0:
        raise ValueError("destination point set is empty")
    if len(src) == 0:
        return np.empty(0, dtype=np.float64)
    dist, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(dist, dtype=np.float64)


def points_in_polygon(poly, H, W):
    poly = np.asarray(poly, dtype=np.float64)
    ys, xs = np.mgrid[0:H, 0:W]
    px = xs.astype(np.float64)
    py = ys.astype(np.float64)
    inside = np.zeros((H, W), dtype=bool)
    edge = np.zeros((H, W), dtype=bool)
    k = len(poly)
    for i in range(k):
        xi, yi = poly[i]
        xj, yj = poly[i - 1]
        cross = (xj - xi) * (py - yi) - (yj - yi) * (px - xi)
        edge |= (
            (np.abs(cross) <= 1e-9)
            & (px >= min(xi, xj) - 1e-9) & (px <= max(xi, xj) + 1e-9)
            & (py >= min(yi, yj) - 1e-9) & (py <= max(yi, yj) + 1e-9)
        )
        straddle = (yi > py) != (yj > py)
        if yj != yi:
            x_cross = (xj - xi) * (py - yi) / (yj - yi) + xi
            inside ^= straddle & (px < x_cross)
    return inside | edge


def label4(mask):
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_FOUR_CONN)
    return labels.astype(np.int32), int(n)
