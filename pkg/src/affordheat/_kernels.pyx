# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled mask/polygon kernels. Same signatures as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, INFINITY

cnp.import_array()

BACKEND = "cython"


def boundary(mask):
    """Set pixels with an unset 4-neighbour or lying on the frame edge."""
    cdef cnp.uint8_t[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t H = m.shape[0], W = m.shape[1], y, x
    out_arr = np.zeros((H, W), dtype=bool)
    cdef cnp.uint8_t[:, ::1] out = out_arr.view(np.uint8)
    for y in range(H):
        for x in range(W):
            if not m[y, x]:
                continue
            if y == 0 or x == 0 or y == H - 1 or x == W - 1:
                out[y, x] = 1
            elif not m[y - 1, x] or not m[y + 1, x] or not m[y, x - 1] or not m[y, x + 1]:
                out[y, x] = 1
    return out_arr


def directed_distances(src, dst):
    """For each row of ``src`` (n, 2), the Euclidean distance to the nearest row of ``dst``."""
    cdef double[:, ::1] a = np.ascontiguousarray(src, dtype=np.float64)
    cdef double[:, ::1] b = np.ascontiguousarray(dst, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    if m == 0:
        raise ValueError("destination point set is empty")
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double best, dx, dy, d
    with nogil:
        for i in range(n):
            best = INFINITY
            for j in range(m):
                dx = a[i, 0] - b[j, 0]
                dy = a[i, 1] - b[j, 1]
                d = dx * dx + dy * dy
                if d < best:
                    best = d
                    if best == 0.0:
                        break
            out[i] = sqrt(best)
    return out_arr


cdef inline bint _on_segment(double px, double py, double ax, double ay,
                             double bx, double by) nogil:
    cdef double cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    if fabs(cross) > 1e-9:
        return False
    return (min(ax, bx) - 1e-9 <= px <= max(ax, bx) + 1e-9 and
            min(ay, by) - 1e-9 <= py <= max(ay, by) + 1e-9)


def points_in_polygon(poly, Py_ssize_t H, Py_ssize_t W):
    """Even-odd fill of pixel centres (x, y) on an H x W grid, edges inclusive."""
    cdef double[:, ::1] p = np.ascontiguousarray(poly, dtype=np.float64)
    cdef Py_ssize_t k = p.shape[0], y, x, i, j
    out_arr = np.zeros((H, W), dtype=bool)
    cdef cnp.uint8_t[:, ::1] out = out_arr.view(np.uint8)
    cdef double px, py, xi, yi, xj, yj
    cdef bint inside, edge
    with nogil:
        for y in range(H):
            py = <double>y
            for x in range(W):
                px = <double>x
                inside = False
                edge = False
                j = k - 1
                for i in range(k):
                    xi = p[i, 0]; yi = p[i, 1]
                    xj = p[j, 0]; yj = p[j, 1]
                    if _on_segment(px, py, xi, yi, xj, yj):
                        edge = True
                        break
                    if (yi > py) != (yj > py):
                        if px < (xj - xi) * (py - yi) / (yj - yi) + xi:
                            inside = not inside
                    j = i
                if edge or inside:
                    out[y, x] = 1
    return out_arr


def label4(mask):
    """4-connected component labels (1..n in raster order of first pixel) and n."""
    cdef cnp.uint8_t[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t H = m.shape[0], W = m.shape[1], y, x, cy, cx, top
    labels_arr = np.zeros((H, W), dtype=np.int32)
    cdef cnp.int32_t[:, ::1] lab = labels_arr
    stack_arr = np.empty(H * W + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] stack = stack_arr
    cdef int n = 0
    cdef Py_ssize_t idx
    with nogil:
        for y in range(H):
            for x in range(W):
                if not m[y, x] or lab[y, x]:
                    continue
                n += 1
                lab[y, x] = n
                top = 0
                stack[top] = y * W + x
                top += 1
                while top > 0:
                    top -= 1
                    idx = stack[top]
                    cy = idx // W
                    cx = idx - cy * W
                    if cy > 0 and m[cy - 1, cx] and not lab[cy - 1, cx]:
                        lab[cy - 1, cx] = n
                        stack[top] = idx - W
                        top += 1
                    if cy < H - 1 and m[cy + 1, cx] and not lab[cy + 1, cx]:
                        lab[cy + 1, cx] = n
                        stack[top] = idx + W
                        top += 1
                    if cx > 0 and m[cy, cx - 1] and not lab[cy, cx - 1]:
                        lab[cy, cx - 1] = n
                        stack[top] = idx - 1
                        top += 1
                    if cx < W - 1 and m[cy, cx + 1] and not lab[cy, cx + 1]:
                        lab[cy, cx + 1] = n
                        stack[top] = idx + 1
                        top += 1
    return labels_arr, n
