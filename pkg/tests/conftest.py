import math

import numpy as np
import pytest
import torch

from affordheat import kernels


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request):
    return kernels.available_backends()[request.param]


# --- independent oracles -----------------------------------------------------


def boundary_oracle(mask):
    H, W = mask.shape
    out = set()
    for y in range(H):
        for x in range(W):
            if not mask[y, x]:
                continue
            if y in (0, H - 1) or x in (0, W - 1):
                out.add((x, y))
                continue
            if not (mask[y - 1, x] and mask[y + 1, x] and mask[y, x - 1] and mask[y, x + 1]):
                out.add((x, y))
    return out


def all_pairs_hd_assd(mask_a, mask_b):
    """O(n*m) brute force over boundary pixel pairs."""
    a = sorted(boundary_oracle(mask_a))
    b = sorted(boundary_oracle(mask_b))
    da = [min(math.hypot(x - u, y - v) for u, v in b) for x, y in a]
    db = [min(math.hypot(x - u, y - v) for u, v in a) for x, y in b]
    return max(max(da), max(db)), (sum(da) + sum(db)) / (len(da) + len(db))


def point_in_polygon_oracle(px, py, poly):
    """Even-odd crossing test; points on an edge count as inside."""
    n = len(poly)
    for i in range(n):
        (ax, ay), (bx, by) = poly[i], poly[(i + 1) % n]
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        if abs(cross) <= 1e-9 and min(ax, bx) - 1e-9 <= px <= max(ax, bx) + 1e-9 \
                and min(ay, by) - 1e-9 <= py <= max(ay, by) + 1e-9:
            return True
    inside = False
    j = n - 1
    for i in range(n):
        xi, yi = poly[i]
        xj, yj = poly[j]
        if (yi > py) != (yj > py) and px < (xj - xi) * (py - yi) / (yj - yi) + xi:
            inside = not inside
        j = i
    return inside


def supersampled_centroid(poly, samples=2000):
    """Centroid of the polygon's fill on a fine midpoint grid over its bounding box."""
    poly = np.asarray(poly, dtype=np.float64)
    x0, y0 = poly.min(axis=0)
    x1, y1 = poly.max(axis=0)
    xs = x0 + (np.arange(samples) + 0.5) * (x1 - x0) / samples
    sx = sy = n = 0.0
    for yrow in np.array_split(y0 + (np.arange(samples) + 0.5) * (y1 - y0) / samples, 20):
        X, Y = np.meshgrid(xs, yrow)
        inside = np.zeros(X.shape, dtype=bool)
        for i in range(len(poly)):
            xi, yi = poly[i]
            xj, yj = poly[i - 1]
            if yi == yj:
                continue
            straddle = (yi > Y) != (yj > Y)
            inside ^= straddle & (X < (xj - xi) * (Y - yi) / (yj - yi) + xi)
        sx += X[inside].sum()
        sy += Y[inside].sum()
        n += inside.sum()
    return sx / n, sy / n


def random_simple_quad(rng, lo=0.0, hi=63.0, min_area=4.0):
    while True:
        pts = rng.uniform(lo, hi, size=(4, 2))
        c = pts.mean(axis=0)
        order = np.argsort(np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0]))
        pts = pts[order]
        x, y = pts[:, 0], pts[:, 1]
        area = 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))
        if area >= min_area:
            return [tuple(p) for p in pts]


def random_mask_pair(rng, H=32, W=32):
    """Blob-ish random masks: thresholded smoothed noise, guaranteed non-empty."""
    from scipy.ndimage import gaussian_filter

    out = []
    for _ in range(2):
        noise = gaussian_filter(rng.normal(size=(H, W)), sigma=rng.uniform(1.0, 3.0))
        m = noise > np.quantile(noise, rng.uniform(0.5, 0.9))
        if not m.any():
            m[rng.integers(H), rng.integers(W)] = True
        out.append(m)
    return out


def fd_relative_errors(loss_fn, params, frac=0.01, h=1e-4, seed=0, min_count=3, floor=1e-8):
    """Central finite differences vs autograd on a random subset of parameter entries.

    Uses the fourth-order stencil (f(-2h) - 8f(-h) + 8f(h) - f(2h)) / 12h so that
    roundoff, not truncation, bounds the error even for gradients near 1e-7.

    Returns the list of relative errors |a - n| / max(|a|, |n|, floor). The floor
    acts as an absolute tolerance for entries whose gradient vanishes identically
    (a key bias under softmax, an unused embedding row), where only roundoff is left.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    total = sum(p.numel() for p in params)
    k = max(min_count, int(math.ceil(frac * total)))
    gen = np.random.default_rng(seed)
    flat_choices = gen.choice(total, size=min(k, total), replace=False)
    offsets = np.cumsum([0] + [p.numel() for p in params])
    errs = []
    with torch.no_grad():
        for c in flat_choices:
            i = int(np.searchsorted(offsets, c, side="right") - 1)
            j = int(c - offsets[i])
            p = params[i].view(-1)
            orig = p[j].item()
            f = {}
            for k in (-2, -1, 1, 2):
                p[j] = orig + k * h
                f[k] = loss_fn().item()
            p[j] = orig
            num = (f[-2] - 8 * f[-1] + 8 * f[1] - f[2]) / (12 * h)
            ana = grads[i].view(-1)[j].item()
            errs.append(abs(ana - num) / max(abs(ana), abs(num), floor))
    return errs


def randomize_(module, seed=0, std=0.2):
    """Overwrite every parameter with random values (breaks zero-inits for gradient checks)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return module
