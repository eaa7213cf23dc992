"""Gaussian target heatmaps and rasterized regions from polygon annotations.

Pixel (x, y) refers to the pixel whose centre sits at integer coordinates
(x, y); rows are y, columns are x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .data_model import is_self_intersecting, shoelace_area

DEGENERATE_AREA = 1e-9


class PolygonError(ValueError):
    pass


@dataclass
class TargetHeatmap:
    values: np.ndarray  # (H, W) float64 in (0, 1]
    centroid: tuple[float, float]
    sigma: float


@dataclass
class RegionMask:
    values: np.ndarray  # (H, W) bool
    source: str  # "polygon" or "threshold"
    empty: bool = False
    secondary_components: int = 0


def polygon_centroid(keypoints, clip_id: str | None = None) -> tuple[float, float]:
    pts = [(float(x), float(y)) for x, y in keypoints]
    if is_self_intersecting(pts):
        raise PolygonError(f"self-intersecting polygon{f' in clip {clip_id}' if clip_id else ''}")
    area = shoelace_area(pts)
    if abs(area) < DEGENERATE_AREA:
        xs, ys = zip(*pts)
        return sum(xs) / len(xs), sum(ys) / len(ys)
    cx = cy = 0.0
    n = len(pts)
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        cross = x0 * y1 - x1 * y0
        cx += (x0 + x1) * cross
        cy += (y0 + y1) * cross
    return cx / (6.0 * area), cy / (6.0 * area)


def default_sigma(keypoints, scale: float = 0.5, min_sigma: float = 1.0) -> float:
    """Half the equivalent-circle radius of the polygon, floored at ``min_sigma``."""
    area = abs(shoelace_area([(float(x), float(y)) for x, y in keypoints]))
    return max(scale * math.sqrt(area / math.pi), min_sigma)


def gaussian_target(centroid, sigma: float, H: int, W: int) -> TargetHeatmap:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if H < 1 or W < 1:
        raise ValueError(f"grid must be at least 1x1, got {H}x{W}")
    cx, cy = float(centroid[0]), float(centroid[1])
    xs = np.arange(W, dtype=np.float64)
    ys = np.arange(H, dtype=np.float64)
    d2 = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2
    g = np.exp(-d2 / (2.0 * sigma * sigma))
    g /= g.max()
    return TargetHeatmap(values=g, centroid=(cx, cy), sigma=float(sigma))


def rasterize_polygon(keypoints, H: int, W: int) -> RegionMask:
    pts = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    if abs(shoelace_area(pts.tolist())) < DEGENERATE_AREA:
        return RegionMask(np.zeros((H, W), dtype=bool), "polygon", empty=True)
    mask = kernels.points_in_polygon(pts, H, W)
    return RegionMask(mask, "polygon", empty=not mask.any())


def mask_centroid(mask) -> tuple[float, float]:
    m = mask.values if isinstance(mask, RegionMask) else np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(m)
    if len(xs) == 0:
        raise ValueError("mask is empty; centroid undefined")
    return float(xs.mean()), float(ys.mean())


def mask_centroid_heatmap(mask, sigma: float, H: int, W: int) -> TargetHeatmap:
    """Baseline conversion: Gaussian centred at the mean coordinate of set pixels."""
    return gaussian_target(mask_centroid(mask), sigma, H, W)


def polygon_heatmap(keypoints, H: int, W: int, sigma: float | None = None,
                    sigma_scale: float = 0.5) -> TargetHeatmap:
    """Convenience: centroid + default sigma + Gaussian, for an annotation quad."""
    if sigma is None:
        sigma = default_sigma(keypoints, sigma_scale)
    return gaussian_target(polygon_centroid(keypoints), sigma, H, W)


def heatmap_to_uint8(values) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def save_heatmap_png(values, path) -> None:
    from PIL import Image

    Image.fromarray(heatmap_to_uint8(values), mode="L").save(path)
