"""Logit- and boundary-conditioned metrics and the pre-action evaluation protocol."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import kernels
from .conditioning import PromptTriplet
from .model import ConfigError
from .synthetic import read_clip
from .video_encoder import build_clip_window
from .targets import RegionMask, polygon_centroid, polygon_heatmap, rasterize_polygon

METRIC_KEYS = ("dice", "pck005", "pck01", "hd_px", "assd_px")
TABLE_HEADERS = ("DICE", "PCK@0.05", "PCK@0.1", "HD(px)", "ASSD(px)")


class EmptyMaskError(ValueError):
    pass


def soft_dice(pred, target) -> float:
    """2 sum(p t) / (sum p + sum t); 1.0 when both are all-zero."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (p * t).sum() / denom)


def heatmap_to_region(heatmap, tau: float = 0.5, all_components: bool = False) -> RegionMask:
    """Pixels >= tau * max; by default only the largest 4-connected component is kept."""
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    h = np.asarray(heatmap, dtype=np.float64)
    peak = h.max()
    if not np.isfinite(peak) or peak <= 0:
        raise EmptyMaskError("heatmap has no positive activation")
    mask = h >= tau * peak
    labels, n = kernels.label4(mask)
    if all_components or n <= 1:
        return RegionMask(mask, "threshold", empty=not mask.any(), secondary_components=max(n - 1, 0))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    keep = int(np.argmax(sizes)) + 1  # lowest label wins ties
    return RegionMask(labels == keep, "threshold", secondary_components=n - 1)


def argmax_point(heatmap) -> tuple[int, int]:
    h = np.asarray(heatmap)
    y, x = divmod(int(np.argmax(h)), h.shape[1])
    return x, y


PCK_NORMS = ("diagonal", "max_side")


def pck_at(pred_heatmap, gt_centroid, alpha: float, H: int | None = None,
           W: int | None = None, norm: str = "diagonal") -> int:
    """1 iff the heatmap argmax lies within alpha * L of the ground-truth point.

    L is the image diagonal by default, or the longer side with ``norm="max_side"``.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if norm not in PCK_NORMS:
        raise ValueError(f"norm must be one of {PCK_NORMS}, got {norm!r}")
    h = np.asarray(pred_heatmap)
    H = h.shape[0] if H is None else H
    W = h.shape[1] if W is None else W
    x, y = argmax_point(h)
    d = math.hypot(x - gt_centroid[0], y - gt_centroid[1])
    scale = math.sqrt(H * H + W * W) if norm == "diagonal" else max(H, W)
    return int(d <= alpha * scale)


def _boundary_points(mask) -> np.ndarray:
    m = mask.values if isinstance(mask, RegionMask) else np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMaskError("mask is empty")
    ys, xs = np.nonzero(kernels.boundary(m))
    return np.stack([xs, ys], axis=1).astype(np.float64)


def surface_distances(mask_a, mask_b) -> tuple[np.ndarray, np.ndarray]:
    """Distances from each boundary pixel of A to the boundary of B, and vice versa."""
    pa = _boundary_points(mask_a)
    pb = _boundary_points(mask_b)
    return kernels.directed_distances(pa, pb), kernels.directed_distances(pb, pa)


def hausdorff_px(mask_a, mask_b) -> float:
    da, db = surface_distances(mask_a, mask_b)
    return float(max(da.max(), db.max()))


def assd_px(mask_a, mask_b) -> float:
    da, db = surface_distances(mask_a, mask_b)
    return float((da.sum() + db.sum()) / (len(da) + len(db)))


def select_eval_frames(start: int, end: int, n: int = 8) -> list[int]:
    """n evenly spaced frames over the earlier half of [start, end], rounded half-up, deduplicated."""
    if end < start:
        raise ValueError(f"empty pre-action range [{start}, {end}]")
    hi = start + (end - start) / 2.0
    pts = np.linspace(start, hi, n)
    return sorted({int(math.floor(p + 0.5)) for p in pts})


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    flagged: dict[str, int] = field(default_factory=lambda: {"degenerate_gt": 0, "empty_pred": 0})
    label: str = ""

    def aggregate(self) -> dict:
        out = {}
        for k in METRIC_KEYS:
            vals = [r[k] for r in self.rows if r[k] is not None and not math.isnan(r[k])]
            out[k] = float(np.mean(vals)) if vals else float("nan")
        out["n_rows"] = len(self.rows)
        out["n_clips"] = len({r["clip_id"] for r in self.rows})
        return out

    def save(self, path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            for r in self.rows:
                fh.write(json.dumps({"kind": "row", **r}) + "\n")
            fh.write(json.dumps({"kind": "aggregate", "label": self.label,
                                 **self.aggregate(), "flagged": self.flagged}) + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        rows, flagged, label = [], {}, ""
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            obj = json.loads(line)
            kind = obj.pop("kind")
            if kind == "row":
                rows.append(obj)
            else:
                flagged = obj.get("flagged", {})
                label = obj.get("label", "")
        return cls(rows=rows, flagged=flagged, label=label)

    def format_table(self) -> str:
        return format_table({self.label or "model": self.aggregate()})


def format_table(results: dict[str, dict]) -> str:
    name_w = max([len("Metrics")] + [len(k) for k in results])
    header = "Metrics".ljust(name_w) + "".join(h.rjust(11) for h in TABLE_HEADERS)
    lines = [header, "-" * len(header)]
    for name, agg in results.items():
        cells = []
        for k in METRIC_KEYS:
            v = agg.get(k, float("nan"))
            cells.append((f"{v:.3f}" if k in ("dice", "pck005", "pck01") else f"{v:.2f}").rjust(11))
        lines.append(name.ljust(name_w) + "".join(cells))
    return "\n".join(lines)


def score_prediction(pred, record, gt_centroid, gt_target, gt_region, tau=0.5,
                     all_components=False) -> dict:
    """All five metrics for one predicted heatmap; boundary metrics None when undefined."""
    H, W = record.frame_height, record.frame_width
    row = {
        "dice": soft_dice(pred, gt_target),
        "pck005": pck_at(pred, gt_centroid, 0.05, H, W),
        "pck01": pck_at(pred, gt_centroid, 0.1, H, W),
        "hd_px": None,
        "assd_px": None,
        "flag": "",
    }
    if gt_region.empty:
        row["flag"] = "degenerate_gt"
        return row
    try:
        region = heatmap_to_region(pred, tau, all_components)
    except EmptyMaskError:
        row["flag"] = "empty_pred"
        return row
    row["hd_px"] = hausdorff_px(region, gt_region)
    row["assd_px"] = assd_px(region, gt_region)
    row["secondary_components"] = region.secondary_components
    return row


def evaluate_split(model, manifest, split: str, window_N: int, stride: int,
                   sigma_scale: float = 0.5, tau: float = 0.5, all_components: bool = False,
                   n_frames: int = 8, label: str = "") -> MetricsReport:
    """Run the model on eight early pre-action frames per clip of ``split``."""
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} has no clips")
    cfg = model.config
    report = MetricsReport(label=label)
    was_training = model.training
    model.eval()
    try:
        for rec in records:
            if (rec.frame_height, rec.frame_width) != (cfg.frame_height, cfg.frame_width):
                raise ConfigError(
                    f"clip {rec.clip_id} is {rec.frame_height}x{rec.frame_width}, model expects "
                    f"{cfg.frame_height}x{cfg.frame_width}"
                )
            frames = read_clip(manifest.frames_file(rec))
            H, W = rec.frame_height, rec.frame_width
            centroid = polygon_centroid(rec.keypoints, rec.clip_id)
            target = polygon_heatmap(rec.keypoints, H, W, sigma_scale=sigma_scale).values
            region = rasterize_polygon(rec.keypoints, H, W)
            triplet = PromptTriplet(*rec.triplet)
            t_sel = select_eval_frames(rec.pre_action_start, rec.pre_action_end, n_frames)
            windows = [build_clip_window(frames, t, window_N, stride) for t in t_sel]
            with torch.no_grad():
                probs = torch.sigmoid(model.logits(windows, [triplet] * len(windows)))
            probs = probs.double().numpy()
            for t, pred in zip(t_sel, probs):
                row = score_prediction(pred, rec, centroid, target, region, tau, all_components)
                if row["flag"]:
                    report.flagged[row["flag"]] = report.flagged.get(row["flag"], 0) + 1
                report.rows.append({"clip_id": rec.clip_id, "frame": t, **row})
    finally:
        model.train(was_training)
    return report
