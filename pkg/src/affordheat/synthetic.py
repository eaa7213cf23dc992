"""Deterministic toy clips where the affordance location depends on the prompt.

Each scene is a static tissue-like background (sum of low-frequency colored
blobs) with one or two tool sprites. Every tool travels in a straight line
towards a tissue structure and reaches it one frame after the pre-action range
ends; that contact point is the tool's landmark. The affordance quad sits at
the landmark of the prompted tool, shifted by an action-specific offset
expressed in the tool's own frame (along the heading / across it).

On two-tool scenes the rendered frames do not depend on which tool is
prompted, so the target can only be resolved through the prompt.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .conditioning import PromptTriplet, save_vocabulary
from .data_model import (
    TOOL_ACTION_PAIRS,
    AnnotationRecord,
    Manifest,
    SPLITS,
    save_manifest,
    validate_splits,
)

AFVC_MAGIC = b"AFVC"
_AFVC_HEADER = struct.Struct("<4sIII")

TOOL_PALETTE = {
    "hook": (0.15, 0.85, 0.95),
    "grasper": (0.20, 0.90, 0.25),
    "scissors": (0.25, 0.30, 0.95),
    "clipper": (0.95, 0.90, 0.20),
}

# (along heading, across heading) in px, relative to the landmark
ACTION_OFFSETS = {
    "dissect": (4.0, 0.0),
    "grasp": (0.0, 3.0),
    "clip": (2.0, -3.0),
    "cut": (6.0, 0.0),
}

TISSUE_BASE = np.array([0.78, 0.42, 0.40])
STRUCTURE_COLOR = np.array([0.45, 0.12, 0.14])

MIN_QUAD_SEPARATION = 16.0


class PlacementError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# clip container


def write_clip(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype=np.uint8)
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise ValueError(f"expected (T, H, W, 3) uint8 frames, got {frames.shape}")
    T, H, W, _ = frames.shape
    with open(path, "wb") as fh:
        fh.write(_AFVC_HEADER.pack(AFVC_MAGIC, T, H, W))
        fh.write(frames.tobytes(order="C"))


def read_clip(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _AFVC_HEADER.size:
        raise ValueError(f"{path}: truncated AFVC header")
    magic, T, H, W = _AFVC_HEADER.unpack_from(data)
    if magic != AFVC_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    n = T * H * W * 3
    body = data[_AFVC_HEADER.size:]
    if len(body) != n:
        raise ValueError(f"{path}: expected {n} frame bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(T, H, W, 3)


# ---------------------------------------------------------------------------
# seeding


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator keyed by (seed, name, keys...)."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode()), *keys]))


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    n_frames: int = 48
    pre_action_frames: int = 32
    tools: tuple[str, ...] = ("hook",)
    n_blobs: int = 6
    blob_sigma: tuple[float, float] = (8.0, 16.0)
    speed: tuple[float, float] = (0.1, 0.25)  # px/frame; slow enough that each tool stays near its landmark
    quad_half_size: tuple[float, float] = (4.0, 6.0)
    palette: dict = field(default_factory=lambda: dict(TOOL_PALETTE))
    seed: int = 0  # tool layout
    background_seed: int = 0  # tissue appearance

    def validate(self):
        if len(self.tools) not in (1, 2):
            raise ValueError("a scene holds one or two tools")
        if len(set(self.tools)) != len(self.tools):
            raise ValueError("tools in a scene must have distinct classes")
        if not 1 <= self.pre_action_frames < self.n_frames:
            raise ValueError("pre-action range must end before the clip does")
        for t in self.tools:
            if t not in self.palette:
                raise ValueError(f"no palette color for tool {t!r}")


@dataclass(frozen=True)
class ToolPath:
    tool: str
    landmark: tuple[float, float]
    heading: float  # radians
    speed: float

    @property
    def unit(self) -> tuple[float, float]:
        return math.cos(self.heading), math.sin(self.heading)

    def tip(self, t: int, contact: int) -> tuple[float, float]:
        ux, uy = self.unit
        d = self.speed * max(contact - t, 0)
        return self.landmark[0] - ux * d, self.landmark[1] - uy * d


def affordance_center(path: ToolPath, action: str) -> tuple[float, float]:
    along, across = ACTION_OFFSETS[action]
    ux, uy = path.unit
    nx, ny = -uy, ux
    return (path.landmark[0] + along * ux + across * nx,
            path.landmark[1] + along * uy + across * ny)


def _sample_paths(scene: SceneConfig, rng) -> list[ToolPath]:
    H, W = scene.height, scene.width
    contact = scene.pre_action_frames
    margin = 10.0
    for _ in range(200):
        paths = []
        for tool in scene.tools:
            lx = rng.uniform(margin, W - 1 - margin)
            ly = rng.uniform(margin, H - 1 - margin)
            heading = rng.uniform(-math.pi, math.pi)
            speed = rng.uniform(*scene.speed)
            p = ToolPath(tool, (lx, ly), heading, speed)
            sx, sy = p.tip(0, contact)
            if not (2 <= sx <= W - 3 and 2 <= sy <= H - 3):
                break
            reach = math.hypot(*[scene.quad_half_size[1] + 1.0] * 2) + 1.0
            if not all(reach <= cx <= W - 1 - reach and reach <= cy <= H - 1 - reach
                       for cx, cy in (affordance_center(p, a) for a in ACTION_OFFSETS)):
                break
            paths.append(p)
        else:
            if len(paths) == 2:
                # every action placement of one tool must stay clear of every placement of the other
                ok = all(
                    math.dist(affordance_center(paths[0], a), affordance_center(paths[1], b))
                    >= MIN_QUAD_SEPARATION + 2.0
                    for a in ACTION_OFFSETS for b in ACTION_OFFSETS
                )
                if not ok:
                    continue
            return paths
    raise PlacementError("could not place tools after 200 attempts")


def scene_paths(scene: SceneConfig) -> list[ToolPath]:
    """Tool trajectories; on repeated failure the layout seed is re-derived."""
    scene.validate()
    for attempt in range(10):
        try:
            return _sample_paths(scene, substream(scene.seed, "layout", attempt))
        except PlacementError:
            continue
    raise PlacementError(f"tool placement infeasible for scene seed {scene.seed}")


def _background(scene: SceneConfig) -> np.ndarray:
    rng = substream(scene.background_seed, "background")
    H, W = scene.height, scene.width
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.broadcast_to(TISSUE_BASE, (H, W, 3)).copy()
    for _ in range(scene.n_blobs):
        cx, cy = rng.uniform(0, W - 1), rng.uniform(0, H - 1)
        s = rng.uniform(*scene.blob_sigma)
        amp = rng.uniform(-0.18, 0.18, size=3)
        g = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * s * s))
        img += g[..., None] * amp
    return img


def _segment_distance(xs, ys, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 == 0:
        return np.hypot(xs - ax, ys - ay)
    t = np.clip(((xs - ax) * dx + (ys - ay) * dy) / L2, 0.0, 1.0)
    return np.hypot(xs - (ax + t * dx), ys - (ay + t * dy))


def _tool_coverage(xs, ys, tool: str, tip, unit) -> np.ndarray:
    """Anti-aliased alpha of the tool sprite: a shaft plus a class-specific tip."""
    ux, uy = unit
    nx, ny = -uy, ux
    tx, ty = tip
    back = (tx - 60 * ux, ty - 60 * uy)
    d = _segment_distance(xs, ys, back, tip) - 1.5
    if tool == "hook":
        elbow = (tx + 3 * nx, ty + 3 * ny)
        d = np.minimum(d, _segment_distance(xs, ys, tip, elbow) - 0.8)
    elif tool == "grasper":
        for s in (1, -1):
            jaw = (tx + 3 * ux + 2.5 * s * nx, ty + 3 * uy + 2.5 * s * ny)
            d = np.minimum(d, _segment_distance(xs, ys, tip, jaw) - 0.8)
    elif tool == "scissors":
        for s in (1, -1):
            blade = (tx + 4 * ux + 1.2 * s * nx, ty + 4 * uy + 1.2 * s * ny)
            d = np.minimum(d, _segment_distance(xs, ys, tip, blade) - 0.6)
    elif tool == "clipper":
        head = (tx + 2.5 * ux, ty + 2.5 * uy)
        d = np.minimum(d, _segment_distance(xs, ys, tip, head) - 2.2)
    return np.clip(0.5 - d, 0.0, 1.0)


def render_scene(scene: SceneConfig, paths: list[ToolPath] | None = None) -> np.ndarray:
    """(T, H, W, 3) uint8 frames."""
    if paths is None:
        paths = scene_paths(scene)
    H, W = scene.height, scene.width
    contact = scene.pre_action_frames
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    bg = _background(scene)
    for p in paths:
        # tissue structure the tool approaches
        r = np.hypot(xs - p.landmark[0], ys - p.landmark[1])
        a = np.clip(3.5 - r, 0.0, 1.0)[..., None] * 0.8
        bg = bg * (1 - a) + STRUCTURE_COLOR * a
    out = np.empty((scene.n_frames, H, W, 3), dtype=np.uint8)
    for t in range(scene.n_frames):
        img = bg.copy()
        for p in paths:
            alpha = _tool_coverage(xs, ys, p.tool, p.tip(t, contact), p.unit)[..., None]
            color = np.asarray(scene.palette[p.tool], dtype=np.float64)
            img = img * (1 - alpha) + color * alpha
        out[t] = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return out


def _quad(center, rng, half_size, H, W):
    a = rng.uniform(*half_size)
    b = rng.uniform(*half_size)
    phi = rng.uniform(0, math.pi)
    c, s = math.cos(phi), math.sin(phi)
    corners = []
    for ex, ey in ((-a, -b), (a, -b), (a, b), (-a, b)):
        jx, jy = rng.uniform(-1.0, 1.0, size=2)
        x = center[0] + c * (ex + jx) - s * (ey + jy)
        y = center[1] + s * (ex + jx) + c * (ey + jy)
        corners.append((round(min(max(x, 0.0), W - 1.0), 2), round(min(max(y, 0.0), H - 1.0), 2)))
    return tuple(corners)


def generate_clip(scene: SceneConfig, triplet: PromptTriplet, clip_id: str = "clip",
                  case_id: str = "case", split: str = "train", frames_path: str = "",
                  render: bool = True):
    """Frames and annotation for ``triplet`` on ``scene``; frames ignore the triplet."""
    triplet.validate()
    if triplet.tool not in scene.tools:
        raise ValueError(f"tool {triplet.tool!r} is not present in scene tools {scene.tools}")
    paths = scene_paths(scene)
    path = next(p for p in paths if p.tool == triplet.tool)
    center = affordance_center(path, triplet.action)
    rng = substream(scene.seed, "quad", scene.tools.index(triplet.tool),
                    list(ACTION_OFFSETS).index(triplet.action))
    keypoints = _quad(center, rng, scene.quad_half_size, scene.height, scene.width)
    frames = render_scene(scene, paths) if render else None
    record = AnnotationRecord(
        clip_id=clip_id,
        case_id=case_id,
        split=split,
        surgery=triplet.surgery,
        tool=triplet.tool,
        action=triplet.action,
        frame_count=scene.n_frames,
        frame_height=scene.height,
        frame_width=scene.width,
        pre_action_start=0,
        pre_action_end=scene.pre_action_frames - 1,
        keypoints=keypoints,
        frames_path=frames_path,
    )
    record.validate()
    return frames, record


# ---------------------------------------------------------------------------
# datasets


def split_sizes(n_cases: int, ratios) -> dict[str, int]:
    """Largest-remainder rounding of n_cases * ratios (ties broken in split order)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be 3 non-negative numbers summing to 1, got {ratios}")
    raw = [n_cases * r for r in ratios]
    sizes = [math.floor(x) for x in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n_cases - sum(sizes)]:
        sizes[i] += 1
    for s, r, n in zip(SPLITS, ratios, sizes):
        if r > 0 and n == 0:
            raise ValueError(f"{n_cases} cases too few to populate split {s!r} (ratio {r})")
    return dict(zip(SPLITS, sizes))


def assign_splits(n_cases: int, ratios, seed: int) -> list[str]:
    """Split label per case index, from a seeded permutation."""
    sizes = split_sizes(n_cases, ratios)
    perm = substream(seed, "splits").permutation(n_cases)
    labels = [""] * n_cases
    pos = 0
    for s in SPLITS:
        for i in perm[pos:pos + sizes[s]]:
            labels[int(i)] = s
        pos += sizes[s]
    return labels


def _partner_triplet(triplet: PromptTriplet, rng) -> PromptTriplet:
    """Second tool for a two-tool scene; shares the action whenever the vocabulary allows."""
    same_action = [t for t, a in TOOL_ACTION_PAIRS if a == triplet.action and t != triplet.tool]
    if same_action:
        tool = same_action[int(rng.integers(len(same_action)))]
        return PromptTriplet(triplet.surgery, tool, triplet.action)
    others = [(t, a) for t, a in TOOL_ACTION_PAIRS if t != triplet.tool]
    t, a = others[int(rng.integers(len(others)))]
    return PromptTriplet(triplet.surgery, t, a)


@dataclass
class DatasetConfig:
    n_cases: int = 20
    clips_per_case: int = 4
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    two_tool_fraction: float = 0.5
    surgery: str = "cholecystectomy"
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)


def plan_dataset(cfg: DatasetConfig) -> list[tuple[SceneConfig, PromptTriplet, AnnotationRecord]]:
    """Every clip's scene, triplet and annotation, without rendering frames."""
    return [(s, t, r) for s, t, r, _ in _iter_clips(cfg, render=False)]


def _iter_clips(cfg: DatasetConfig, render: bool):
    splits = assign_splits(cfg.n_cases, cfg.ratios, cfg.seed)
    n_two = int(round(cfg.n_cases * cfg.two_tool_fraction))
    two_tool_cases = set(int(i) for i in substream(cfg.seed, "two_tool").permutation(cfg.n_cases)[:n_two])
    pairs = list(TOOL_ACTION_PAIRS)
    for case in range(cfg.n_cases):
        case_id = f"case{case:04d}"
        two = case in two_tool_cases
        for clip in range(cfg.clips_per_case):
            if two:
                group = clip // 2  # clips 2j and 2j+1 share frames, prompts swapped
                rng = substream(cfg.seed, "triplet", case, group)
                t, a = pairs[int(rng.integers(len(pairs)))]
                first = PromptTriplet(cfg.surgery, t, a)
                second = _partner_triplet(first, rng)
                triplet = first if clip % 2 == 0 else second
                tools = (first.tool, second.tool)
                layout_key = group
            else:
                rng = substream(cfg.seed, "triplet", case, clip)
                t, a = pairs[int(rng.integers(len(pairs)))]
                triplet = PromptTriplet(cfg.surgery, t, a)
                tools = (t,)
                layout_key = 1000 + clip
            layout_seed = int(substream(cfg.seed, "scene", case, layout_key).integers(2**31))
            bg_seed = int(substream(cfg.seed, "tissue", case).integers(2**31))
            scene = replace(cfg.scene, tools=tools, seed=layout_seed, background_seed=bg_seed)
            clip_id = f"{case_id}_clip{clip:02d}"
            frames, rec = generate_clip(scene, triplet, clip_id, case_id, splits[case],
                                        f"frames/{clip_id}.afvc", render=render)
            yield scene, triplet, rec, frames


def generate_dataset(out_dir, cfg: DatasetConfig) -> Manifest:
    """Write frames/<clip_id>.afvc, manifest.jsonl and vocabulary.tsv under ``out_dir``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    records = []
    for _, _, rec, frames in _iter_clips(cfg, render=True):
        write_clip(out / rec.frames_path, frames)
        records.append(rec)
    manifest = Manifest(records=records, root=out.resolve())
    report = validate_splits(manifest)
    assert not report.leakage, report.leaking_cases
    save_manifest(manifest, out / "manifest.jsonl")
    save_vocabulary([PromptTriplet(cfg.surgery, t, a) for t, a in TOOL_ACTION_PAIRS],
                    out / "vocabulary.tsv")
    return manifest
