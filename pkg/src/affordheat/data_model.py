"""Annotation records, the JSON-lines clip manifest, and case-level split checks."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

SPLITS = ("train", "val", "test")

# The six (tool, action) pairs of the benchmark vocabulary.
TOOL_ACTION_PAIRS = (
    ("hook", "dissect"),
    ("grasper", "dissect"),
    ("scissors", "dissect"),
    ("grasper", "grasp"),
    ("clipper", "clip"),
    ("scissors", "cut"),
)
TOOLS = ("hook", "grasper", "scissors", "clipper")
ACTIONS = ("dissect", "grasp", "clip", "cut")

MANIFEST_FIELDS = (
    "clip_id",
    "case_id",
    "split",
    "surgery",
    "tool",
    "action",
    "frame_count",
    "frame_height",
    "frame_width",
    "pre_action_start",
    "pre_action_end",
    "keypoints",
    "frames_path",
)


class ManifestError(ValueError):
    """Raised for unparsable manifest lines."""


class ValidationError(ValueError):
    """Raised when a record violates an annotation invariant."""


def _orient(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def segments_cross(p1, p2, q1, q2):
    """True iff the segments cross at a single interior point (proper crossing)."""
    d1 = _orient(q1, q2, p1)
    d2 = _orient(q1, q2, p2)
    d3 = _orient(p1, p2, q1)
    d4 = _orient(p1, p2, q2)
    return d1 * d2 < 0 and d3 * d4 < 0


def shoelace_area(points) -> float:
    s = 0.0
    n = len(points)
    for i in range(n):
        x0, y0 = points[i]
        x1, y1 = points[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return 0.5 * s


def is_self_intersecting(points) -> bool:
    """Quadrilateral check: opposite edges must not cross."""
    p = [tuple(map(float, pt)) for pt in points]
    return segments_cross(p[0], p[1], p[2], p[3]) or segments_cross(p[1], p[2], p[3], p[0])


@dataclass(frozen=True)
class AnnotationRecord:
    clip_id: str
    case_id: str
    split: str
    surgery: str
    tool: str
    action: str
    frame_count: int
    frame_height: int
    frame_width: int
    pre_action_start: int
    pre_action_end: int
    keypoints: tuple[tuple[float, float], ...]
    frames_path: str

    @property
    def pre_action_range(self) -> tuple[int, int]:
        return self.pre_action_start, self.pre_action_end

    @property
    def triplet(self) -> tuple[str, str, str]:
        return self.surgery, self.tool, self.action

    @property
    def degenerate(self) -> bool:
        return abs(shoelace_area(self.keypoints)) < 1e-9

    def validate(self) -> None:
        cid = self.clip_id
        if self.split not in SPLITS:
            raise ValidationError(f"{cid}: split {self.split!r} not in {SPLITS}")
        if (self.tool, self.action) not in TOOL_ACTION_PAIRS:
            raise ValidationError(
                f"{cid}: (tool, action) = ({self.tool}, {self.action}) is not a known pair"
            )
        if not self.surgery:
            raise ValidationError(f"{cid}: empty surgery")
        if self.frame_count < 1 or self.frame_height < 1 or self.frame_width < 1:
            raise ValidationError(f"{cid}: non-positive frame geometry")
        if not 0 <= self.pre_action_start <= self.pre_action_end < self.frame_count:
            raise ValidationError(
                f"{cid}: pre-action range [{self.pre_action_start}, {self.pre_action_end}]"
                f" outside [0, {self.frame_count - 1}]"
            )
        if len(self.keypoints) != 4:
            raise ValidationError(f"{cid}: expected 4 keypoints, got {len(self.keypoints)}")
        W, H = self.frame_width, self.frame_height
        for x, y in self.keypoints:
            if not (0 <= x <= W - 1 and 0 <= y <= H - 1):
                raise ValidationError(
                    f"{cid}: keypoint ({x}, {y}) outside [0, {W - 1}]x[0, {H - 1}]"
                )
        if is_self_intersecting(self.keypoints):
            raise ValidationError(f"{cid}: keypoints form a self-intersecting quadrilateral")

    def to_dict(self) -> dict:
        d = {}
        for name in MANIFEST_FIELDS:
            value = getattr(self, name)
            if name == "keypoints":
                value = [float(c) for pt in value for c in pt]
            d[name] = value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        missing = [f for f in MANIFEST_FIELDS if f not in d]
        if missing:
            raise ManifestError(f"missing fields {missing}")
        extra = sorted(set(d) - set(MANIFEST_FIELDS))
        if extra:
            raise ManifestError(f"unknown fields {extra}")
        flat = d["keypoints"]
        if not isinstance(flat, list) or len(flat) != 8:
            raise ManifestError("keypoints must be an array of 8 numbers")
        kps = tuple((float(flat[2 * i]), float(flat[2 * i + 1])) for i in range(4))
        kwargs = {k: d[k] for k in MANIFEST_FIELDS if k != "keypoints"}
        for k in ("frame_count", "frame_height", "frame_width",
                  "pre_action_start", "pre_action_end"):
            if not isinstance(kwargs[k], int) or isinstance(kwargs[k], bool):
                raise ManifestError(f"field {k} must be an integer")
        for k in ("clip_id", "case_id", "split", "surgery", "tool", "action", "frames_path"):
            if not isinstance(kwargs[k], str):
                raise ManifestError(f"field {k} must be a string")
        return cls(keypoints=kps, **kwargs)


@dataclass
class Manifest:
    records: list[AnnotationRecord] = field(default_factory=list)
    vocabulary: set[tuple[str, str, str]] = field(default_factory=set)
    root: Path | None = None  # directory that relative frames_path entries resolve against

    def __post_init__(self):
        ids = [r.clip_id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate clip_id(s): {dup}")
        if not self.vocabulary:
            self.vocabulary = {r.triplet for r in self.records}
        for r in self.records:
            if r.triplet not in self.vocabulary:
                raise ValidationError(f"{r.clip_id}: triplet {r.triplet} not in vocabulary")

    def split(self, name: str) -> list[AnnotationRecord]:
        return [r for r in self.records if r.split == name]

    def frames_file(self, record: AnnotationRecord) -> Path:
        p = Path(record.frames_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def __len__(self):
        return len(self.records)


def load_manifest(path) -> Manifest:
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ManifestError("record is not an object")
                rec = AnnotationRecord.from_dict(obj)
            except (json.JSONDecodeError, ManifestError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            rec.validate()
            records.append(rec)
    return Manifest(records=records, root=path.parent.resolve())


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for r in manifest.records:
            fh.write(json.dumps(r.to_dict(), separators=(",", ":")) + "\n")


@dataclass
class SplitReport:
    case_splits: dict[str, set[str]]
    split_counts: dict[str, int]
    leaking_cases: list[str]

    @property
    def leakage(self) -> bool:
        return bool(self.leaking_cases)

    def format(self) -> str:
        lines = [f"clips per split: " + ", ".join(f"{s}={self.split_counts[s]}" for s in SPLITS)]
        lines.append(f"cases: {len(self.case_splits)}  leakage: {str(self.leakage).lower()}")
        for cid in self.leaking_cases:
            lines.append(f"  leaking case {cid}: {sorted(self.case_splits[cid])}")
        return "\n".join(lines)


def validate_splits(manifest: Manifest) -> SplitReport:
    case_splits: dict[str, set[str]] = defaultdict(set)
    counts = {s: 0 for s in SPLITS}
    for r in manifest.records:
        case_splits[r.case_id].add(r.split)
        counts[r.split] = counts.get(r.split, 0) + 1
    leaking = sorted(c for c, s in case_splits.items() if len(s) > 1)
    return SplitReport(dict(sorted(case_splits.items())), counts, leaking)
