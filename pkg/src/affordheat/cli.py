"""Command-line entry point: gen-data, train, eval, predict, ablate, validate.

Exit codes: 0 ok, 1 usage, 2 data or validation problem, 3 numeric failure.
Failures print one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import struct
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .conditioning import PromptTriplet, VocabularyError
from .data_model import ManifestError, ValidationError, load_manifest, validate_splits
from .metrics import MetricsReport, evaluate_split, format_table
from .model import ConfigError, predict
from .synthetic import DatasetConfig, PlacementError, SceneConfig, generate_dataset, read_clip
from .targets import PolygonError, heatmap_to_uint8
from .trainer import (
    ABLATIONS,
    NumericError,
    config_fields,
    format_config,
    load_checkpoint,
    parse_config_text,
    train,
)
from .video_encoder import build_clip_window

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("affordheat")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config flags


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    """One --flag per config key; values stay strings and are coerced by the config parser."""
    g = p.add_argument_group("config overrides")
    for key in config_fields():
        g.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, metavar="V")


def _overrides(args) -> dict[str, str]:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def _load_configs(args):
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    return parse_config_text(text, _overrides(args))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> list[Path]:
    scene = SceneConfig(height=args.height, width=args.width, n_frames=args.n_frames,
                        pre_action_frames=args.pre_action_frames, n_blobs=args.n_blobs,
                        quad_half_size=tuple(float(v) for v in args.quad_half_size.split(",")),
                        speed=tuple(float(v) for v in args.speed.split(",")))
    ratios = tuple(float(r) for r in args.ratios.split(","))
    cfg = DatasetConfig(n_cases=args.n_cases, clips_per_case=args.clips_per_case, ratios=ratios,
                        two_tool_fraction=args.two_tool_fraction, surgery=args.surgery,
                        seed=args.seed, scene=scene)
    m = generate_dataset(args.out, cfg)
    out = Path(args.out)
    print(f"wrote {len(m)} clips to {out}")
    return [out / "manifest.jsonl", out / "vocabulary.tsv"]


def cmd_train(args) -> list[Path]:
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is None:
        train_cfg, model_cfg = _load_configs(args)
    else:
        train_cfg, model_cfg = resume.train_config, resume.model_config
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(train_cfg, model_cfg), encoding="utf-8")
    r = train(manifest, train_cfg, model_cfg, out_dir=out, resume=resume,
              stop_after=args.stop_after, log_path=out / "train_log.jsonl")
    print(f"trained {len(r.history)} steps, {r.param_count} parameters; checkpoint {out / 'last.afht'}")
    return [out / "last.afht", out / "train_log.jsonl"]


def _eval_report(ckpt_path, manifest, split, tau, all_components, label) -> MetricsReport:
    ck = load_checkpoint(ckpt_path)
    model = ck.build_model()
    t = ck.train_config
    return evaluate_split(model, manifest, split, t.window_N, t.stride, t.sigma_scale, tau,
                          all_components, label=label)


def cmd_eval(args) -> list[Path]:
    manifest = load_manifest(args.manifest)
    rep = _eval_report(args.checkpoint, manifest, args.split, args.tau, args.all_components,
                       args.label or Path(args.checkpoint).stem)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.save(out)
    print(rep.format_table())
    print(f"flagged: {rep.flagged}")
    return [out]


def _hot(v: np.ndarray) -> np.ndarray:
    """Black-red-yellow-white colormap of values in [0, 1]."""
    v = np.clip(v, 0.0, 1.0)
    rgb = np.stack([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], -1)
    return rgb


def write_heatmap_grid(path, heat: np.ndarray) -> None:
    """u32 height, u32 width, then row-major little-endian float32."""
    h = np.ascontiguousarray(heat, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *h.shape))
        fh.write(h.tobytes())


def read_heatmap_grid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    H, W = struct.unpack_from("<II", data, 0)
    return np.frombuffer(data, dtype="<f4", count=H * W, offset=8).reshape(H, W).copy()


def cmd_predict(args) -> list[Path]:
    ck = load_checkpoint(args.checkpoint)
    model = ck.build_model()
    frames = read_clip(args.clip)
    t = frames.shape[0] - 1 if args.frame is None else args.frame
    if not 0 <= t < frames.shape[0]:
        raise ValidationError(f"frame {t} outside clip of {frames.shape[0]} frames")
    window = build_clip_window(frames, t, ck.train_config.window_N, ck.train_config.stride)
    triplet = PromptTriplet(args.surgery, args.tool, args.action)
    heat = predict(window, triplet, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid, gray, over = out / "heatmap.f32", out / "heatmap.png", out / "overlay.png"
    write_heatmap_grid(grid, heat)
    Image.fromarray(heatmap_to_uint8(heat), mode="L").save(gray)
    norm = heat / heat.max() if heat.max() > 0 else heat
    frame = frames[t].astype(np.float64) / 255.0
    blend = 0.5 * frame + 0.5 * _hot(norm)
    Image.fromarray(np.round(blend * 255).astype(np.uint8), mode="RGB").save(over)
    y, x = np.unravel_index(int(np.argmax(heat)), heat.shape)
    print(f"peak {heat.max():.4f} at x={x} y={y}")
    return [grid, gray, over]


def cmd_ablate(args) -> list[Path]:
    manifest = load_manifest(args.manifest)
    overrides = _overrides(args)
    overrides["ablation"] = args.preset
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    train_cfg, model_cfg = parse_config_text(text, overrides)
    out = Path(args.out)
    run_dir = out / args.preset
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(format_config(train_cfg, model_cfg), encoding="utf-8")
    r = train(manifest, train_cfg, model_cfg, out_dir=run_dir, log_path=run_dir / "train_log.jsonl")
    rep = evaluate_split(r.model, manifest, args.split, r.checkpoint.train_config.window_N,
                         r.checkpoint.train_config.stride, r.checkpoint.train_config.sigma_scale,
                         label=args.preset)
    rep.save(run_dir / f"{args.split}_metrics.jsonl")
    results_path = out / "comparison.json"
    results = json.loads(results_path.read_text()) if results_path.exists() else {}
    results[args.preset] = rep.aggregate()
    results_path.write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
    table = format_table(results)
    (out / "comparison.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return [results_path, out / "comparison.txt", run_dir / "last.afht"]


def cmd_validate(args) -> list[Path]:
    report = validate_splits(load_manifest(args.manifest))
    print(report.format())
    if report.leakage:
        raise ValidationError(f"case-level split leakage in cases {sorted(report.leaking_cases)}")
    return []


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="affordheat", description="Prompt-conditioned affordance heatmaps.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-cases", type=int, default=20)
    g.add_argument("--clips-per-case", type=int, default=4)
    g.add_argument("--ratios", default="0.7,0.1,0.2")
    g.add_argument("--two-tool-fraction", type=float, default=0.5)
    g.add_argument("--surgery", default="cholecystectomy")
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--n-frames", type=int, default=48)
    g.add_argument("--pre-action-frames", type=int, default=32)
    g.add_argument("--n-blobs", type=int, default=6)
    g.add_argument("--quad-half-size", default="4,6", help="min,max quad half extent (px)")
    g.add_argument("--speed", default="0.1,0.25", help="min,max tool speed (px/frame)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, help="stop after this many total steps")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out", required=True, help="metrics report (JSONL)")
    e.add_argument("--tau", type=float, default=0.5)
    e.add_argument("--all-components", action="store_true")
    e.add_argument("--label", default="")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("predict", help="heatmap for one clip and prompt")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--clip", required=True, help=".afvc frame file")
    q.add_argument("--frame", type=int, help="target frame (default: last)")
    q.add_argument("--surgery", default="cholecystectomy")
    q.add_argument("--tool", required=True)
    q.add_argument("--action", required=True)
    q.add_argument("--out", required=True, help="output directory")
    q.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", help="train and evaluate one ablation preset")
    a.add_argument("preset", choices=ABLATIONS)
    a.add_argument("--manifest", required=True)
    a.add_argument("--config")
    a.add_argument("--out", required=True, help="directory holding the comparison table")
    a.add_argument("--split", default="test", choices=("train", "val", "test"))
    _add_config_flags(a)
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("validate", help="check a manifest's case-level splits")
    v.add_argument("--manifest", required=True)
    v.set_defaults(func=cmd_validate)
    return p


_DATA_ERRORS = (ConfigError, ManifestError, ValidationError, VocabularyError, PolygonError,
                PlacementError, FileNotFoundError, ValueError, KeyError)
_NUMERIC_ERRORS = (NumericError, FloatingPointError)


def _fail(code: int, exc: BaseException | str) -> int:
    kind = "UsageError" if isinstance(exc, str) else type(exc).__name__
    msg = exc if isinstance(exc, str) else str(exc)
    sys.stderr.write(json.dumps({"exit": code, "error": kind, "message": " ".join(msg.split())}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except _NUMERIC_ERRORS as exc:
        return _fail(EXIT_NUMERIC, exc)
    except _DATA_ERRORS as exc:
        return _fail(EXIT_DATA, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
