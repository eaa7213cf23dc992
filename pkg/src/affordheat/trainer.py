"""Training loop, augmentation, ablation presets and the AFHT checkpoint format."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .conditioning import PromptTriplet
from .data_model import Manifest, validate_splits
from .metrics import MetricsReport, evaluate_split
from .model import AffordanceModel, ConfigError, ModelConfig, count_parameters
from .objectives import total_loss
from .synthetic import read_clip
from .targets import TargetHeatmap, gaussian_target, polygon_heatmap
from .video_encoder import ClipWindow, build_clip_window, clip_to_tensor

log = logging.getLogger(__name__)

ABLATIONS = (
    "none",
    "no_language",
    "no_tool",
    "no_action",
    "no_history",
    "no_augment",
    "xattn_decoder",
    "conv_encoder",
)
AUGMENTATIONS = ("hflip", "brightness", "crop")
FREEZABLE = ("conditioner", "encoder", "decoder")


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    lr_min: float = 0.0
    epochs: int = 40
    batch: int = 8
    lambda_iou: float = 1.0
    seed: int = 0
    augment: tuple[str, ...] = AUGMENTATIONS
    window_N: int = 8
    stride: int = 8
    ablation: str = "none"
    weight_decay: float = 0.01
    max_steps: int = 0  # 0: epochs * steps_per_epoch
    eval_every: int = 1  # epochs between validation runs; 0 disables
    sigma_scale: float = 0.5
    freeze: tuple[str, ...] = ()
    threads: int = 1
    dtype: str = "float32"

    def validate(self) -> None:
        if not self.lr0 > self.lr_min >= 0:
            raise ConfigError(f"need lr0 > lr_min >= 0, got {self.lr0}, {self.lr_min}")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")
        if self.window_N < 1 or self.stride < 1:
            raise ConfigError("window_N and stride must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        bad = set(self.augment) - set(AUGMENTATIONS)
        if bad:
            raise ConfigError(f"unknown augmentations {sorted(bad)}")
        bad = set(self.freeze) - set(FREEZABLE)
        if bad:
            raise ConfigError(f"unknown freeze targets {sorted(bad)}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def apply_ablation(train_cfg: TrainConfig, model_cfg: ModelConfig):
    """Configs with the named preset applied; only the ablated component changes."""
    name = train_cfg.ablation
    t = dataclasses.replace(train_cfg)
    m = dataclasses.replace(model_cfg)
    if name in ("no_language", "no_tool", "no_action"):
        m.cond_mode = name
    elif name == "no_history":
        t.window_N = 1
    elif name == "no_augment":
        t.augment = ()
    elif name == "xattn_decoder":
        m.decoder = "xattn"
    elif name == "conv_encoder":
        m.encoder = "conv"
    elif name != "none":
        raise ConfigError(f"unknown ablation {name!r}")
    return t, m


# ---------------------------------------------------------------------------
# flat key=value config files


def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        items = [v.strip() for v in value.split(",") if v.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(v) for v in items)
        if default and isinstance(default[0], float):
            return tuple(float(v) for v in items)
        return tuple(items)
    return value


def config_fields() -> dict[str, tuple[str, object]]:
    """key -> (owner, default) for every TrainConfig and ModelConfig field."""
    out = {}
    for owner, cls in (("model", ModelConfig), ("train", TrainConfig)):
        inst = cls()
        for f in dataclasses.fields(cls):
            out[f.name] = (owner, getattr(inst, f.name))
    return out


def parse_config_text(text: str, overrides: dict[str, str] | None = None):
    """Parse ``key = value`` lines (``#`` comments) into (TrainConfig, ModelConfig)."""
    fields_ = config_fields()
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        raw[k] = v
    raw.update(overrides or {})
    train_kw, model_kw = {}, {}
    for k, v in raw.items():
        if k not in fields_:
            raise ConfigError(f"unknown config key {k!r}")
        owner, default = fields_[k]
        try:
            value = _coerce(v, default)
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {exc}") from exc
        (train_kw if owner == "train" else model_kw)[k] = value
    t = TrainConfig(**train_kw)
    m = ModelConfig(**model_kw)
    t.validate()
    m.validate()
    return t, m


def format_config(train_cfg: TrainConfig, model_cfg: ModelConfig) -> str:
    lines = []
    for cfg in (model_cfg, train_cfg):
        for f in dataclasses.fields(cfg):
            v = getattr(cfg, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# schedule, sampling, augmentation


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        return lr_min
    step = min(max(step, 0), total_steps)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def sample_target_frame(record, rng: np.random.Generator) -> int:
    lo, hi = record.pre_action_start, record.pre_action_end
    if hi < lo:
        raise ValueError(f"{record.clip_id}: empty pre-action range [{lo}, {hi}]")
    return int(rng.integers(lo, hi + 1))


def keyed_rng(seed: int, epoch: int, clip_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, zlib.crc32(clip_id.encode())]))


def hflip(clip: ClipWindow, target: TargetHeatmap):
    W = clip.frames.shape[2]
    frames = np.ascontiguousarray(clip.frames[:, :, ::-1])
    values = np.ascontiguousarray(target.values[:, ::-1])
    cx, cy = target.centroid
    return (dataclasses.replace(clip, frames=frames),
            TargetHeatmap(values, (W - 1 - cx, cy), target.sigma))


def _resize(arr: np.ndarray, H: int, W: int) -> np.ndarray:
    """Bilinear (align_corners=False) resize of (..., h, w) float arrays."""
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))
    lead = t.shape[:-2]
    t = t.reshape(1, -1, *t.shape[-2:])
    out = F.interpolate(t, size=(H, W), mode="bilinear", align_corners=False)
    return out.reshape(*lead, H, W).numpy()


def crop_point(x: float, y: float, x0: int, y0: int, cw: int, ch: int, W: int, H: int):
    """Where (x, y) lands after cropping [x0, x0+cw) x [y0, y0+ch) and resizing to W x H."""
    return (x - x0 + 0.5) * W / cw - 0.5, (y - y0 + 0.5) * H / ch - 0.5


def crop_resize(clip: ClipWindow, target: TargetHeatmap, x0: int, y0: int, cw: int, ch: int):
    T, H, W, C = clip.frames.shape
    sub = clip.frames[:, y0:y0 + ch, x0:x0 + cw, :].transpose(0, 3, 1, 2)
    frames = _resize(sub, H, W).transpose(0, 2, 3, 1).astype(np.float32)
    frames = np.clip(frames, 0.0, 1.0)
    cx, cy = crop_point(*target.centroid, x0, y0, cw, ch, W, H)
    sigma = target.sigma * math.sqrt((W / cw) * (H / ch))
    return dataclasses.replace(clip, frames=frames), gaussian_target((cx, cy), sigma, H, W)


def augment(clip: ClipWindow, target: TargetHeatmap, rng: np.random.Generator, flags):
    flags = set(flags)
    bad = flags - set(AUGMENTATIONS)
    if bad:
        raise ValueError(f"unknown augmentations {sorted(bad)}")
    T, H, W, C = clip.frames.shape
    if "hflip" in flags and rng.random() < 0.5:
        clip, target = hflip(clip, target)
    if "brightness" in flags:
        b = rng.uniform(0.8, 1.2)
        c = rng.uniform(0.8, 1.2)
        m = clip.frames.mean()
        frames = np.clip((clip.frames - m) * c + m * b, 0.0, 1.0).astype(np.float32)
        clip = dataclasses.replace(clip, frames=frames)
    if "crop" in flags:
        cx, cy = target.centroid
        for _ in range(10):
            s = rng.uniform(0.8, 1.0)
            cw, ch = max(1, int(round(s * W))), max(1, int(round(s * H)))
            x0 = int(rng.integers(0, W - cw + 1))
            y0 = int(rng.integers(0, H - ch + 1))
            if x0 <= cx <= x0 + cw - 1 and y0 <= cy <= y0 + ch - 1:
                clip, target = crop_resize(clip, target, x0, y0, cw, ch)
                break
    return clip, target


# ---------------------------------------------------------------------------
# data


class TrainingData:
    """Frames of every clip in a manifest held in memory, plus per-clip targets."""

    def __init__(self, manifest: Manifest, sigma_scale: float = 0.5):
        self.manifest = manifest
        self.sigma_scale = sigma_scale
        self.frames = {}
        self.targets = {}
        geoms = {(r.frame_height, r.frame_width) for r in manifest.records}
        if len(geoms) > 1:
            raise ConfigError(f"mixed frame geometries in manifest: {sorted(geoms)}")
        for r in manifest.records:
            self.frames[r.clip_id] = read_clip(manifest.frames_file(r))
            tgt = polygon_heatmap(r.keypoints, r.frame_height, r.frame_width,
                                  sigma_scale=sigma_scale)
            if not tgt.values.any():
                raise ValueError(f"{r.clip_id}: all-zero target")
            self.targets[r.clip_id] = tgt

    @property
    def geometry(self):
        r = self.manifest.records[0]
        return r.frame_height, r.frame_width


def make_batch(records, data: TrainingData, cfg: TrainConfig, epoch: int, model):
    windows, targets, triplets = [], [], []
    for r in records:
        rng = keyed_rng(cfg.seed, epoch, r.clip_id)
        t0 = sample_target_frame(r, rng)
        clip = build_clip_window(data.frames[r.clip_id], t0, cfg.window_N, cfg.stride)
        target = data.targets[r.clip_id]
        if cfg.augment:
            clip, target = augment(clip, target, rng, cfg.augment)
        windows.append(clip)
        targets.append(target.values)
        triplets.append(PromptTriplet(*r.triplet))
    dtype = next(model.parameters()).dtype
    x = clip_to_tensor(windows).to(dtype)
    y = torch.from_numpy(np.stack(targets)).to(dtype)
    idx = model.conditioner.indices(triplets)
    return x, idx, y


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"AFHT"
CKPT_VERSION = 1
_DTYPES = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8"), 2: (torch.int64, "<i8")}
_DTYPE_CODES = {v[0]: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    tensors: dict[str, torch.Tensor]
    step: int = 0
    extra: dict = field(default_factory=dict)

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k[len("model."):]: v for k, v in self.tensors.items() if k.startswith("model.")}

    def optim_state(self) -> dict[str, dict[str, torch.Tensor]]:
        out: dict[str, dict[str, torch.Tensor]] = {}
        for k, v in self.tensors.items():
            if k.startswith("optim."):
                pname, slot = k[len("optim."):].rsplit(".", 1)
                out.setdefault(pname, {})[slot] = v
        return out

    def build_model(self) -> AffordanceModel:
        model = AffordanceModel(self.model_config)
        state = self.model_state()
        dtype = next(iter(state.values())).dtype if state else torch.float32
        model.to(dtype)
        model.load_state_dict(state)
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = json.dumps({
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "step": ckpt.step,
        "extra": ckpt.extra,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for name, t in ckpt.tensors.items():
            t = t.detach().cpu().contiguous()
            if t.dtype not in _DTYPE_CODES:
                raise TypeError(f"cannot serialize {name} of dtype {t.dtype}")
            code = _DTYPE_CODES[t.dtype]
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, t.dim()))
            fh.write(struct.pack(f"<{t.dim()}I", *t.shape))
            fh.write(t.numpy().astype(_DTYPES[code][1], copy=False).tobytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an AFHT checkpoint")
    version, blob_len = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(data[off:off + blob_len].decode("utf-8"))
    off += blob_len
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nl].decode("utf-8")
        off += nl
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        tdtype, npdtype = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        nbytes = count * np.dtype(npdtype).itemsize
        arr = np.frombuffer(data, dtype=npdtype, count=count, offset=off).reshape(shape)
        off += nbytes
        tensors[name] = torch.from_numpy(arr.copy())
    return Checkpoint(
        model_config=ModelConfig.from_dict(meta["model_config"]),
        train_config=TrainConfig.from_dict(meta["train_config"]),
        tensors=tensors,
        step=meta["step"],
        extra=meta.get("extra", {}),
    )


def make_checkpoint(model, optimizer, train_cfg, step, extra=None) -> Checkpoint:
    tensors = {f"model.{k}": v.detach().clone() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, st in optimizer.state.items():
            for slot, v in st.items():
                if torch.is_tensor(v):
                    tensors[f"optim.{names[id(p)]}.{slot}"] = v.detach().clone()
    return Checkpoint(model.config, train_cfg, tensors, step, dict(extra or {}))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: AffordanceModel
    checkpoint: Checkpoint
    history: list[dict]
    val_reports: list[MetricsReport]
    param_count: int


def _better(a: dict, b: dict | None) -> bool:
    if b is None:
        return True
    if a["pck01"] != b["pck01"]:
        return a["pck01"] > b["pck01"]
    return a["assd_px"] < b["assd_px"]


def train(manifest: Manifest, train_cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          out_dir=None, resume: Checkpoint | None = None, stop_after: int | None = None,
          log_path=None) -> TrainResult:
    """Optimize the model on the manifest's train split.

    ``train_cfg.ablation`` is applied on top of ``model_cfg``. ``stop_after``
    ends the run after that many total steps (the schedule still spans the full
    run), which is how mid-run checkpoints are produced.
    """
    if resume is not None:
        train_cfg, model_cfg = resume.train_config, resume.model_config
    else:
        model_cfg = model_cfg or ModelConfig()
        train_cfg.validate()
        train_cfg, model_cfg = apply_ablation(train_cfg, model_cfg)
    torch.set_num_threads(train_cfg.threads)

    train_recs = manifest.split("train")
    if not train_recs:
        raise ValueError("train split is empty")
    report = validate_splits(manifest)
    if report.leakage:
        raise ValueError(f"case-level split leakage: {report.leaking_cases}")
    data = TrainingData(manifest, train_cfg.sigma_scale)
    if data.geometry != (model_cfg.frame_height, model_cfg.frame_width):
        raise ConfigError(f"data geometry {data.geometry} != model geometry "
                          f"{(model_cfg.frame_height, model_cfg.frame_width)}")

    dtype = torch.float64 if train_cfg.dtype == "float64" else torch.float32
    torch.manual_seed(train_cfg.seed)
    model = AffordanceModel(model_cfg).to(dtype)
    for name in train_cfg.freeze:
        for p in getattr(model, name).parameters():
            p.requires_grad_(False)
    trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    optimizer = None
    if trainable:
        optimizer = torch.optim.AdamW([p for _, p in trainable], lr=train_cfg.lr0,
                                      betas=(0.9, 0.999), eps=1e-8,
                                      weight_decay=train_cfg.weight_decay)
    start = 0
    if resume is not None:
        model.load_state_dict(resume.model_state())
        if optimizer is not None:
            params = dict(model.named_parameters())
            for pname, slots in resume.optim_state().items():
                optimizer.state[params[pname]] = {k: v.clone() for k, v in slots.items()}
        start = resume.step

    n_params = count_parameters(model)
    log.info("ablation=%s parameters=%d trainable=%d", train_cfg.ablation, n_params,
             sum(p.numel() for _, p in trainable))
    spe = math.ceil(len(train_recs) / train_cfg.batch)
    total = train_cfg.max_steps or train_cfg.epochs * spe
    end = total if stop_after is None else min(total, stop_after)
    val_recs = manifest.split("val")

    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    history, val_reports = [], []
    best = None
    extra = {"param_count": n_params}
    model.train()
    try:
        for step in range(start, end):
            epoch, b = divmod(step, spe)
            order = np.random.default_rng([train_cfg.seed, epoch, 7]).permutation(len(train_recs))
            batch = [train_recs[i] for i in order[b * train_cfg.batch:(b + 1) * train_cfg.batch]]
            lr = cosine_lr(step, total, train_cfg.lr0, train_cfg.lr_min)
            x, idx, y = make_batch(batch, data, train_cfg, epoch, model)
            logits = model(x, idx)
            loss = total_loss(logits, y, train_cfg.lambda_iou)
            if not torch.isfinite(loss.total):
                raise NumericError(
                    f"non-finite loss at step {step}; clips {[r.clip_id for r in batch]}"
                )
            if optimizer is not None:
                for g in optimizer.param_groups:
                    g["lr"] = lr
                optimizer.zero_grad(set_to_none=True)
                loss.total.backward()
                optimizer.step()
            rec = {"step": step, **loss.as_floats(), "lr": lr}
            history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
            epoch_done = (step + 1) % spe == 0 or step + 1 == total
            if epoch_done and val_recs and train_cfg.eval_every and \
                    (epoch + 1) % train_cfg.eval_every == 0:
                rep = evaluate_split(model, manifest, "val", train_cfg.window_N, train_cfg.stride,
                                     train_cfg.sigma_scale, label=f"epoch{epoch}")
                val_reports.append(rep)
                agg = rep.aggregate()
                log.info("epoch %d val %s", epoch, agg)
                if _better(agg, best):
                    best = agg
                    if out:
                        save_checkpoint(make_checkpoint(model, optimizer, train_cfg, step + 1,
                                                        {**extra, "val": agg}), out / "best.afht")
    finally:
        if log_fh:
            log_fh.close()
    ckpt = make_checkpoint(model, optimizer, train_cfg, end, extra)
    if out:
        save_checkpoint(ckpt, out / "last.afht")
    return TrainResult(model, ckpt, history, val_reports, n_params)
