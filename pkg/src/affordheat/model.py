"""Model configuration and the end-to-end affordance model."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .conditioning import ConditionEncoder, PromptTriplet, Vocabulary
from .decoder import AdaLNDecoder, CrossAttnDecoder
from .video_encoder import ClipWindow, ConvEncoder3D, SwinEncoder3D, clip_to_tensor

_DEFAULT_VOCAB = Vocabulary.default()


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    frame_height: int = 64
    frame_width: int = 64
    in_chans: int = 3
    encoder: str = "swin"  # swin | conv
    patch: tuple[int, int, int] = (2, 4, 4)
    enc_dims: tuple[int, ...] = (32, 64)
    enc_depths: tuple[int, ...] = (2, 2)
    enc_heads: tuple[int, ...] = (2, 2)
    window: tuple[int, int, int] = (2, 4, 4)
    mlp_ratio: float = 4.0
    cond_mode: str = "full"  # full | no_language | no_tool | no_action
    slot_dim: int = 32
    cond_hidden: int = 64
    cond_dim: int = 64
    decoder: str = "adaln"  # adaln | xattn
    dec_dim: int = 64
    dec_depth: int = 2
    dec_heads: int = 2
    gating: bool = True
    final_modulation: bool = True
    surgeries: tuple[str, ...] = _DEFAULT_VOCAB.surgeries
    tools: tuple[str, ...] = _DEFAULT_VOCAB.tools
    actions: tuple[str, ...] = _DEFAULT_VOCAB.actions

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(tuple(self.surgeries), tuple(self.tools), tuple(self.actions))

    @property
    def feature_grid(self) -> tuple[int, int]:
        f = 2 ** (len(self.enc_dims) - 1)
        return self.frame_height // (self.patch[1] * f), self.frame_width // (self.patch[2] * f)

    def validate(self) -> None:
        if self.encoder not in ("swin", "conv"):
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.decoder not in ("adaln", "xattn"):
            raise ConfigError(f"unknown decoder {self.decoder!r}")
        f = 2 ** (len(self.enc_dims) - 1)
        for size, p, name in ((self.frame_height, self.patch[1], "height"),
                              (self.frame_width, self.patch[2], "width")):
            if size % (p * f):
                raise ConfigError(f"frame {name} {size} not divisible by {p * f}")
        for d, h in zip(self.enc_dims, self.enc_heads):
            if d % h:
                raise ConfigError(f"encoder width {d} not divisible by {h} heads")
        if self.dec_dim % self.dec_heads:
            raise ConfigError(f"decoder width {self.dec_dim} not divisible by {self.dec_heads} heads")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


class AffordanceModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        self.conditioner = ConditionEncoder(c.vocabulary, c.slot_dim, c.cond_hidden,
                                            c.cond_dim, mode=c.cond_mode)
        if c.encoder == "swin":
            self.encoder = SwinEncoder3D(c.in_chans, c.patch, c.enc_dims, c.enc_depths,
                                         c.enc_heads, c.window, c.mlp_ratio)
        else:
            self.encoder = ConvEncoder3D(c.in_chans, c.patch, c.enc_dims)
        out_size = (c.frame_height, c.frame_width)
        if c.decoder == "adaln":
            self.decoder = AdaLNDecoder(c.enc_dims[-1], c.dec_dim, c.cond_dim, c.dec_depth,
                                        c.dec_heads, c.feature_grid, out_size, c.mlp_ratio,
                                        c.gating, c.final_modulation)
        else:
            self.decoder = CrossAttnDecoder(c.enc_dims[-1], c.dec_dim, c.cond_dim, c.dec_depth,
                                            c.dec_heads, c.feature_grid, out_size, c.mlp_ratio)

    def forward(self, clips: torch.Tensor, cond_idx: torch.Tensor) -> torch.Tensor:
        """clips (B, C, T, H, W), cond_idx (B, 3) -> logits (B, H, W)."""
        H, W = clips.shape[-2:]
        if (H, W) != (self.config.frame_height, self.config.frame_width):
            raise ConfigError(
                f"input frames {H}x{W} do not match model geometry "
                f"{self.config.frame_height}x{self.config.frame_width}"
            )
        feats = self.encoder(clips)
        cond = self.conditioner.forward_indices(cond_idx)
        return self.decoder(feats, cond)

    def logits(self, windows: list[ClipWindow], triplets: list[PromptTriplet]) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        x = clip_to_tensor(windows).to(dtype)
        return self(x, self.conditioner.indices(triplets))


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


@torch.no_grad()
def predict(clip: ClipWindow, triplet: PromptTriplet, model: AffordanceModel) -> np.ndarray:
    """Probability heatmap (H_out, W_out) in [0, 1]."""
    was_training = model.training
    model.eval()
    try:
        z = model.logits([clip], [triplet])[0]
    finally:
        model.train(was_training)
    return torch.sigmoid(z).double().numpy()
