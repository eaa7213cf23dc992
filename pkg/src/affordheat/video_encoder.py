"""Temporal clip windows and the 3D shifted-window encoder.

Token grids inside the encoder are laid out (B, T, H, W, C). The encoder's
output is a spatial feature map (B, D, H', W') obtained by mean-pooling the
temporal token axis after the last stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from operator import mul

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ClipWindow:
    frames: np.ndarray  # (T, H, W, C) float32 in [0, 1]; last slot is the target frame
    indices: tuple[int, ...]
    stride: int

    @property
    def target_index(self) -> int:
        return self.indices[-1]


def window_indices(t0: int, N: int, stride: int) -> list[int]:
    if N < 1 or stride < 1:
        raise ValueError(f"window N and stride must be >= 1, got N={N}, stride={stride}")
    return [max(t0 - k * stride, 0) for k in range(N - 1, -1, -1)]


def build_clip_window(frames, t0: int, N: int, stride: int) -> ClipWindow:
    """Select frames t0-(N-1)s, ..., t0-s, t0; indices below 0 repeat frame 0."""
    if not 0 <= t0 < len(frames):
        raise IndexError(f"target frame {t0} outside clip of {len(frames)} frames")
    idx = window_indices(t0, N, stride)
    sel = np.asarray(frames)[idx]
    if sel.dtype == np.uint8:
        sel = sel.astype(np.float32) / 255.0
    return ClipWindow(frames=np.ascontiguousarray(sel, dtype=np.float32),
                      indices=tuple(idx), stride=stride)


def clip_to_tensor(windows) -> torch.Tensor:
    """List of ClipWindow -> (B, C, T, H, W) float32 tensor."""
    arr = np.stack([w.frames for w in windows])  # B T H W C
    return torch.from_numpy(arr).permute(0, 4, 1, 2, 3).contiguous()


# ---------------------------------------------------------------------------
# window machinery


def effective_window(token_size, window_size, shift_size):
    """Clamp the window to the token grid; no shift along axes the window covers."""
    ws = list(window_size)
    ss = list(shift_size)
    for i in range(3):
        if token_size[i] <= window_size[i]:
            ws[i] = token_size[i]
            ss[i] = 0
    return tuple(ws), tuple(ss)


def window_partition(x: torch.Tensor, ws) -> torch.Tensor:
    """(B, T, H, W, C) -> (B * nW, wt*wh*ww, C)."""
    B, T, H, W, C = x.shape
    x = x.view(B, T // ws[0], ws[0], H // ws[1], ws[1], W // ws[2], ws[2], C)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).contiguous()
    return x.view(-1, reduce(mul, ws), C)


def window_reverse(windows: torch.Tensor, ws, B: int, T: int, H: int, W: int) -> torch.Tensor:
    x = windows.view(B, T // ws[0], H // ws[1], W // ws[2], ws[0], ws[1], ws[2], -1)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7).contiguous()
    return x.view(B, T, H, W, -1)


def shifted_window_mask(token_size, ws, ss, device=None) -> torch.Tensor:
    """(nW, N, N) bool mask, True where two tokens came from different regions
    before the cyclic shift wrapped them into the same window."""
    T, H, W = token_size
    img = torch.zeros((1, T, H, W, 1), device=device)
    cnt = 0
    for t in (slice(-ws[0]), slice(-ws[0], -ss[0]), slice(-ss[0], None)):
        for h in (slice(-ws[1]), slice(-ws[1], -ss[1]), slice(-ss[1], None)):
            for w in (slice(-ws[2]), slice(-ws[2], -ss[2]), slice(-ss[2], None)):
                img[:, t, h, w, :] = cnt
                cnt += 1
    win = window_partition(img, ws).squeeze(-1)
    return (win.unsqueeze(1) - win.unsqueeze(2)) != 0


class WindowAttention(nn.Module):
    """Multi-head self-attention within each window plus a learned additive bias."""

    def __init__(self, dim: int, num_heads: int, window_tokens: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"width {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.window_tokens = window_tokens
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.bias = nn.Parameter(torch.zeros(num_heads, window_tokens, window_tokens))
        nn.init.trunc_normal_(self.bias, std=0.02)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None,
                return_weights: bool = False):
        Bw, N, C = x.shape
        qkv = self.qkv(x).reshape(Bw, N, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * self.scale) @ k.transpose(-2, -1)
        if N == self.window_tokens:
            logits = logits + self.bias.unsqueeze(0)
        else:  # window clamped to a smaller token grid
            logits = logits + self.bias[:, :N, :N].unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            logits = logits.view(Bw // nW, nW, self.num_heads, N, N)
            logits = logits.masked_fill(mask.unsqueeze(1).unsqueeze(0), float("-inf"))
            logits = logits.view(Bw, self.num_heads, N, N)
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        out = self.proj(out)
        return (out, attn) if return_weights else out


def window_attention(tokens: torch.Tensor, attn: WindowAttention,
                     mask: torch.Tensor | None = None) -> torch.Tensor:
    """Attention output for (n_win, win_size, D) tokens, windows independent."""
    return attn(tokens, mask)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinBlock3D(nn.Module):
    def __init__(self, dim: int, num_heads: int, window_size=(2, 4, 4),
                 shift: bool = False, mlp_ratio: float = 4.0, shift_temporal: bool = True):
        super().__init__()
        self.window_size = tuple(window_size)
        self.shift_size = tuple(w // 2 if shift else 0 for w in window_size)
        if not shift_temporal:
            self.shift_size = (0,) + self.shift_size[1:]
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, reduce(mul, self.window_size))
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def _attend(self, x):
        B, T, H, W, C = x.shape
        ws, ss = effective_window((T, H, W), self.window_size, self.shift_size)
        for n, w in zip((T, H, W), ws):
            if n % w:
                raise ValueError(f"token grid {(T, H, W)} not divisible by window {ws}")
        shifted = any(ss)
        if shifted:
            x = torch.roll(x, shifts=(-ss[0], -ss[1], -ss[2]), dims=(1, 2, 3))
            mask = shifted_window_mask((T, H, W), ws, ss, device=x.device)
        else:
            mask = None
        win = window_partition(x, ws)
        win = self.attn(win, mask)
        x = window_reverse(win, ws, B, T, H, W)
        if shifted:
            x = torch.roll(x, shifts=ss, dims=(1, 2, 3))
        return x

    def forward(self, x):
        x = x + self._attend(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEmbed3D(nn.Module):
    def __init__(self, patch=(2, 4, 4), in_chans: int = 3, dim: int = 32):
        super().__init__()
        self.patch = tuple(patch)
        self.proj = nn.Conv3d(in_chans, dim, kernel_size=self.patch, stride=self.patch)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):  # (B, C, T, H, W) -> (B, T', H', W', D)
        B, C, T, H, W = x.shape
        pt, ph, pw = self.patch
        if H % ph or W % pw:
            raise ValueError(f"frame {H}x{W} not divisible by patch {ph}x{pw}")
        if T % pt:
            # repeat the earliest frame on the left, matching history padding
            pad = pt - T % pt
            x = torch.cat([x[:, :, :1].expand(-1, -1, pad, -1, -1), x], dim=2)
        x = self.proj(x).permute(0, 2, 3, 4, 1)
        return self.norm(x)


class PatchMerging(nn.Module):
    """2x2 spatial merge; temporal resolution is kept."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, out_dim, bias=False)

    def forward(self, x):
        B, T, H, W, C = x.shape
        if H % 2 or W % 2:
            raise ValueError(f"cannot merge odd token grid {H}x{W}")
        x = torch.cat(
            [x[:, :, 0::2, 0::2], x[:, :, 1::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 1::2]],
            dim=-1,
        )
        return self.reduction(self.norm(x))


def _check_finite(x: torch.Tensor, where: str):
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite activations at {where}")


class SwinEncoder3D(nn.Module):
    """Patch embedding, alternating regular/shifted window blocks per stage,
    2x spatial merge between stages, temporal mean pool."""

    def __init__(self, in_chans=3, patch=(2, 4, 4), dims=(32, 64), depths=(2, 2),
                 heads=(2, 2), window=(2, 4, 4), mlp_ratio=4.0, shift_temporal=True):
        super().__init__()
        if not len(dims) == len(depths) == len(heads):
            raise ValueError("dims, depths and heads must have one entry per stage")
        self.patch_embed = PatchEmbed3D(patch, in_chans, dims[0])
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i, (d, depth, h) in enumerate(zip(dims, depths, heads)):
            self.stages.append(nn.ModuleList(
                SwinBlock3D(d, h, window, shift=bool(j % 2), mlp_ratio=mlp_ratio,
                            shift_temporal=shift_temporal)
                for j in range(depth)
            ))
            if i + 1 < len(dims):
                self.merges.append(PatchMerging(d, dims[i + 1]))
        self.norm = nn.LayerNorm(dims[-1])
        self.out_dim = dims[-1]
        self.reduction = patch[1] * 2 ** (len(dims) - 1), patch[2] * 2 ** (len(dims) - 1)

    def forward(self, x):  # (B, C, T, H, W) -> (B, D, H', W')
        x = self.patch_embed(x)
        layer = 0
        for i, blocks in enumerate(self.stages):
            for blk in blocks:
                x = blk(x)
                _check_finite(x, f"encoder layer {layer}")
                layer += 1
            if i < len(self.merges):
                x = self.merges[i](x)
        x = self.norm(x).mean(dim=1)
        return x.permute(0, 3, 1, 2).contiguous()


class ResBlock3D(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv3d(dim, dim, 3, padding=1, bias=False)
        self.bn1 = nn.GroupNorm(1, dim)
        self.conv2 = nn.Conv3d(dim, dim, 3, padding=1, bias=False)
        self.bn2 = nn.GroupNorm(1, dim)

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        return F.relu(x + self.bn2(self.conv2(y)))


class ConvEncoder3D(nn.Module):
    """3D conv residual backbone with the same output geometry as SwinEncoder3D."""

    def __init__(self, in_chans=3, patch=(2, 4, 4), dims=(32, 64), blocks_per_stage=1):
        super().__init__()
        self.patch = tuple(patch)
        self.stem = nn.Conv3d(in_chans, dims[0], kernel_size=self.patch, stride=self.patch)
        self.stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i, d in enumerate(dims):
            self.stages.append(nn.Sequential(*[ResBlock3D(d) for _ in range(blocks_per_stage)]))
            if i + 1 < len(dims):
                self.downs.append(nn.Conv3d(d, dims[i + 1], kernel_size=(1, 2, 2), stride=(1, 2, 2)))
        self.out_dim = dims[-1]
        self.reduction = patch[1] * 2 ** (len(dims) - 1), patch[2] * 2 ** (len(dims) - 1)

    def forward(self, x):
        T = x.shape[2]
        if T % self.patch[0]:
            pad = self.patch[0] - T % self.patch[0]
            x = torch.cat([x[:, :, :1].expand(-1, -1, pad, -1, -1), x], dim=2)
        x = self.stem(x)
        for i, stage in enumerate(self.stages):
            x = stage(x)
            _check_finite(x, f"encoder stage {i}")
            if i < len(self.downs):
                x = self.downs[i](x)
        return x.mean(dim=2)


def encode_clip(window: ClipWindow, encoder: nn.Module) -> torch.Tensor:
    """FeatureMap (D, H', W') for one clip window."""
    param = next(encoder.parameters())
    x = clip_to_tensor([window]).to(param.dtype)
    return encoder(x)[0]
