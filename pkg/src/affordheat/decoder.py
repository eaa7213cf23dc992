"""AdaLN-conditioned dense-logit decoder and the cross-attention variant."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .video_encoder import Mlp

LN_EPS = 1e-5


def modulate(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """LayerNorm(x) * (1 + gamma) + beta over the last axis.

    ``x`` is (B, n, D) or (n, D); gamma/beta are (B, D) or (D,).
    """
    if gamma.shape[-1] != x.shape[-1] or beta.shape[-1] != x.shape[-1]:
        raise ValueError(f"modulation width {gamma.shape[-1]} != token width {x.shape[-1]}")
    h = F.layer_norm(x, (x.shape[-1],), eps=LN_EPS)
    if x.dim() == 3 and gamma.dim() == 2:
        gamma, beta = gamma.unsqueeze(1), beta.unsqueeze(1)
    return h * (1 + gamma) + beta


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"width {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        hd = C // self.num_heads
        q, k, v = self.qkv(x).reshape(B, N, 3, self.num_heads, hd).permute(2, 0, 3, 1, 4)
        attn = ((q * hd ** -0.5) @ k.transpose(-2, -1)).softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(B, N, C))


class CrossAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"width {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, ctx):
        B, N, C = x.shape
        M = ctx.shape[1]
        hd = C // self.num_heads
        q = self.q(x).reshape(B, N, self.num_heads, hd).transpose(1, 2)
        k, v = self.kv(ctx).reshape(B, M, 2, self.num_heads, hd).permute(2, 0, 3, 1, 4)
        attn = ((q * hd ** -0.5) @ k.transpose(-2, -1)).softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(B, N, C))


class AdaLNBlock(nn.Module):
    """x <- x + g1 * Attn(mod(x; gamma1, beta1)); x <- x + g2 * FFN(mod(x; gamma2, beta2))."""

    def __init__(self, dim: int, cond_dim: int, num_heads: int, mlp_ratio: float = 4.0,
                 gating: bool = True):
        super().__init__()
        self.gating = gating
        self.attn = SelfAttention(dim, num_heads)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.cond_mlp = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 6 * dim))
        nn.init.zeros_(self.cond_mlp[1].weight)
        nn.init.zeros_(self.cond_mlp[1].bias)

    def forward(self, x, c):
        g1s, b1, g1, g2s, b2, g2 = self.cond_mlp(c).chunk(6, dim=-1)
        if not self.gating:
            g1 = g2 = torch.ones_like(g1)
        x = x + g1.unsqueeze(1) * self.attn(modulate(x, g1s, b1))
        return x + g2.unsqueeze(1) * self.mlp(modulate(x, g2s, b2))


class _DecoderBase(nn.Module):
    def __init__(self, in_dim: int, dim: int, grid, out_size):
        super().__init__()
        self.grid = tuple(grid)
        self.out_size = tuple(out_size)
        self.in_proj = nn.Linear(in_dim, dim) if in_dim != dim else nn.Identity()
        self.pos_embed = nn.Parameter(torch.zeros(1, grid[0] * grid[1], dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.head = nn.Linear(dim, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def tokens(self, features):
        B, D, H, W = features.shape
        if (H, W) != self.grid:
            raise ValueError(f"feature grid {(H, W)} != configured {self.grid}")
        return self.in_proj(features.flatten(2).transpose(1, 2)) + self.pos_embed

    def to_logits(self, x):
        B = x.shape[0]
        z = self.head(x).transpose(1, 2).reshape(B, 1, *self.grid)
        if self.grid != self.out_size:
            z = F.interpolate(z, size=self.out_size, mode="bilinear", align_corners=False)
        return z[:, 0]


class AdaLNDecoder(_DecoderBase):
    def __init__(self, in_dim=64, dim=64, cond_dim=64, depth=2, num_heads=2, grid=(8, 8),
                 out_size=(64, 64), mlp_ratio=4.0, gating=True, final_modulation=True):
        super().__init__(in_dim, dim, grid, out_size)
        self.blocks = nn.ModuleList(
            AdaLNBlock(dim, cond_dim, num_heads, mlp_ratio, gating) for _ in range(depth)
        )
        self.final_modulation = final_modulation
        self.final_cond = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 2 * dim))
        nn.init.zeros_(self.final_cond[1].weight)
        nn.init.zeros_(self.final_cond[1].bias)

    def hidden(self, features, cond):
        x = self.tokens(features)
        for i, blk in enumerate(self.blocks):
            x = blk(x, cond)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations in decoder block {i}")
        return x

    def forward(self, features, cond):
        x = self.hidden(features, cond)
        if self.final_modulation:
            gamma, beta = self.final_cond(cond).chunk(2, dim=-1)
            x = modulate(x, gamma, beta)
        else:
            x = F.layer_norm(x, (x.shape[-1],), eps=LN_EPS)
        return self.to_logits(x)


class CrossAttnBlock(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.xattn = CrossAttention(dim, num_heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, ctx):
        x = x + self.attn(self.norm1(x))
        x = x + self.xattn(self.norm2(x), ctx)
        return x + self.mlp(self.norm3(x))


class CrossAttnDecoder(_DecoderBase):
    """Feature tokens query a small set of condition tokens projected from the condition vector."""

    def __init__(self, in_dim=64, dim=64, cond_dim=64, depth=2, num_heads=2, grid=(8, 8),
                 out_size=(64, 64), mlp_ratio=4.0, cond_tokens=4):
        super().__init__(in_dim, dim, grid, out_size)
        self.cond_tokens = cond_tokens
        self.cond_proj = nn.Linear(cond_dim, cond_tokens * dim)
        self.blocks = nn.ModuleList(CrossAttnBlock(dim, num_heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, features, cond):
        x = self.tokens(features)
        ctx = self.cond_proj(cond).reshape(cond.shape[0], self.cond_tokens, -1)
        for i, blk in enumerate(self.blocks):
            x = blk(x, ctx)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations in decoder block {i}")
        return self.to_logits(self.norm(x))


def decoder_forward(features: torch.Tensor, cond: torch.Tensor, decoder: nn.Module) -> torch.Tensor:
    """LogitGrid (H_out, W_out) for one FeatureMap (D, H', W') and condition vector."""
    return decoder(features.unsqueeze(0), cond.unsqueeze(0))[0]
