"""BCE + soft-IoU training objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class LossBreakdown:
    bce: torch.Tensor
    soft_iou_loss: torch.Tensor
    total: torch.Tensor
    lambda_iou: float

    def as_floats(self) -> dict:
        return {
            "bce": float(self.bce.detach()),
            "soft_iou_loss": float(self.soft_iou_loss.detach()),
            "total": float(self.total.detach()),
        }


def _check_target(target: torch.Tensor) -> None:
    if torch.any(target < 0) or torch.any(target > 1):
        raise ValueError("target values must lie in [0, 1]")


def bce_with_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of binary cross-entropy, stable form
    max(z, 0) - z t + log(1 + exp(-|z|))."""
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(target.shape)}")
    _check_target(target)
    per_pixel = logits.clamp(min=0) - logits * target + torch.log1p(torch.exp(-logits.abs()))
    return per_pixel.mean()


def soft_iou(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """sum(p t) / sum(p + t - p t), over all elements (the whole batch pooled)."""
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(probs.shape)} vs {tuple(target.shape)}")
    _check_target(target)
    if not torch.any(target > 0):
        raise ValueError("soft IoU undefined for an all-zero target")
    inter = (probs * target).sum()
    union = (probs + target - probs * target).sum()
    return inter / union


def soft_iou_per_sample(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft IoU computed per leading-axis sample; (B, ...) -> (B,)."""
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(probs.shape)} vs {tuple(target.shape)}")
    _check_target(target)
    p = probs.flatten(1)
    t = target.flatten(1)
    if not torch.all((t > 0).any(dim=1)):
        raise ValueError("soft IoU undefined for an all-zero target")
    return (p * t).sum(1) / (p + t - p * t).sum(1)


def total_loss(logits: torch.Tensor, target: torch.Tensor, lambda_iou: float = 1.0) -> LossBreakdown:
    """bce + lambda_iou * (1 - soft IoU). Batched input (B, H, W) averages
    the soft-IoU loss over samples."""
    bce = bce_with_logits(logits, target)
    probs = torch.sigmoid(logits)
    if logits.dim() >= 3:
        iou = soft_iou_per_sample(probs, target).mean()
    else:
        iou = soft_iou(probs, target)
    iou_loss = 1.0 - iou
    return LossBreakdown(bce, iou_loss, bce + lambda_iou * iou_loss, float(lambda_iou))

