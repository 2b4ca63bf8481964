"""Training objective: pixel-wise binary cross-entropy plus soft Dice.

Both terms consume raw logits.  BCE is computed in logit space with the
standard numerically-stable form; the Dice term builds soft confusion counts
from sigmoid probabilities with an additive smoothing constant of 1 in both
numerator and denominator.  The segmentation loss is their unweighted sum.

For batched inputs each sample's loss is computed over its own pixels and
the batch mean is returned, so single-sample values are independent of batch
packing.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .core import ShapeMismatchError

DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossValue:
    total: Tensor
    bce: Tensor
    dice: Tensor

    def detached(self) -> "LossValue":
        return LossValue(self.total.detach(), self.bce.detach(), self.dice.detach())

    def __repr__(self) -> str:  # compact, for log lines
        return (
            f"LossValue(total={float(self.total):.6f}, "
            f"bce={float(self.bce):.6f}, dice={float(self.dice):.6f})"
        )


def _flatten_pair(logits: Tensor, target: Tensor) -> tuple[Tensor, Tensor]:
    """Broadcast-check and flatten to (batch, pixels)."""
    if logits.shape != target.shape:
        raise ShapeMismatchError(
            f"logits/target shapes differ: {tuple(logits.shape)} vs {tuple(target.shape)}"
        )
    if logits.ndim < 2:
        raise ShapeMismatchError(f"expected at least 2 dims, got {tuple(logits.shape)}")
    if logits.ndim == 2:  # single (H, W) map
        return logits.reshape(1, -1), target.reshape(1, -1)
    return logits.reshape(logits.shape[0], -1), target.reshape(target.shape[0], -1)


def bce_loss(logits: Tensor, target: Tensor) -> Tensor:
    """Mean-over-pixels binary cross-entropy of sigmoid(logits) vs target.

    Uses ``max(x, 0) - x*t + log(1 + exp(-|x|))`` so large-magnitude logits
    cannot overflow.
    """
    x, t = _flatten_pair(logits, target.to(logits.dtype))
    per_pixel = torch.clamp(x, min=0) - x * t + torch.log1p(torch.exp(-torch.abs(x)))
    return per_pixel.mean(dim=1).mean()


def dice_loss(logits: Tensor, target: Tensor) -> Tensor:
    """Soft Dice loss ``1 - (2*TP + 1) / (2*TP + FN + FP + 1)``.

    TP/FP/FN are soft counts accumulated from sigmoid probabilities over each
    sample's pixels.
    """
    x, t = _flatten_pair(logits, target.to(logits.dtype))
    p = torch.sigmoid(x)
    tp = (p * t).sum(dim=1)
    fp = (p * (1.0 - t)).sum(dim=1)
    fn = ((1.0 - p) * t).sum(dim=1)
    dice = (2.0 * tp + DICE_SMOOTH) / (2.0 * tp + fn + fp + DICE_SMOOTH)
    return (1.0 - dice).mean()


def seg_loss(logits: Tensor, target: Tensor) -> LossValue:
    """Combined objective: ``bce_loss + dice_loss`` (unweighted sum)."""
    bce = bce_loss(logits, target)
    dice = dice_loss(logits, target)
    return LossValue(total=bce + dice, bce=bce, dice=dice)
