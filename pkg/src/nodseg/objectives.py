"""Training losses: soft Dice plus BCE terms for both branches."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

DICE_SMOOTHING = 1e-6
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Weights of the two BCE terms added to the Dice loss."""

    w_seg: float = 1.0
    w_cls: float = 1.0

    def __post_init__(self):
        if self.w_seg < 0 or self.w_cls < 0:
            raise ValueError(f"loss weights must be >= 0, got {self}")


def _check_shapes(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(x: Tensor, g: Tensor) -> Tensor:
    """Soft Dice loss, averaged over the batch.

    Smoothing is applied to numerator and denominator so two empty masks
    score a loss of 0 rather than 0/0.
    """
    _check_shapes(x, g, "dice_loss")
    if x.ndim <= 2:
        x = x.reshape(1, -1)
        g = g.reshape(1, -1)
    else:
        x = x.reshape(x.shape[0], -1)
        g = g.reshape(g.shape[0], -1)
    g = g.to(x.dtype)
    overlap = (x * g).sum(dim=1)
    total = x.sum(dim=1) + g.sum(dim=1)
    dice = (2.0 * overlap + DICE_SMOOTHING) / (total + DICE_SMOOTHING)
    return (1.0 - dice).mean()


def bce_loss(p: Tensor, t: Tensor) -> Tensor:
    """Mean binary cross-entropy on probabilities, clamped for stability."""
    _check_shapes(p, t, "bce_loss")
    t = t.to(p.dtype)
    pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(t * pc.log() + (1.0 - t) * (1.0 - pc).log()).mean()


def loss_components(
    x: Tensor, g: Tensor, c: Tensor, y: Tensor, w: LossWeights | None = None
) -> dict[str, Tensor]:
    """Individual loss terms plus their weighted total, for logging."""
    w = w or LossWeights()
    dice = dice_loss(x, g)
    seg_bce = bce_loss(x, g)
    cls_bce = bce_loss(c, y)
    total = dice + w.w_seg * seg_bce + w.w_cls * cls_bce
    return {"dice": dice, "seg_bce": seg_bce, "cls_bce": cls_bce, "total": total}


def total_loss(x: Tensor, g: Tensor, c: Tensor, y: Tensor, w: LossWeights | None = None) -> Tensor:
    """dice_loss(x,g) + w_seg * bce_loss(x,g) + w_cls * bce_loss(c,y)."""
    return loss_components(x, g, c, y, w)["total"]
