"""Training objectives: focal, dice, local, global BCE and the weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import InvalidConfig, NonFiniteLoss, OutOfRangeScore, ShapeMismatch

EPS_P = 1e-7
EPS_D = 1.0
FOCAL_GAMMA = 2.0


@dataclass
class LossWeights:
    alpha: float = 1.0  # knowledge-driven
    beta: float = 1.0  # global
    gamma: float = 1.0  # local

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise InvalidConfig("loss weights must be non-negative")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def focal_loss(pred: torch.Tensor, target: torch.Tensor, gamma: float = FOCAL_GAMMA,
               eps: float | None = EPS_P) -> torch.Tensor:
    """Mean over all pixels of ``-(1 - p_t)^gamma * log(p_t)``."""
    _same_shape(pred, target)
    if eps is not None:
        pred = pred.clamp(eps, 1 - eps)
    p_t = torch.where(target > 0.5, pred, 1 - pred)
    return (-(1 - p_t) ** gamma * torch.log(p_t)).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = EPS_D) -> torch.Tensor:
    """``1 - (2 sum(P T) + eps) / (sum P + sum T + eps)``.

    Inputs of shape (B, H, W) are reduced per image and then averaged; 1-D or
    2-D inputs are treated as a single image.
    """
    _same_shape(pred, target)
    if pred.ndim < 3:
        pred, target = pred[None], target[None]
    p = pred.flatten(1)
    t = target.to(p.dtype).flatten(1)
    inter = (p * t).sum(dim=1)
    loss = 1 - (2 * inter + eps) / (p.sum(dim=1) + t.sum(dim=1) + eps)
    return loss.mean()


def local_loss(abnormal: torch.Tensor, normal: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    _same_shape(abnormal, normal)
    _same_shape(abnormal, mask)
    mask = mask.to(abnormal.dtype)
    return (focal_loss(abnormal, mask) + dice_loss(normal, 1 - mask) + dice_loss(abnormal, mask))


def global_loss(score: torch.Tensor, label: torch.Tensor, eps: float = EPS_P) -> torch.Tensor:
    """Batch-mean binary cross-entropy of a score in [0, 1]."""
    score = torch.as_tensor(score)
    label = torch.as_tensor(label, dtype=score.dtype)
    if bool(((score.detach() < 0) | (score.detach() > 1)).any()):
        raise OutOfRangeScore("score must lie in [0, 1]")
    s = score.clamp(eps, 1 - eps)
    return (-(label * torch.log(s) + (1 - label) * torch.log(1 - s))).mean()


def total_loss(l_kd, l_global, l_local, weights: LossWeights | None = None):
    w = weights or LossWeights()
    for name, value in (("kd", l_kd), ("global", l_global), ("local", l_local)):
        value = float(torch.as_tensor(value).detach())
        if not math.isfinite(value):
            raise NonFiniteLoss(f"{name} loss is not finite: {value}")
    return w.alpha * l_kd + w.beta * l_global + w.gamma * l_local
