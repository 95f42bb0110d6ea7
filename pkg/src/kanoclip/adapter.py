"""Bottleneck adapter for the global feature and the image-level score."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import InvalidConfig, ShapeMismatch


class ConvAdapter(nn.Module):
    """``ReLU(LayerNorm(x) @ W_down) @ W_up``.

    The global feature has no spatial extent, so the pointwise convolutions of
    the bottleneck are plain matrix products. ``residual`` adds the input back
    (off by default; ablation use only).
    """

    def __init__(self, d: int, d_bottle: int | None = None, residual: bool = False):
        super().__init__()
        d_bottle = max(1, d // 4) if d_bottle is None else d_bottle
        if not 1 <= d_bottle <= d:
            raise InvalidConfig(f"bottleneck width must lie in 1..{d}, got {d_bottle}")
        self.d = d
        self.residual = residual
        self.ln = nn.LayerNorm(d, eps=1e-5)
        self.W_down = nn.Parameter(torch.empty(d, d_bottle))
        self.W_up = nn.Parameter(torch.empty(d_bottle, d))
        nn.init.kaiming_uniform_(self.W_down, a=5 ** 0.5)
        nn.init.kaiming_uniform_(self.W_up, a=5 ** 0.5)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d:
            raise ShapeMismatch(f"adapter expects width {self.d}, got {x.shape[-1]}")
        out = torch.relu(self.ln(x) @ self.W_down) @ self.W_up
        return out + x if self.residual else out


def adapt_global(global_feature: torch.Tensor, adapter: ConvAdapter) -> torch.Tensor:
    return adapter(global_feature)


@dataclass
class ScoreRecord:
    S_global: float
    abnormal_prob: float
    map_max: float
    label: int | None = None

    def to_dict(self) -> dict:
        return {"S_global": self.S_global, "abnormal_prob": self.abnormal_prob,
                "map_max": self.map_max, "label": self.label}


def score_terms(adapted: torch.Tensor, text: torch.Tensor, anomaly_map: torch.Tensor):
    """Differentiable pieces of the global score.

    ``adapted`` (..., C), ``text`` (..., 2, C) with row 1 abnormal, ``anomaly_map``
    (..., H, W). Returns ``(S_global, abnormal_prob, map_max)`` tensors.
    """
    if adapted.shape[-1] != text.shape[-1] or text.shape[-2] != 2:
        raise ShapeMismatch(
            f"global feature {tuple(adapted.shape)} incompatible with text {tuple(text.shape)}"
        )
    logits = (text @ adapted.unsqueeze(-1)).squeeze(-1)
    abnormal_prob = torch.softmax(logits, dim=-1)[..., 1]
    map_max = anomaly_map.flatten(-2).amax(dim=-1)
    return abnormal_prob + map_max, abnormal_prob, map_max


def global_score(adapted: torch.Tensor, text: torch.Tensor, anomaly_map: torch.Tensor,
                 label: int | None = None) -> ScoreRecord:
    s, p, m = score_terms(adapted, text, anomaly_map)
    p, m = float(p), float(m)
    # S_global is stored as the exact float sum of its two reported parts
    return ScoreRecord(p + m, p, m, label)

