"""Per-stage bidirectional cross-modal fusion and anomaly-map assembly.

Each encoder stage gets its own :class:`FusionStage`: visual tokens are
refined by deformable self-attention, the two text rows by self-attention,
then text attends to vision and vision attends to the refined text. The
per-location two-class softmax of cosine similarities gives the stage's
normal/abnormal maps. Stage maps are upsampled to a common grid, summed,
normalized (stage mean by default, per-image min-max optionally) and
finally Gaussian smoothed.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidConfig, MissingStage, ShapeMismatch
from .visual import scaled_attention

BLOCK_ORDER = ("deform", "text_self", "t2v", "v2t")


def bilinear_sample(grid: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample a feature grid at continuous ``(y, x)`` points.

    ``grid`` is (H, W, C) or (B, H, W, C); ``points`` is (2,), (P, 2) or
    (B, P, 2) in grid-cell units. Points outside the grid are clamped to the
    border.
    """
    batched = grid.ndim == 4
    if not batched:
        grid = grid[None]
    single = points.ndim == 1
    if single:
        points = points[None]
    if points.ndim == 2:
        points = points[None].expand(grid.shape[0], -1, -1)
    if points.shape[-1] != 2 or points.shape[0] != grid.shape[0]:
        raise ShapeMismatch(f"points {tuple(points.shape)} do not match grid {tuple(grid.shape)}")
    b, h, w, c = grid.shape
    y = points[..., 0].clamp(0, h - 1)
    x = points[..., 1].clamp(0, w - 1)
    y0 = y.detach().floor().clamp(max=h - 1)
    x0 = x.detach().floor().clamp(max=w - 1)
    wy = (y - y0)[..., None]
    wx = (x - x0)[..., None]
    y0, x0 = y0.long(), x0.long()
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    flat = grid.reshape(b, h * w, c)

    def take(yy, xx):
        idx = (yy * w + xx)[..., None].expand(-1, -1, c)
        return torch.gather(flat, 1, idx)

    out = ((1 - wy) * (1 - wx) * take(y0, x0) + (1 - wy) * wx * take(y0, x1)
           + wy * (1 - wx) * take(y1, x0) + wy * wx * take(y1, x1))
    if single:
        out = out[:, 0]
    return out if batched else out[0]


def reference_points(h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """(H*W, 2) integer ``(y, x)`` cell coordinates in row-major order."""
    ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
    return torch.stack([ys.reshape(-1), xs.reshape(-1)], dim=-1)


class DeformableSelfAttention(nn.Module):
    """Self-attention whose keys/values are sampled at learned offsets.

    Every query predicts ``n_points`` offsets from its own grid cell; keys and
    values are bilinearly sampled there and all queries attend over the whole
    sampled set. The offset predictor starts at zero, where this reduces to
    plain self-attention over the grid.
    """

    def __init__(self, dim: int, n_points: int = 1):
        super().__init__()
        if n_points < 1:
            raise InvalidConfig("n_points must be >= 1")
        self.n_points = n_points
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.offset = nn.Linear(dim, 2 * n_points)
        nn.init.zeros_(self.offset.weight)
        nn.init.zeros_(self.offset.bias)
        self.scale = dim ** -0.5

    def sample_points(self, x: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
        b, t, _ = x.shape
        ref = reference_points(*hw, dtype=x.dtype)[:, None, :]
        offsets = self.offset(x).reshape(b, t, self.n_points, 2)
        return (ref + offsets).reshape(b, t * self.n_points, 2)

    def forward(self, x: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
        h, w = hw
        if x.ndim != 3 or x.shape[1] != h * w:
            raise ShapeMismatch(f"expected (B, {h * w}, C) tokens, got {tuple(x.shape)}")
        points = self.sample_points(x, hw)
        sampled = bilinear_sample(x.reshape(x.shape[0], h, w, -1), points)
        return scaled_attention(self.to_q(x), self.to_k(sampled), self.to_v(sampled), self.scale)


class CrossAttention(nn.Module):
    """Single-head attention of ``queries`` over ``context``."""

    def __init__(self, dim: int):
        super().__init__()
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_out = nn.Linear(dim, dim)
        self.scale = dim ** -0.5

    def forward(self, queries, context):
        out = scaled_attention(self.to_q(queries), self.to_k(context), self.to_v(context), self.scale)
        return self.to_out(out)


def two_class_maps(visual: torch.Tensor, text: torch.Tensor, tau: float, hw: tuple[int, int]):
    """Softmax over {normal, abnormal} of cosine(visual, text row) / tau.

    ``visual`` (B, T, C), ``text`` (B, 2, C). Returns two (B, H, W) maps.
    """
    v = F.normalize(visual, dim=-1)
    t = F.normalize(text, dim=-1)
    probs = torch.softmax(v @ t.transpose(-2, -1) / tau, dim=-1)
    b = visual.shape[0]
    return probs[..., 0].reshape(b, *hw), probs[..., 1].reshape(b, *hw)


def _broadcast_text(text: torch.Tensor, batch: int) -> torch.Tensor:
    if text.shape[-2] != 2:
        raise ShapeMismatch(f"text features must have 2 rows, got {tuple(text.shape)}")
    if text.ndim == 2:
        return text.expand(batch, -1, -1)
    if text.shape[0] != batch:
        raise ShapeMismatch("per-image text features must match the batch size")
    return text


class FusionStage(nn.Module):
    def __init__(self, in_dim: int, dim: int, tau: float = 0.07, n_points: int = 1,
                 order: Sequence[str] = BLOCK_ORDER):
        super().__init__()
        if not tau > 0:
            raise InvalidConfig("temperature must be positive")
        if sorted(order) != sorted(BLOCK_ORDER):
            raise InvalidConfig(f"order must be a permutation of {BLOCK_ORDER}")
        self.order = tuple(order)
        self.tau = tau
        self.visual_norm = nn.LayerNorm(in_dim)
        self.visual_proj = nn.Linear(in_dim, dim)
        self.deform = DeformableSelfAttention(dim, n_points)
        self.text_self = CrossAttention(dim)
        self.t2v = CrossAttention(dim)
        self.v2t = CrossAttention(dim)

    def forward(self, patches: torch.Tensor, hw: tuple[int, int], text: torch.Tensor):
        if patches.ndim == 2:
            patches = patches[None]
        if patches.shape[1] != hw[0] * hw[1]:
            raise ShapeMismatch(f"{patches.shape[1]} tokens do not fill a {hw[0]}x{hw[1]} grid")
        vis = self.visual_proj(self.visual_norm(patches))
        txt = _broadcast_text(text, vis.shape[0]).to(vis.dtype)
        for step in self.order:
            if step == "deform":
                vis = vis + self.deform(vis, hw)
            elif step == "text_self":
                txt = txt + self.text_self(txt, txt)
            elif step == "t2v":
                txt = txt + self.t2v(txt, vis)
            else:
                vis = vis + self.v2t(vis, txt)
        return two_class_maps(vis, txt, self.tau, hw)


class CosineStage(nn.Module):
    """Ablation stand-in: linear projection then cosine maps, no attention."""

    def __init__(self, in_dim: int, dim: int, tau: float = 0.07):
        super().__init__()
        self.tau = tau
        self.visual_norm = nn.LayerNorm(in_dim)
        self.visual_proj = nn.Linear(in_dim, dim)

    def forward(self, patches, hw, text):
        if patches.ndim == 2:
            patches = patches[None]
        vis = self.visual_proj(self.visual_norm(patches))
        return two_class_maps(vis, _broadcast_text(text, vis.shape[0]).to(vis.dtype), self.tau, hw)


def bica_stage(patches, hw, text, stage: FusionStage):
    """One stage of fusion: returns ``(normal_map, abnormal_map)``."""
    return stage(patches, hw, text)


def minmax_normalize(x: torch.Tensor) -> torch.Tensor:
    """Per-map min-max over the last two dims; constant maps become zeros."""
    lo = x.amin(dim=(-2, -1), keepdim=True)
    hi = x.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (x - lo) / safe, torch.zeros_like(x))


MAP_NORMS = ("stage_mean", "minmax")


def aggregate_maps(per_stage, size: tuple[int, int], norm: str = "stage_mean"):
    """Upsample each stage pair to ``size``, sum over the four stages, normalize.

    ``stage_mean`` divides the sum by the stage count, keeping each pixel's
    probability calibration (and ``normal + abnormal = 1``); ``minmax``
    stretches every map to span [0, 1] per image.
    """
    if norm not in MAP_NORMS:
        raise InvalidConfig(f"unknown map normalization {norm!r}")
    per_stage = list(per_stage)
    if len(per_stage) != 4 or any(p is None for p in per_stage):
        raise MissingStage(f"expected 4 stage map pairs, got {len(per_stage)}")

    def upsample(m):
        squeeze = m.ndim == 2
        m = m[None, None] if squeeze else m[:, None]
        if tuple(m.shape[-2:]) != tuple(size):
            m = F.interpolate(m, size=tuple(size), mode="bilinear", align_corners=False)
        return m[0, 0] if squeeze else m[:, 0]

    normal = sum(upsample(n) for n, _ in per_stage)
    abnormal = sum(upsample(a) for _, a in per_stage)
    if norm == "minmax":
        return minmax_normalize(normal), minmax_normalize(abnormal)
    return normal / len(per_stage), abnormal / len(per_stage)


def reflect_indices(n: int, radius: int) -> torch.Tensor:
    """Indices of ``range(-radius, n + radius)`` folded back into ``[0, n)``.

    Edge-inclusive mirroring (``d c b a | a b c d | d c b a``), repeated as
    often as needed so any radius works on any size.
    """
    idx = torch.arange(-radius, n + radius) % (2 * n)
    return torch.where(idx >= n, 2 * n - 1 - idx, idx)


def gaussian_kernel1d(sigma: float, dtype=torch.float64) -> torch.Tensor:
    radius = math.ceil(3 * sigma)
    x = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def gaussian_filter(image: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur over the last two dims (radius ceil(3 sigma))."""
    if sigma < 0:
        raise InvalidConfig("sigma must be >= 0")
    if sigma == 0:
        return image
    kernel = gaussian_kernel1d(sigma, dtype=image.dtype).to(image.device)
    radius = (kernel.numel() - 1) // 2
    out = image
    for dim in (-1, -2):
        n = out.shape[dim]
        padded = out.index_select(dim, reflect_indices(n, radius).to(image.device))
        acc = 0
        for j, weight in enumerate(kernel):
            acc = acc + weight * padded.narrow(dim, j, n)
        out = acc
    return out


def final_map(normal: torch.Tensor, abnormal: torch.Tensor, sigma: float) -> torch.Tensor:
    if normal.shape != abnormal.shape:
        raise ShapeMismatch(f"map shapes differ: {tuple(normal.shape)} vs {tuple(abnormal.shape)}")
    return gaussian_filter((abnormal + 1 - normal) / 2, sigma)
