"""Vision transformer with a second, value-value ("V-V") attention stream.

The original stream is the unmodified transformer. A local-aware stream runs
beside it: at every layer it receives ``Project(Attention(V, V, V))`` where
``V`` is the value projection of the original stream, plus its own residual.
Patch features for localization are read from the local stream; the global
image feature is the projected class token of the original stream.

Parameter names follow the CLIP ``visual`` module so that published weights
map onto this layout by key (see :mod:`kanoclip.weights`).
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .errors import InvalidConfig, ShapeMismatch

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


def scaled_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, scale: float) -> torch.Tensor:
    """``softmax(q @ k.T * scale) @ v`` over the last two dims."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    if not scale > 0:
        raise ShapeMismatch("attention scale must be positive")
    weights = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
    return weights @ v


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


class Attention(nn.Module):
    """Multi-head attention with ``nn.MultiheadAttention``-compatible names."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise InvalidConfig(f"width {width} not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.in_proj_weight = nn.Parameter(torch.empty(3 * width, width))
        self.in_proj_bias = nn.Parameter(torch.zeros(3 * width))
        self.out_proj = nn.Linear(width, width)

    @property
    def scale(self) -> float:
        return (self.width // self.heads) ** -0.5

    def _split(self, x):
        *lead, t, _ = x.shape
        return x.reshape(*lead, t, self.heads, self.width // self.heads).transpose(-3, -2)

    def _merge(self, x):
        x = x.transpose(-3, -2)
        return x.reshape(*x.shape[:-2], self.width)

    def forward(self, x, mask=None):
        q, k, v = F.linear(x, self.in_proj_weight, self.in_proj_bias).chunk(3, dim=-1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        logits = q @ k.transpose(-2, -1) * self.scale
        if mask is not None:
            logits = logits + mask
        out = torch.softmax(logits, dim=-1) @ v
        return self.out_proj(self._merge(out))

    def value_attention(self, x):
        """``Project(Attention(V, V, V))`` with V the value projection of ``x``."""
        w_v = self.in_proj_weight[2 * self.width:]
        b_v = self.in_proj_bias[2 * self.width:]
        v = self._split(F.linear(x, w_v, b_v))
        return self.out_proj(self._merge(scaled_attention(v, v, v, self.scale)))


class ResidualAttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.attn = Attention(width, heads)
        self.ln_1 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(OrderedDict([
            ("c_fc", nn.Linear(width, width * mlp_ratio)),
            ("gelu", QuickGELU()),
            ("c_proj", nn.Linear(width * mlp_ratio, width)),
        ]))
        self.ln_2 = nn.LayerNorm(width)

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln_1(x), mask)
        return x + self.mlp(self.ln_2(x))


def vv_layer(s_ori: torch.Tensor, s_local: torch.Tensor, block: ResidualAttentionBlock):
    """Advance both streams by one layer.

    The local stream reads its values from the original stream and never feeds
    back into it.
    """
    if s_ori.shape != s_local.shape:
        raise ShapeMismatch(f"stream shapes differ: {tuple(s_ori.shape)} vs {tuple(s_local.shape)}")
    if s_ori.shape[-1] != block.attn.width:
        raise ShapeMismatch(f"token width {s_ori.shape[-1]} != layer width {block.attn.width}")
    new_local = s_local + block.attn.value_attention(block.ln_1(s_ori))
    return block(s_ori), new_local


@dataclass
class VisionConfig:
    image_size: int = 32
    patch_size: int = 4
    width: int = 16
    layers: int = 4
    heads: int = 4
    output_dim: int = 16
    stage_layers: tuple[int, ...] = (1, 2, 3, 4)
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    init_std: float = 0.02

    def __post_init__(self):
        self.stage_layers = tuple(int(s) for s in self.stage_layers)
        self.mean = tuple(self.mean)
        self.std = tuple(self.std)
        if self.image_size % self.patch_size:
            raise InvalidConfig("image_size must be a multiple of patch_size")
        if len(self.stage_layers) != 4:
            raise InvalidConfig("exactly four stage layers are required")
        if list(self.stage_layers) != sorted(set(self.stage_layers)):
            raise InvalidConfig("stage layers must be strictly ascending")
        if not all(1 <= s <= self.layers for s in self.stage_layers):
            raise InvalidConfig(f"stage layers must lie in 1..{self.layers}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @classmethod
    def vit_l14_336(cls) -> "VisionConfig":
        return cls(image_size=336, patch_size=14, width=1024, layers=24, heads=16,
                   output_dim=768, stage_layers=(6, 12, 18, 24), mean=CLIP_MEAN, std=CLIP_STD)


@dataclass
class PatchFeaturePyramid:
    """Per-stage patch features (batch, H_i*W_i, C_i) and the global feature."""

    stages: list[torch.Tensor]
    grids: list[tuple[int, int]]
    global_feature: torch.Tensor
    original_stages: list[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        if len(self.stages) != 4 or len(self.grids) != 4:
            raise ShapeMismatch("a pyramid has exactly four stages")
        for feats, (h, w) in zip(self.stages, self.grids):
            if feats.shape[-2] != h * w:
                raise ShapeMismatch(f"{feats.shape[-2]} tokens do not fill a {h}x{w} grid")

    def select(self, index) -> "PatchFeaturePyramid":
        """Sub-batch view (features are batch-first)."""
        return PatchFeaturePyramid(
            [s[index] for s in self.stages], list(self.grids), self.global_feature[index],
            [s[index] for s in self.original_stages],
        )


class VisionTransformerVV(nn.Module):
    def __init__(self, config: VisionConfig):
        super().__init__()
        self.config = config
        w = config.width
        self.conv1 = nn.Conv2d(3, w, kernel_size=config.patch_size, stride=config.patch_size, bias=False)
        self.class_embedding = nn.Parameter(torch.empty(w))
        self.positional_embedding = nn.Parameter(torch.empty(config.grid ** 2 + 1, w))
        self.ln_pre = nn.LayerNorm(w)
        self.transformer = nn.Module()
        self.transformer.resblocks = nn.ModuleList(
            ResidualAttentionBlock(w, config.heads) for _ in range(config.layers)
        )
        self.ln_post = nn.LayerNorm(w)
        self.proj = nn.Parameter(torch.empty(w, config.output_dim))
        self.reset_parameters()

    def reset_parameters(self):
        std = self.config.init_std
        for name, p in self.named_parameters():
            if ".ln_" in name or name.startswith("ln_"):
                continue
            if name.endswith("bias"):
                nn.init.zeros_(p)
            else:
                nn.init.normal_(p, std=std)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[-1] != self.config.image_size \
                or images.shape[-2] != self.config.image_size:
            raise ShapeMismatch(
                f"expected (B, 3, {self.config.image_size}, {self.config.image_size}), got {tuple(images.shape)}"
            )
        x = self.conv1(images.to(self.conv1.weight.dtype)).flatten(2).transpose(1, 2)
        cls = self.class_embedding.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding
        return self.ln_pre(x)

    def forward(self, images: torch.Tensor) -> PatchFeaturePyramid:
        return self.encode_image(images)

    def encode_image(self, images: torch.Tensor) -> PatchFeaturePyramid:
        s_ori = self.embed(images)
        s_local = s_ori
        stages, original = [], []
        for depth, block in enumerate(self.transformer.resblocks, start=1):
            s_ori, s_local = vv_layer(s_ori, s_local, block)
            if depth in self.config.stage_layers:
                # row 0 is the class token; only patch rows are pixel-level features
                stages.append(s_local[:, 1:])
                original.append(s_ori[:, 1:])
        global_feature = self.ln_post(s_ori[:, 0]) @ self.proj
        g = self.config.grid
        return PatchFeaturePyramid(stages, [(g, g)] * 4, global_feature, original)


def preprocess(image: Image.Image | str, config: VisionConfig) -> torch.Tensor:
    """Load/resize an RGB image and normalize it to a (3, S, S) float tensor."""
    if not isinstance(image, Image.Image):
        image = Image.open(image)
    image = image.convert("RGB")
    side = config.image_size
    if image.size != (side, side):
        image = image.resize((side, side), Image.BICUBIC)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(config.mean, dtype=np.float32)) / np.asarray(config.std, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())

