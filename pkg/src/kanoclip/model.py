"""Full detector: frozen encoders plus the trainable prompts, fusion and adapter."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
from torch import nn

from .adapter import ConvAdapter, score_terms
from .errors import InvalidConfig
from .fusion import BLOCK_ORDER, CosineStage, FusionStage, aggregate_maps, final_map
from .prompts import ABNORMAL_WORDS, NORMAL_WORDS, TextFeatures, encode_prompt_bank, init_prompt_bank
from .text_encoder import TextConfig, TextEncoder
from .visual import PatchFeaturePyramid, VisionConfig, VisionTransformerVV


@dataclass
class ModelConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    text: TextConfig = field(default_factory=TextConfig)
    K: int = 12
    normal_words: tuple[str, ...] = NORMAL_WORDS
    abnormal_words: tuple[str, ...] = ABNORMAL_WORDS
    tau: float = 0.07
    n_points: int = 1
    block_order: tuple[str, ...] = BLOCK_ORDER
    sigma: float = 4.0
    map_norm: str = "stage_mean"
    map_size: int | None = None  # None: the input image side
    d_bottle: int | None = None  # None: embed_dim // 4
    adapter_residual: bool = False
    backbone_seed: int = 0
    weights_dir: str | None = None
    init_seed: int = 0
    # ablation switches
    use_vv: bool = True
    use_fusion: bool = True
    use_adapter: bool = True

    def __post_init__(self):
        if isinstance(self.vision, dict):
            self.vision = VisionConfig(**self.vision)
        if isinstance(self.text, dict):
            self.text = TextConfig(**self.text)
        self.normal_words = tuple(self.normal_words)
        self.abnormal_words = tuple(self.abnormal_words)
        self.block_order = tuple(self.block_order)
        if self.vision.output_dim != self.text.output_dim:
            raise InvalidConfig("vision and text encoders must share the embedding width")
        if self.K < 1:
            raise InvalidConfig("K must be >= 1")
        if self.sigma < 0:
            raise InvalidConfig("sigma must be >= 0")

    @property
    def embed_dim(self) -> int:
        return self.text.output_dim

    @property
    def output_size(self) -> tuple[int, int]:
        side = self.map_size or self.vision.image_size
        return side, side

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    per_stage: list
    normal_map: torch.Tensor
    abnormal_map: torch.Tensor
    anomaly_map: torch.Tensor
    S_global: torch.Tensor
    abnormal_prob: torch.Tensor
    map_max: torch.Tensor
    text: dict[str, TextFeatures]


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


class KAnoCLIP(nn.Module):
    """Zero-shot anomaly detector.

    The visual and text encoders are frozen (``requires_grad`` off). Trainable
    parts are grouped as ``prompts``, ``fusion`` and ``adapter``.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        config = config or ModelConfig()
        self.config = config
        self.visual, self.text_encoder = _seeded(
            config.backbone_seed,
            lambda: (VisionTransformerVV(config.vision), TextEncoder(config.text)),
        )
        if config.weights_dir:
            from .weights import load_backbone

            load_backbone(self, config.weights_dir)
        for p in self.encoder_parameters():
            p.requires_grad_(False)

        c, ci = config.embed_dim, config.vision.width

        def build_trainables():
            stage_cls = FusionStage if config.use_fusion else CosineStage
            kwargs = dict(n_points=config.n_points, order=config.block_order) if config.use_fusion else {}
            stages = nn.ModuleList(stage_cls(ci, c, tau=config.tau, **kwargs) for _ in range(4))
            adapter = ConvAdapter(c, config.d_bottle, config.adapter_residual)
            return stages, adapter

        self.prompt_bank = init_prompt_bank(
            config.K, config.text.width, seed=config.init_seed,
            normal_words=config.normal_words, abnormal_words=config.abnormal_words,
        )
        self.stages, self.adapter = _seeded(config.init_seed + 1, build_trainables)

    # parameter groups -------------------------------------------------------

    def encoder_parameters(self):
        yield from self.visual.parameters()
        yield from self.text_encoder.parameters()

    def group_parameters(self, group: str):
        if group == "prompts":
            return list(self.prompt_bank.parameters())
        if group == "fusion":
            return list(self.stages.parameters())
        if group == "adapter":
            return list(self.adapter.parameters()) if self.config.use_adapter else []
        raise InvalidConfig(f"unknown parameter group {group!r}")

    def trainable_state(self) -> dict[str, torch.Tensor]:
        """Named parameters of the prompt bank, fusion stages and adapter."""
        state = {}
        for prefix, module in (("prompt_bank", self.prompt_bank), ("stages", self.stages),
                               ("adapter", self.adapter)):
            for name, p in module.named_parameters():
                state[f"{prefix}.{name}"] = p
        return state

    # forward ----------------------------------------------------------------

    @torch.no_grad()
    def encode_images(self, images: torch.Tensor) -> PatchFeaturePyramid:
        return self.visual.encode_image(images)

    def text_features(self, class_name: str) -> TextFeatures:
        return encode_prompt_bank(self.prompt_bank, class_name, self.text_encoder)

    def forward(self, pyramid: PatchFeaturePyramid, class_names: Sequence[str]) -> ForwardOutput:
        unique = sorted(set(class_names))
        text = {name: self.text_features(name) for name in unique}
        F_text = torch.stack([text[name].F_text for name in class_names])
        stages = pyramid.stages if self.config.use_vv else pyramid.original_stages
        per_stage = [
            stage(feats, hw, F_text) for stage, feats, hw in zip(self.stages, stages, pyramid.grids)
        ]
        normal, abnormal = aggregate_maps(per_stage, self.config.output_size, self.config.map_norm)
        anomaly = final_map(normal, abnormal, self.config.sigma)
        g = pyramid.global_feature.to(F_text.dtype)
        adapted = self.adapter(g) if self.config.use_adapter else g
        s_global, prob, mmax = score_terms(adapted, F_text, anomaly)
        return ForwardOutput(per_stage, normal, abnormal, anomaly, s_global, prob, mmax, text)
