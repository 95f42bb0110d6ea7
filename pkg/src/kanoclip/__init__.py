"""Zero-shot anomaly detection with learnable prompts, dual-stream CLIP features and cross-modal fusion."""

__version__ = "0.1.0"

from .adapter import ConvAdapter, ScoreRecord, adapt_global, global_score
from .config import RunConfig, TrainConfig, load_config
from .data import Sample, load_dataset, make_synthetic_dataset
from .evaluate import EvalReport, emit_report, evaluate, infer, roc_auc
from .fusion import FusionStage, aggregate_maps, bica_stage, final_map, gaussian_filter
from .kb import FixtureClient, KnowledgeBase, build_knowledge_base, load_kb, save_kb
from .losses import LossWeights, dice_loss, focal_loss, global_loss, local_loss, total_loss
from .model import KAnoCLIP, ModelConfig
from .prompts import PromptBank, assemble_prompts, init_prompt_bank, kd_loss
from .trainer import Checkpoint, Trainer, load_checkpoint, save_checkpoint, train
from .visual import VisionConfig, VisionTransformerVV, scaled_attention, vv_layer

__all__ = [
    "Checkpoint", "ConvAdapter", "EvalReport", "FixtureClient", "FusionStage", "KAnoCLIP",
    "KnowledgeBase", "LossWeights", "ModelConfig", "PromptBank", "RunConfig", "Sample",
    "ScoreRecord", "TrainConfig", "Trainer", "VisionConfig", "VisionTransformerVV",
    "adapt_global", "aggregate_maps", "assemble_prompts", "bica_stage", "build_knowledge_base",
    "dice_loss", "emit_report", "evaluate", "final_map", "focal_loss", "gaussian_filter",
    "global_loss", "global_score", "infer", "init_prompt_bank", "kd_loss", "load_checkpoint",
    "load_config", "load_dataset", "load_kb", "local_loss", "make_synthetic_dataset", "roc_auc",
    "save_checkpoint", "save_kb", "scaled_attention", "total_loss", "train", "vv_layer",
]
