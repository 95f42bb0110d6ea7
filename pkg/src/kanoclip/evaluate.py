"""Inference, AUROC metrics and report emission."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .adapter import ScoreRecord
from .data import Sample, load_image, load_mask
from .errors import DegenerateLabels, IOFailure, ShapeMismatch
from .model import KAnoCLIP
from .visual import preprocess

logger = logging.getLogger(__name__)

REPORT_VERSION = 1


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ShapeMismatch(f"{scores.size} scores for {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs at least one positive and one negative")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    # average 1-based rank of each distinct value
    ranks = np.cumsum(counts) - (counts - 1) / 2.0
    rank_sum = ranks[inverse][labels].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class ImageResult:
    image_id: str
    class_name: str
    record: ScoreRecord
    anomaly_map: np.ndarray = field(repr=False)


@dataclass
class EvalReport:
    per_class: dict[str, dict]
    image_auc: float | None
    pixel_auc: float | None
    records: list[dict]
    config: dict
    dataset: str
    sigma: float = 0.0
    map_size: tuple[int, int] = (0, 0)
    provenance: dict = field(default_factory=dict)
    results: list[ImageResult] = field(default_factory=list, repr=False, compare=False)

    def to_dict(self) -> dict:
        overall = {"image_auc": self.image_auc}
        if self.pixel_auc is not None:
            overall["pixel_auc"] = self.pixel_auc
        return {
            "report_version": REPORT_VERSION,
            "dataset": self.dataset,
            "overall": overall,
            "per_class": self.per_class,
            "images": self.records,
            "map": {"height": self.map_size[0], "width": self.map_size[1], "sigma": self.sigma},
            "config": self.config,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        overall = data["overall"]
        return cls(
            per_class=data["per_class"], image_auc=overall["image_auc"],
            pixel_auc=overall.get("pixel_auc"), records=data["images"], config=data["config"],
            dataset=data["dataset"], sigma=data["map"]["sigma"],
            map_size=(data["map"]["height"], data["map"]["width"]), provenance=data["provenance"],
        )


@torch.no_grad()
def infer(model: KAnoCLIP, image, class_name: str) -> tuple[np.ndarray, ScoreRecord]:
    """Anomaly map and score for one image (path, PIL image or tensor)."""
    batch = infer_batch(model, [image], [class_name])
    return batch[0]


@torch.no_grad()
def infer_batch(model: KAnoCLIP, images, class_names) -> list[tuple[np.ndarray, ScoreRecord]]:
    model.eval()
    vcfg = model.config.vision
    tensors = []
    for img in images:
        if isinstance(img, torch.Tensor):
            tensors.append(img)
        else:
            tensors.append(preprocess(img if isinstance(img, Image.Image) else load_image(img), vcfg))
    pyramid = model.encode_images(torch.stack(tensors))
    out = model(pyramid, list(class_names))
    results = []
    for i in range(len(tensors)):
        p, m = float(out.abnormal_prob[i]), float(out.map_max[i])
        results.append((out.anomaly_map[i].cpu().numpy(), ScoreRecord(p + m, p, m)))
    return results


def _safe_auc(scores, labels, what):
    try:
        return roc_auc(scores, labels)
    except DegenerateLabels:
        logger.warning("%s: only one label present, AUC undefined", what)
        return None


def evaluate(model: KAnoCLIP, samples: list[Sample], dataset: str = "", config: dict | None = None,
             pixel_pooling: str = "pooled", image_auc_mode: str = "class_mean",
             batch_size: int = 32, keep_maps: bool = True) -> EvalReport:
    """Score every sample; per-class AUCs and their unweighted mean."""
    size = model.config.output_size
    with_masks = any(s.mask_path is not None for s in samples)
    results: list[ImageResult] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        outs = infer_batch(model, [s.image_path for s in chunk], [s.class_name for s in chunk])
        for s, (amap, rec) in zip(chunk, outs):
            rec.label = s.label
            results.append(ImageResult(s.image_id, s.class_name, rec, amap))

    per_class = {}
    for name in sorted({s.class_name for s in samples}):
        idx = [i for i, s in enumerate(samples) if s.class_name == name]
        entry = {
            "image_auc": _safe_auc([results[i].record.S_global for i in idx],
                                   [samples[i].label for i in idx], f"{name} image AUC"),
            "count": len(idx),
        }
        if with_masks:
            maps = [results[i].anomaly_map for i in idx]
            masks = [load_mask(samples[i], size) for i in idx]
            if pixel_pooling == "pooled":
                entry["pixel_auc"] = _safe_auc(np.concatenate([m.ravel() for m in maps]),
                                               np.concatenate([g.ravel() for g in masks]), f"{name} pixel AUC")
            else:
                vals = [roc_auc(m, g) for m, g in zip(maps, masks) if 0 < g.sum() < g.size]
                entry["pixel_auc"] = float(np.mean(vals)) if vals else None
        per_class[name] = entry

    def mean_of(key):
        vals = [e[key] for e in per_class.values() if e.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    if image_auc_mode == "pooled":
        image_auc = _safe_auc([r.record.S_global for r in results], [s.label for s in samples], "pooled image AUC")
    else:
        image_auc = mean_of("image_auc")
    pixel_auc = mean_of("pixel_auc") if with_masks else None
    records = [{"image_id": r.image_id, "class": r.class_name, **r.record.to_dict()} for r in results]
    return EvalReport(per_class, image_auc, pixel_auc, records, config or {}, dataset,
                      model.config.sigma, size, results=results if keep_maps else [])


def heatmap_bytes(anomaly_map: np.ndarray) -> np.ndarray:
    return np.round(255.0 * np.clip(anomaly_map, 0.0, 1.0)).astype(np.uint8)


def emit_report(report: EvalReport, out_dir: str | Path) -> Path:
    """Write ``metrics.json``, per-image heatmaps and a float map archive."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        if report.results:
            maps = {}
            for r in report.results:
                target = out / "heatmaps" / Path(r.image_id).with_suffix(".png")
                target.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(heatmap_bytes(r.anomaly_map), mode="L").save(target)
                maps[r.image_id] = r.anomaly_map.astype(np.float32)
            np.savez_compressed(out / "anomaly_maps.npz", sigma=np.float64(report.sigma),
                                shape=np.asarray(report.map_size), **maps)
    except OSError as exc:
        raise IOFailure(f"cannot write report to {out}: {exc}") from exc
    return out / "metrics.json"


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))
