"""Joint training of prompts, fusion stages and adapter; checkpoint I/O."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import Sample, load_dataset, load_image, load_mask
from .errors import DatasetEmpty, HashMismatch, InvalidConfig, IOFailure, NonFiniteLoss
from .kb import KnowledgeBase, knowledge_mean
from .losses import global_loss, local_loss, total_loss
from .model import KAnoCLIP
from .prompts import kd_loss
from .visual import PatchFeaturePyramid, preprocess

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"KANOCKPT"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# checkpoints


def content_hash(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        h.update(name.encode())
        h.update(json.dumps(list(arr.shape)).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict
    step: int = 0
    hash: str = field(default="", compare=False)

    def __post_init__(self):
        self.params = {k: np.ascontiguousarray(v, dtype="<f4") for k, v in self.params.items()}
        if not self.hash:
            self.hash = content_hash(self.params)

    @classmethod
    def from_model(cls, model: KAnoCLIP, config: RunConfig, step: int) -> "Checkpoint":
        params = {k: v.detach().cpu().numpy().copy() for k, v in model.trainable_state().items()}
        return cls(params, config.to_dict(), step)

    @property
    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def build_model(self) -> KAnoCLIP:
        model = KAnoCLIP(self.run_config.model)
        state = model.trainable_state()
        missing = set(state) ^ set(self.params)
        if missing:
            raise HashMismatch(f"checkpoint parameters do not match the model: {sorted(missing)}")
        with torch.no_grad():
            for name, p in state.items():
                p.copy_(torch.from_numpy(self.params[name]))
        model.eval()
        return model


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Header (magic, length, JSON manifest) followed by raw little-endian float32 arrays."""
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.params):
        raw = ckpt.params[name].tobytes()
        entries.append({"name": name, "shape": list(ckpt.params[name].shape), "dtype": "<f4",
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": CKPT_VERSION, "step": ckpt.step, "hash": ckpt.hash,
                         "config": ckpt.config, "params": entries}, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC + struct.pack("<Q", len(header)) + header)
            for raw in blobs:
                fh.write(raw)
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    start = len(CKPT_MAGIC) + 8
    if len(data) < start or not data.startswith(CKPT_MAGIC):
        raise HashMismatch(f"{path} is not a checkpoint or is truncated")
    (hlen,) = struct.unpack("<Q", data[len(CKPT_MAGIC):start])
    try:
        header = json.loads(data[start:start + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HashMismatch(f"{path}: corrupt or truncated header") from exc
    body = data[start + hlen:]
    expected = sum(e["nbytes"] for e in header["params"])
    if len(body) != expected:
        raise HashMismatch(f"{path}: expected {expected} parameter bytes, found {len(body)}")
    params = {}
    for e in header["params"]:
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        params[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
    if content_hash(params) != header["hash"]:
        raise HashMismatch(f"{path}: content hash does not match the manifest")
    return Checkpoint(params, header["config"], header["step"], header["hash"])


def module_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedData:
    samples: list[Sample]
    features: PatchFeaturePyramid
    masks: torch.Tensor  # (N, H, W) in {0, 1}
    labels: torch.Tensor  # (N,)


def prepare(model: KAnoCLIP, samples: list[Sample], chunk: int = 64) -> PreparedData:
    """Encode every image once; the encoders are frozen so features never change."""
    if not samples:
        raise DatasetEmpty("no samples to encode")
    vcfg = model.config.vision
    parts = []
    for i in range(0, len(samples), chunk):
        batch = torch.stack([preprocess(load_image(s.image_path), vcfg) for s in samples[i:i + chunk]])
        parts.append(model.encode_images(batch))
    features = PatchFeaturePyramid(
        [torch.cat([p.stages[k] for p in parts]) for k in range(4)],
        parts[0].grids,
        torch.cat([p.global_feature for p in parts]),
        [torch.cat([p.original_stages[k] for p in parts]) for k in range(4)],
    )
    size = model.config.output_size
    masks = torch.from_numpy(np.stack([load_mask(s, size) for s in samples])).float()
    labels = torch.tensor([s.label for s in samples], dtype=torch.float32)
    return PreparedData(samples, features, masks, labels)


# ---------------------------------------------------------------------------
# training


class Trainer:
    def __init__(self, config: RunConfig, kb: KnowledgeBase | None = None,
                 model: KAnoCLIP | None = None, log_path: str | Path | None = None):
        self.config = config
        self.kb = kb
        self.model = model or KAnoCLIP(config.model)
        self.log_path = Path(log_path) if log_path else None
        self.history: list[dict] = []
        self.step = 0

    def _knowledge(self, classes) -> dict[str, torch.Tensor]:
        if self.config.train.loss_weights.alpha == 0:
            return {}
        if self.kb is None:
            raise DatasetEmpty("the knowledge-driven loss needs a knowledge base")
        with torch.no_grad():
            return {c: knowledge_mean(self.kb, c, self.model.text_encoder.encode_text) for c in classes}

    def loss_terms(self, data: PreparedData, index: torch.Tensor, knowledge: dict):
        model, weights = self.model, self.config.train.loss_weights
        classes = [data.samples[i].class_name for i in index.tolist()]
        out = model(data.features.select(index), classes)
        if knowledge:
            l_kd = torch.stack([
                kd_loss(knowledge[c], out.text[c].normal_mean, out.text[c].abnormal_mean)
                for c in sorted(out.text)
            ]).mean()
        else:
            l_kd = out.S_global.new_zeros(())
        l_global = global_loss(out.S_global / 2, data.labels[index])
        l_local = local_loss(out.abnormal_map, out.normal_map, data.masks[index])
        return l_kd, l_global, l_local, total_loss(l_kd, l_global, l_local, weights)

    def fit(self, data: PreparedData) -> "Checkpoint":
        cfg = self.config.train
        model = self.model
        params = []
        for group in ("prompts", "fusion", "adapter"):
            enabled = group in cfg.trainable
            for p in model.group_parameters(group):
                p.requires_grad_(enabled)
                if enabled:
                    params.append(p)
        if not params:
            logger.info("no trainable parameters selected; returning the initial state")
            return Checkpoint.from_model(model, self.config, self.step)

        torch.manual_seed(cfg.seed)
        gen = torch.Generator().manual_seed(cfg.seed)
        opt = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
        knowledge = self._knowledge(sorted({s.class_name for s in data.samples}))
        n = len(data.samples)
        log = self._open_log()
        model.train()
        try:
            for _ in range(cfg.epochs):
                order = torch.randperm(n, generator=gen)
                for start in range(0, n, cfg.batch_size):
                    index = order[start:start + cfg.batch_size]
                    try:
                        terms = self.loss_terms(data, index, knowledge)
                    except NonFiniteLoss as exc:
                        raise NonFiniteLoss(
                            f"step {self.step}: {exc}; batch={[data.samples[i].image_id for i in index.tolist()]}"
                        ) from exc
                    l_kd, l_global, l_local, l_total = terms
                    opt.zero_grad()
                    l_total.backward()
                    if cfg.grad_clip:
                        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                    opt.step()
                    row = {"step": self.step, "l_kd": l_kd.item(), "l_global": l_global.item(),
                           "l_local": l_local.item(), "l_total": l_total.item()}
                    self.history.append(row)
                    if log is not None:
                        log.writerow(row)
                    self.step += 1
        finally:
            if log is not None:
                self._log_fh.close()
        model.eval()
        return Checkpoint.from_model(model, self.config, self.step)

    def _open_log(self):
        if self.log_path is None:
            return None
        self._log_fh = self.log_path.open("w", newline="")
        writer = csv.DictWriter(self._log_fh, fieldnames=["step", "l_kd", "l_global", "l_local", "l_total"])
        writer.writeheader()
        return writer


def train(config: RunConfig, kb: KnowledgeBase | None = None, model: KAnoCLIP | None = None,
          samples: list[Sample] | None = None, log_path: str | Path | None = None) -> Checkpoint:
    """Train on the auxiliary dataset named in ``config.train`` (or ``samples``)."""
    if samples is None:
        if not config.train.dataset:
            raise InvalidConfig("no auxiliary dataset configured")
        samples = load_dataset(config.train.dataset, config.train.layout)
    if not samples:
        raise DatasetEmpty("auxiliary dataset is empty")
    trainer = Trainer(config, kb, model, log_path)
    data = prepare(trainer.model, samples)
    ckpt = trainer.fit(data)
    if not all(math.isfinite(float(np.abs(v).max(initial=0))) for v in ckpt.params.values()):
        raise NonFiniteLoss("training produced non-finite parameters")
    return ckpt
