"""Backbone weight directory: ``manifest.json`` plus ``weights.npz``.

Layout::

    <dir>/manifest.json   {"format_version": 1, "byteorder": "little",
                           "params": [{"name": ..., "shape": [...], "dtype": "<f4"}, ...]}
    <dir>/weights.npz     one array per manifest name, little-endian float32

Names are ``visual.<clip visual key>`` and ``text.<clip text key>``, so a
published CLIP state dict maps over with :func:`convert_clip_state_dict`.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import WeightLoadFailure

WEIGHTS_VERSION = 1
MANIFEST = "manifest.json"
ARRAYS = "weights.npz"

# CLIP keys that belong to the text tower (everything else except visual.* is ignored)
_TEXT_PREFIXES = ("token_embedding.", "positional_embedding", "transformer.", "ln_final.", "text_projection")


def backbone_state(model) -> dict[str, torch.Tensor]:
    state = {f"visual.{k}": v for k, v in model.visual.state_dict().items()}
    state.update({f"text.{k}": v for k, v in model.text_encoder.state_dict().items()})
    return state


def save_backbone(model, directory: str | Path) -> Path:
    arrays = {k: v.detach().cpu().numpy() for k, v in backbone_state(model).items()}
    return write_weights(arrays, directory)


def read_backbone(directory: str | Path) -> dict[str, np.ndarray]:
    """Arrays named in the manifest, checked against the stored shapes."""
    root = Path(directory)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
        with np.load(root / ARRAYS) as npz:
            stored = {k: npz[k] for k in npz.files}
    except (OSError, ValueError, KeyError) as exc:
        raise WeightLoadFailure(f"cannot read backbone weights from {root}: {exc}") from exc
    if manifest.get("format_version") != WEIGHTS_VERSION:
        raise WeightLoadFailure(f"unsupported weights format {manifest.get('format_version')!r}")
    arrays = {}
    for entry in manifest["params"]:
        name = entry["name"]
        if name not in stored:
            raise WeightLoadFailure(f"manifest lists {name} but the archive lacks it")
        arr = stored[name]
        if list(arr.shape) != list(entry["shape"]):
            raise WeightLoadFailure(f"{name}: archive shape {list(arr.shape)} != manifest {entry['shape']}")
        arrays[name] = arr.astype("<f4", copy=False)
    return arrays


def load_backbone(model, directory: str | Path) -> None:
    """Copy every encoder parameter from ``directory``; all names must match."""
    arrays = read_backbone(directory)
    state = backbone_state(model)
    missing = sorted(set(state) - set(arrays))
    extra = sorted(set(arrays) - set(state))
    if missing or extra:
        raise WeightLoadFailure(f"weights do not fit the model: missing {missing[:5]}, unexpected {extra[:5]}")
    with torch.no_grad():
        for name, tensor in state.items():
            src = arrays[name]
            if tuple(src.shape) != tuple(tensor.shape):
                raise WeightLoadFailure(f"{name}: expected {tuple(tensor.shape)}, got {tuple(src.shape)}")
            tensor.copy_(torch.from_numpy(np.array(src, dtype=np.float32)))


def convert_clip_state_dict(state: dict) -> dict[str, np.ndarray]:
    """Rename a published CLIP state dict to the manifest naming.

    Only the key mapping is done here; the text tower still expects this
    package's tokenizer, so pretrained text weights are of limited use.
    """
    out = {}
    for key, value in state.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        if key.startswith("visual."):
            out[key] = arr.astype("<f4")
        elif key.startswith(_TEXT_PREFIXES):
            out[f"text.{key}"] = arr.astype("<f4")
    return out


def write_weights(arrays: dict[str, np.ndarray], directory: str | Path) -> Path:
    out = Path(directory)
    arrays = {k: np.asarray(a).astype("<f4") for k, a in arrays.items()}
    manifest = {
        "format_version": WEIGHTS_VERSION,
        "byteorder": "little",
        "params": [{"name": k, "shape": list(a.shape), "dtype": "<f4"} for k, a in sorted(arrays.items())],
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        np.savez(out / ARRAYS, **arrays)
        (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise WeightLoadFailure(f"cannot write backbone weights to {out}: {exc}") from exc
    return out
