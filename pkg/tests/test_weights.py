import json

import numpy as np
import pytest
import torch

from kanoclip.errors import WeightLoadFailure
from kanoclip.model import KAnoCLIP, ModelConfig
from kanoclip.weights import (
    backbone_state,
    convert_clip_state_dict,
    load_backbone,
    read_backbone,
    save_backbone,
    write_weights,
)


def test_round_trip_into_fresh_model(tmp_path):
    src = KAnoCLIP(ModelConfig(backbone_seed=3))
    save_backbone(src, tmp_path / "w")
    manifest = json.loads((tmp_path / "w" / "manifest.json").read_text())
    assert manifest["format_version"] == 1 and manifest["byteorder"] == "little"
    assert {e["dtype"] for e in manifest["params"]} == {"<f4"}

    dst = KAnoCLIP(ModelConfig(backbone_seed=4))
    assert not torch.equal(src.visual.conv1.weight, dst.visual.conv1.weight)
    load_backbone(dst, tmp_path / "w")
    a, b = backbone_state(src), backbone_state(dst)
    assert all(torch.equal(a[k], b[k]) for k in a)

    via_config = KAnoCLIP(ModelConfig(weights_dir=str(tmp_path / "w")))
    assert torch.equal(via_config.visual.conv1.weight, src.visual.conv1.weight)
    assert not any(p.requires_grad for p in via_config.encoder_parameters())


def test_shape_mismatch_rejected(tmp_path):
    arrays = {k: v.numpy() for k, v in backbone_state(KAnoCLIP()).items()}
    arrays["visual.conv1.weight"] = np.zeros((1, 2, 3, 4), dtype=np.float32)
    write_weights(arrays, tmp_path / "w")
    with pytest.raises(WeightLoadFailure):
        load_backbone(KAnoCLIP(), tmp_path / "w")


def test_missing_param_rejected(tmp_path):
    arrays = {k: v.numpy() for k, v in backbone_state(KAnoCLIP()).items()}
    arrays.pop("text.token_embedding.weight")
    write_weights(arrays, tmp_path / "w")
    with pytest.raises(WeightLoadFailure):
        load_backbone(KAnoCLIP(), tmp_path / "w")


def test_bad_directory_and_version(tmp_path):
    with pytest.raises(WeightLoadFailure):
        read_backbone(tmp_path)
    write_weights({"a": np.zeros(2)}, tmp_path / "w")
    manifest = json.loads((tmp_path / "w" / "manifest.json").read_text())
    manifest["format_version"] = 7
    (tmp_path / "w" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(WeightLoadFailure):
        read_backbone(tmp_path / "w")


def test_convert_clip_key_mapping():
    state = {
        "visual.conv1.weight": torch.ones(2, 3),
        "token_embedding.weight": torch.zeros(4, 2),
        "positional_embedding": torch.zeros(3, 2),
        "transformer.resblocks.0.ln_1.weight": torch.ones(2),
        "ln_final.bias": torch.zeros(2),
        "text_projection": torch.eye(2),
        "logit_scale": torch.tensor(4.6),
    }
    out = convert_clip_state_dict(state)
    assert sorted(out) == sorted([
        "visual.conv1.weight", "text.token_embedding.weight", "text.positional_embedding",
        "text.transformer.resblocks.0.ln_1.weight", "text.ln_final.bias", "text.text_projection",
    ])
    assert all(a.dtype == np.dtype("<f4") for a in out.values())
