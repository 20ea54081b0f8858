"""Checkpoint serialization: float32 file contract, float64 sidecar encoding,
and mismatch errors."""

import json

import numpy as np
import pytest

from lide import checkpoint as ckpt
from lide.model import LideModel, ModelConfig
from lide.synthdata import default_schema


@pytest.fixture()
def model():
    schema = default_schema()
    cfg = ModelConfig(image_size=32, vocab_size=schema.vocab_size, max_len=8,
                      d_img=10, d_text=8, conv_channels=(4,),
                      decoder_layers=1, decoder_heads=2, encoder_layers=1,
                      encoder_heads=2, ffn_mult=2)
    return LideModel(cfg, np.random.default_rng(0))


def test_file_roundtrip_exact_at_float32(model, tmp_path):
    path = tmp_path / "ck.json"
    before = {k: v.copy() for k, v in ckpt.state_dict(model).items()}
    ckpt.save_checkpoint(path, model, meta={"phase": "test", "step": 3})

    # loading back yields exactly the float32 quantization of the state
    for p in model.parameters():
        p.data += 123.0
    meta = ckpt.load_checkpoint(path, model)
    assert meta == {"phase": "test", "step": 3}
    for name, arr in ckpt.state_dict(model).items():
        np.testing.assert_array_equal(arr, before[name].astype("<f4").astype(np.float64))

    # a second save/load of the already-quantized state is the identity
    ckpt.save_checkpoint(path, model)
    snap = {k: v.copy() for k, v in ckpt.state_dict(model).items()}
    ckpt.load_checkpoint(path, model)
    for name, arr in ckpt.state_dict(model).items():
        np.testing.assert_array_equal(arr, snap[name])


def test_encode_state_float64_sidecar_is_bit_exact():
    rng = np.random.default_rng(1)
    state = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,))}
    doc = ckpt.encode_state(state, dtype="<f8")
    back, _ = ckpt.decode_state(doc)
    for name in state:
        np.testing.assert_array_equal(back[name], state[name])
    # JSON round-trip preserves the payload
    back2, _ = ckpt.decode_state(json.loads(json.dumps(doc)))
    for name in state:
        np.testing.assert_array_equal(back2[name], state[name])


def test_decode_state_defaults_to_float32():
    state = {"w": np.array([0.1, 0.2, 0.3])}
    doc = ckpt.encode_state(state)
    for rec in doc["params"].values():
        del rec["dtype"]
    back, _ = ckpt.decode_state(doc)
    np.testing.assert_array_equal(back["w"], state["w"].astype("<f4").astype(np.float64))


def test_read_meta_without_model(model, tmp_path):
    path = tmp_path / "ck.json"
    ckpt.save_checkpoint(path, model, meta={"step": 9})
    assert ckpt.read_meta(path) == {"step": 9}
    with pytest.raises(ckpt.CheckpointError):
        ckpt.read_meta(tmp_path / "absent.json")


def test_load_checkpoint_errors(model, tmp_path):
    path = tmp_path / "ck.json"
    with pytest.raises(FileNotFoundError):
        ckpt.load_checkpoint(path, model)

    ckpt.save_checkpoint(path, model)
    doc = json.loads(path.read_text())

    # unexpected / missing names
    doc_bad = json.loads(json.dumps(doc))
    first = next(iter(doc_bad["params"]))
    doc_bad["params"]["rogue"] = doc_bad["params"].pop(first)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc_bad))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(bad, model)

    # shape mismatch
    doc_bad = json.loads(json.dumps(doc))
    rec = doc_bad["params"][first]
    rec["shape"] = [int(np.prod(rec["shape"])), 1] if len(rec["shape"]) != 2 \
        else [rec["shape"][1], rec["shape"][0]]
    bad.write_text(json.dumps(doc_bad))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(bad, model)


def test_checkpoint_is_plain_json(model, tmp_path):
    path = tmp_path / "ck.json"
    ckpt.save_checkpoint(path, model, meta={"k": 1})
    doc = json.loads(path.read_text())
    assert set(doc) == {"meta", "params"}
    rec = next(iter(doc["params"].values()))
    assert set(rec) == {"shape", "dtype", "data"}
    assert rec["dtype"] == "<f4"
