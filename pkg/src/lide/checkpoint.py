"""Checkpoint files: a single JSON document mapping parameter names to
shapes and base64-encoded little-endian float32 payloads.

Round-trips are exact at float32 precision; loading into a model whose
parameter names or shapes disagree is an error.
"""

import base64
import json
from pathlib import Path

import numpy as np


class CheckpointError(ValueError):
    pass


def state_dict(model):
    return {name: p.data for name, p in model.named_parameters()}


def encode_state(state, meta=None, dtype="<f4"):
    """dtype <f4 is the on-disk checkpoint contract; internal sidecars may
    pass <f8 when an exact float64 round-trip matters (optimizer resume)."""
    doc = {"meta": meta or {}, "params": {}}
    for name, arr in state.items():
        packed = np.ascontiguousarray(arr, dtype=dtype)
        doc["params"][name] = {
            "shape": list(arr.shape),
            "dtype": dtype,
            "data": base64.b64encode(packed.tobytes()).decode("ascii"),
        }
    return doc


def decode_state(doc):
    state = {}
    for name, rec in doc["params"].items():
        raw = base64.b64decode(rec["data"])
        arr = np.frombuffer(raw, dtype=rec.get("dtype", "<f4")).reshape(rec["shape"])
        state[name] = arr.astype(np.float64)
    return state, doc.get("meta", {})


def save_checkpoint(path, model, meta=None):
    doc = encode_state(state_dict(model), meta)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f)


def read_meta(path):
    """The meta dict of a checkpoint file, without touching any model."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path) as f:
        return json.load(f).get("meta", {})


def load_checkpoint(path, model):
    """Load parameters in place; returns the checkpoint's meta dict."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with open(path) as f:
        doc = json.load(f)
    state, meta = decode_state(doc)
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(state))
    unexpected = sorted(set(state) - set(params))
    if missing or unexpected:
        raise CheckpointError(f"parameter names disagree: missing={missing} unexpected={unexpected}")
    for name, arr in state.items():
        p = params[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(
                f"shape mismatch for {name}: file {arr.shape} vs model {p.data.shape}"
            )
        p.data[...] = arr
    return meta
