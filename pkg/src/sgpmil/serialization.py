"""Model files: a JSON document with a format/version header and every tensor.

Floats are written with ``repr`` precision, so a save/load round trip is
bit-exact for float64 parameters.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import DatasetFormatError
from .mil_head import build_model

MODEL_FORMAT = "sgpmil-model"
MODEL_VERSION = 1


def model_to_dict(model) -> dict:
    tensors = {}
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        tensors[name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    return {"format": MODEL_FORMAT, "version": MODEL_VERSION, "config": model.config(), "tensors": tensors}


def model_from_dict(doc: dict):
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise DatasetFormatError(
            f"not a {MODEL_FORMAT} v{MODEL_VERSION} file (got {doc.get('format')!r} v{doc.get('version')!r})")
    try:
        model = build_model(**doc["config"])
        state = {}
        for name, rec in doc["tensors"].items():
            arr = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
            state[name] = torch.from_numpy(arr)
        model.load_state_dict(state, strict=True)
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise DatasetFormatError(f"malformed model file: {exc}") from None
    model.eval()
    return model


def save_model(model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model_to_dict(model)) + "\n", encoding="utf-8")
    return path


def load_model(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: not valid JSON: {exc}") from None
    return model_from_dict(doc)
