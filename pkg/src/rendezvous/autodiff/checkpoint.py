"""JSON checkpoints: ``{"manifest": {...}, "parameters": {name: {"shape", "data"}}}``.

Values are stored as 32-bit floats in row-major order.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import FormatError


def save_checkpoint(path, state: dict[str, np.ndarray], manifest: dict) -> None:
    params = {
        name: {"shape": list(arr.shape), "data": arr.astype(np.float32).reshape(-1).tolist()}
        for name, arr in state.items()
    }
    Path(path).write_text(json.dumps({"manifest": manifest, "parameters": params}, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = json.loads(Path(path).read_text())
        manifest = blob["manifest"]
        state = {}
        for name, entry in blob["parameters"].items():
            arr = np.asarray(entry["data"], dtype=np.float32)
            shape = tuple(entry["shape"])
            if arr.size != int(np.prod(shape)):
                raise FormatError(f"{name}: {arr.size} values do not fill shape {shape}")
            state[name] = arr.reshape(shape)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed checkpoint {path}: {exc}") from None
    return state, manifest
