"""Checkpoint directory format: manifest.json plus one raw tensor per file.

The manifest lists every tensor with its shape and dtype (always "f32le");
each tensor is stored as raw little-endian float32 in ``<name>.bin``.  A
``config`` object in the manifest carries whatever constructor arguments
are needed to rebuild the module.  Writes are atomic: files land in a
temporary sibling directory that is renamed into place.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile

import numpy as np
import torch

from .validation import InvalidInputError

__all__ = ["save_state_dict", "load_state_dict", "save_json_atomic", "write_text_atomic"]

_DTYPE = "f32le"


def save_state_dict(directory, state_dict, config: dict, kind: str) -> None:
    directory = str(directory)
    parent = os.path.dirname(os.path.abspath(directory)) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".ckpt-", dir=parent)
    try:
        tensors = []
        for name, tensor in state_dict.items():
            arr = tensor.detach().cpu().to(torch.float32).numpy()
            fname = f"{name}.bin"
            arr.astype("<f4").tofile(os.path.join(tmp, fname))
            tensors.append({
                "name": name,
                "shape": list(arr.shape),
                "dtype": _DTYPE,
                "file": fname,
            })
        manifest = {"kind": kind, "config": config, "tensors": tensors}
        with open(os.path.join(tmp, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if os.path.isdir(directory):
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except Exception:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_state_dict(directory, expected_kind: str | None = None):
    """Load (state_dict, config, kind) from a checkpoint directory."""
    path = os.path.join(str(directory), "manifest.json")
    if not os.path.exists(path):
        raise InvalidInputError(f"no checkpoint manifest at {path}")
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    kind = manifest.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise InvalidInputError(
            f"checkpoint kind {kind!r} does not match expected {expected_kind!r}"
        )
    state = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != _DTYPE:
            raise InvalidInputError(f"unsupported tensor dtype {entry['dtype']!r}")
        raw = np.fromfile(os.path.join(str(directory), entry["file"]), dtype="<f4")
        state[entry["name"]] = torch.from_numpy(
            raw.reshape(entry["shape"]).copy()
        )
    return state, manifest.get("config", {}), kind


def save_json_atomic(path, obj) -> None:
    path = str(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".json-", dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except Exception:
        os.unlink(tmp)
        raise


def write_text_atomic(path, text: str) -> None:
    path = str(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".txt-", dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except Exception:
        os.unlink(tmp)
        raise
