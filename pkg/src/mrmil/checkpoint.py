"""Versioned checkpoint files.

Layout::

    MRMIL-CHECKPOINT\\n
    <one line of JSON: version, model config, array index>\\n
    <raw little-endian float64 data, arrays back to back>

The JSON is written with sorted keys and the data in parameter order, so the
same model always serialises to the same bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig

MAGIC = b"MRMIL-CHECKPOINT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(model: Model, path: Path, extra: dict | None = None) -> None:
    index = []
    offset = 0
    blobs = []
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(p.data.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"version": VERSION, "config": model.config.to_dict(), "arrays": index, "extra": extra or {}}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for raw in blobs:
            fh.write(raw)


def read(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline())
        body = fh.read()
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    arrays = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated data for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(body[start:start + nbytes], dtype="<f8").reshape(entry["shape"]).copy()
    return header, arrays


def load(path: Path) -> Model:
    header, arrays = read(path)
    model = Model(ModelConfig.from_dict(header["config"]))
    model.load_state_dict(arrays)
    return model
