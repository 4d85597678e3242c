"""Checkpoint text format.

A checkpoint is one JSON document::

    {"format": "masd-checkpoint", "version": 1, "meta": {...},
     "tensors": {name: {"shape": [...], "data": base64(little-endian float64)}}}

Keys are sorted so identical contents serialize to identical bytes.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT = "masd-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_tensor(a: np.ndarray) -> dict[str, Any]:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_tensor(entry: Mapping[str, Any]) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    shape = tuple(int(s) for s in entry["shape"])
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if arr.size != int(np.prod(shape)):
        raise CheckpointError(f"tensor payload of {arr.size} values does not fit shape {shape}")
    return arr.reshape(shape)


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> str:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "meta": dict(meta or {}),
        "tensors": {k: encode_tensor(tensors[k]) for k in sorted(tensors)},
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def loads(text: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    if doc.get("format") != FORMAT:
        raise CheckpointError("not a masd checkpoint")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
    tensors = {k: decode_tensor(v) for k, v in doc["tensors"].items()}
    return tensors, doc.get("meta", {})


def save(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_text(dumps(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_text())
