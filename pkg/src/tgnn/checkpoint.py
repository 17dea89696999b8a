"""Plain-text parameter checkpoints.

Layout (UTF-8, ``\\n`` line endings)::

    tgnn-checkpoint 1
    meta <json object>
    param <name> <ndim> <dim_1> ... <dim_ndim>
    <float.hex values separated by single spaces>
    param ...

Values are written with :meth:`float.hex`, so loading returns bit-identical
arrays. ``meta`` holds the model configuration and any extra run metadata.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = "tgnn-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> str:
    lines = [f"{MAGIC} {VERSION}", "meta " + json.dumps(dict(meta or {}), sort_keys=True)]
    for name, arr in params.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"parameter name contains whitespace: {name!r}")
        arr = np.asarray(arr, dtype=np.float64)
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"param {name} {arr.ndim} {dims}".rstrip())
        lines.append(" ".join(float(x).hex() for x in arr.reshape(-1)))
    return "\n".join(lines) + "\n"


def loads(text: str) -> tuple[dict[str, np.ndarray], dict]:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].split() != [MAGIC, str(VERSION)]:
        raise CheckpointError("not a version-1 tgnn checkpoint")
    if len(lines) < 2 or not lines[1].startswith("meta "):
        raise CheckpointError("missing meta line")
    meta = json.loads(lines[1][5:])
    params: dict[str, np.ndarray] = {}
    body = lines[2:]
    if len(body) % 2:
        raise CheckpointError("truncated parameter block")
    for head, values in zip(body[::2], body[1::2]):
        parts = head.split()
        if len(parts) < 3 or parts[0] != "param":
            raise CheckpointError(f"bad parameter header: {head!r}")
        name, ndim = parts[1], int(parts[2])
        shape = tuple(int(x) for x in parts[3 : 3 + ndim])
        flat = [float.fromhex(x) for x in values.split()] if values else []
        if len(flat) != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: expected {np.prod(shape)} values, got {len(flat)}")
        params[name] = np.array(flat, dtype=np.float64).reshape(shape)
    return params, meta


def save(path, params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> str:
    """Write a checkpoint and return its sha256 fingerprint."""
    text = dumps(params, meta)
    Path(path).write_text(text, encoding="utf-8")
    return fingerprint_text(text)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_text(encoding="utf-8"))


def fingerprint_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def fingerprint(params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> str:
    return fingerprint_text(dumps(params, meta))
