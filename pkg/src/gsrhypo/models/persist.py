"""Flat-file model persistence.

Layout: 8 magic bytes, a little-endian uint32 header length, a UTF-8 JSON
header (family, input shape, seed, config digest, threshold, training meta
and the name/shape of every parameter block), then every block as
little-endian float64 in header order.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import ParseError
from .base import Family, TrainedModel

MAGIC = b"GSRHMDL1"


def config_digest(config: dict[str, Any]) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def dumps_model(model: TrainedModel) -> bytes:
    names = sorted(model.params)
    config = model.meta.get("config", {})
    header = {
        "family": model.family.value,
        "input_shape": list(model.input_shape),
        "seed": model.meta.get("seed", config.get("seed", 0)),
        "config_digest": config_digest(config),
        "threshold": model.threshold,
        "meta": _jsonable(model.meta),
        "blocks": [{"name": k, "shape": list(np.shape(model.params[k]))} for k in names],
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes() for k in names)
    return MAGIC + struct.pack("<I", len(head)) + head + body


def loads_model(blob: bytes, expected_digest: str | None = None) -> TrainedModel:
    if blob[:8] != MAGIC:
        raise ParseError("not a model file (bad magic bytes)")
    try:
        (n,) = struct.unpack("<I", blob[8:12])
        header = json.loads(blob[12:12 + n].decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt model header: {exc}") from exc
    if expected_digest is not None and header["config_digest"] != expected_digest:
        warnings.warn(
            f"model config digest {header['config_digest'][:12]} differs from expected {expected_digest[:12]}",
            stacklevel=2,
        )
    params, pos = {}, 12 + n
    for block in header["blocks"]:
        shape = tuple(block["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + size > len(blob):
            raise ParseError(f"model body truncated in block {block['name']!r}")
        params[block["name"]] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
        pos += size
    if pos != len(blob):
        raise ParseError("trailing bytes after model body")
    return TrainedModel(Family(header["family"]), tuple(header["input_shape"]), params,
                        header["meta"], header["threshold"])


def save_model(model: TrainedModel, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps_model(model))
    return path


def load_model(path, expected_digest: str | None = None) -> TrainedModel:
    return loads_model(Path(path).read_bytes(), expected_digest)
