"""Binary checkpoint container.

Layout::

    b"BLRMOECK"                    8-byte magic
    uint32 little-endian           format version
    uint64 little-endian           header length in bytes
    header                         UTF-8 JSON, keys sorted, no whitespace
    blobs                          raw little-endian float64, in header order

The header holds the model config, free-form metadata and a table of
``{name, shape, offset}`` entries; offsets are relative to the start of the
blob area. The writer is a pure function of its inputs, so saving a loaded
checkpoint reproduces the original bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import model_config_from_dict, model_config_to_dict
from .errors import ConfigurationError
from .model import Model, param_specs
from .numerics import Tensor

MAGIC = b"BLRMOECK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    model: Model
    metadata: dict = field(default_factory=dict)


def to_bytes(model: Model, metadata: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in model.names():
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "config": model_config_to_dict(model.config),
        "metadata": metadata or {},
        "params": entries,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(raw)) + raw + b"".join(blobs)


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < _PREFIX.size:
        raise ConfigurationError("checkpoint truncated")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise ConfigurationError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    header = json.loads(buf[_PREFIX.size:start].decode())
    cfg = model_config_from_dict(header["config"])
    specs = param_specs(cfg)
    params = {}
    for e in header["params"]:
        shape = tuple(e["shape"])
        if e["name"] not in specs or specs[e["name"]].shape != shape:
            raise ConfigurationError(f"checkpoint parameter {e['name']} {shape} does not match its config")
        count = int(np.prod(shape, dtype=np.int64))
        lo = start + e["offset"]
        if lo + 8 * count > len(buf):
            raise ConfigurationError("checkpoint truncated")
        data = np.frombuffer(buf, dtype="<f8", count=count, offset=lo).reshape(shape).astype(np.float64)
        params[e["name"]] = data
    missing = set(specs) - set(params)
    if missing:
        raise ConfigurationError(f"checkpoint lacks parameters {sorted(missing)}")
    model = Model(cfg, {n: Tensor(params[n], name=n) for n in specs})
    return Checkpoint(model, header["metadata"])


def save(path: str | Path, model: Model, metadata: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(model, metadata))


def load(path: str | Path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(buf)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
