"""Binary checkpoint container.

Layout::

    b"GLIOCKPT"            8-byte magic
    uint32 LE              format version
    uint64 LE              header length in bytes
    header                 UTF-8 JSON (config, tensor directory, metadata)
    blob                   little-endian float32 tensors, back to back

Tensor offsets in the directory are relative to the start of the blob.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .models import ModelGraph, build_model, config_from_dict

MAGIC = b"GLIOCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: ModelGraph, **meta) -> Checkpoint:
        return cls(model.kind, model.config_dict(),
                   {k: v.astype(np.float32) for k, v in model.params.items()},
                   {k: v.astype(np.float32) for k, v in model.buffers.items()}, dict(meta))

    def to_model(self) -> ModelGraph:
        model = build_model(self.kind, config_from_dict(self.kind, self.config))
        _check_directory(model, self.params, self.buffers)
        model.params = {k: v.copy() for k, v in self.params.items()}
        model.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return model


def _check_directory(model: ModelGraph, params, buffers) -> None:
    for group, have, want in (("param", params, model.params), ("buffer", buffers, model.buffers)):
        if set(have) != set(want):
            missing = sorted(set(want) - set(have))
            extra = sorted(set(have) - set(want))
            raise CheckpointError(f"architecture mismatch in {group}s: missing {missing[:3]}, unexpected {extra[:3]}")
        for k in want:
            if tuple(have[k].shape) != tuple(want[k].shape):
                raise CheckpointError(f"architecture mismatch: {k} has shape {have[k].shape}, expected {want[k].shape}")


def save_checkpoint(model_or_ckpt, path, **meta) -> Path:
    ckpt = (model_or_ckpt if isinstance(model_or_ckpt, Checkpoint)
            else Checkpoint.from_model(model_or_ckpt, **meta))
    if meta and isinstance(model_or_ckpt, Checkpoint):
        ckpt.meta.update(meta)
    directory = []
    chunks = []
    offset = 0
    for group, tensors in (("param", ckpt.params), ("buffer", ckpt.buffers)):
        for name in sorted(tensors):
            raw = np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
            directory.append({"name": name, "group": group, "shape": list(tensors[name].shape),
                              "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "tensors": directory,
        "blob_nbytes": offset,
        "seed": ckpt.meta.get("seed"),
        "epoch": ckpt.meta.get("epoch"),
        "metric": ckpt.meta.get("metric"),
        "meta": {k: v for k, v in ckpt.meta.items() if k not in ("seed", "epoch", "metric")},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)))
        f.write(hbytes)
        for c in chunks:
            f.write(c)
    return path


def read_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: corrupt checkpoint (file truncated before header)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CheckpointError(f"{path}: corrupt checkpoint (header truncated)")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from None
    blob = data[start + hlen :]
    if len(blob) != header["blob_nbytes"]:
        raise CheckpointError(
            f"{path}: corrupt checkpoint (blob has {len(blob)} bytes, header declares {header['blob_nbytes']})")
    params, buffers = {}, {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        if entry["nbytes"] != 4 * n or entry["offset"] + entry["nbytes"] > len(blob):
            raise CheckpointError(f"{path}: corrupt tensor directory entry {entry['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=entry["offset"]).reshape(shape)
        (params if entry["group"] == "param" else buffers)[entry["name"]] = arr.astype(np.float32)
    meta = dict(header.get("meta") or {})
    for key in ("seed", "epoch", "metric"):
        meta[key] = header.get(key)
    return Checkpoint(header["kind"], header["config"], params, buffers, meta)


def load_checkpoint(path, expected_kind: str | None = None) -> ModelGraph:
    ckpt = read_checkpoint(path)
    if expected_kind is not None and ckpt.kind != expected_kind:
        raise CheckpointError(f"{path}: architecture mismatch, expected a {expected_kind} model, found {ckpt.kind}")
    try:
        model = ckpt.to_model()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: architecture mismatch ({exc})") from None
    model.meta = ckpt.meta
    return model
