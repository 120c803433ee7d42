"""
Binary parameter checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"HNSEGCKP"
    4 bytes   uint32 format version (1)
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header
    ...       raw float32 little-endian arrays, concatenated in header order

The header holds ``config`` (architecture record), ``config_hash`` (sha256 of
the canonical JSON of ``config``), ``meta`` (free-form run metadata),
``optimizer`` (AdamW scalars) and ``entries``: an ordered list of
``{"name", "group", "shape"}`` where ``group`` is one of ``param``,
``buffer``, ``adam_m`` or ``adam_v``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ConfigError, FormatError
from .optim import AdamWState
from .tensor import Tensor

MAGIC = b"HNSEGCKP"
VERSION = 1
_LE_F32 = np.dtype("<f4")


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def params_hash(params: Mapping[str, "Tensor | np.ndarray"]) -> str:
    """Digest of names, shapes and float32 bytes, in mapping order."""
    h = hashlib.sha256()
    for name, p in params.items():
        arr = np.ascontiguousarray(p.data if isinstance(p, Tensor) else p, dtype=_LE_F32)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class CheckpointData:
    config: dict
    config_hash: str
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: AdamWState | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(
    path: str | os.PathLike,
    params: Mapping[str, Tensor],
    buffers: Mapping[str, np.ndarray],
    config: Mapping,
    optimizer: AdamWState | None = None,
    meta: Mapping | None = None,
) -> None:
    entries = []
    blobs = []

    def put(group, name, arr):
        arr = np.ascontiguousarray(arr, dtype=_LE_F32)
        entries.append({"name": name, "group": group, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())

    for name, p in params.items():
        put("param", name, p.data)
    for name, b in buffers.items():
        put("buffer", name, b)
    opt = None
    if optimizer is not None:
        opt = {
            "step": optimizer.step,
            "weight_decay": optimizer.weight_decay,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
        }
        for name in params:
            put("adam_m", name, optimizer.m[name])
            put("adam_v", name, optimizer.v[name])
    header = {
        "config": dict(config),
        "config_hash": config_hash(config),
        "meta": dict(meta or {}),
        "optimizer": opt,
        "entries": entries,
    }
    head = json.dumps(header, sort_keys=True).encode()
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(head)))
        f.write(head)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, expected_config: Mapping | None = None) -> CheckpointData:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20 : 20 + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    if header["config_hash"] != config_hash(header["config"]):
        raise FormatError(f"{path}: stored config hash does not match stored config")
    if expected_config is not None and config_hash(expected_config) != header["config_hash"]:
        raise ConfigError(f"{path}: checkpoint architecture does not match the requested config")
    offset = 20 + hlen
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
    for e in header["entries"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(raw):
            raise FormatError(f"{path}: truncated payload at {e['name']}")
        arr = np.frombuffer(raw, dtype=_LE_F32, count=count, offset=offset).reshape(e["shape"])
        groups[e["group"]][e["name"]] = arr.astype(np.float32)
        offset = end
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = AdamWState(
            weight_decay=o["weight_decay"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"],
            m=groups["adam_m"], v=groups["adam_v"],
        )
    return CheckpointData(
        config=header["config"],
        config_hash=header["config_hash"],
        params=groups["param"],
        buffers=groups["buffer"],
        optimizer=opt,
        meta=header["meta"],
    )
