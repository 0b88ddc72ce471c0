"""Versioned binary container for estimator stages.

Layout::

    b"SHCSTAGE"            8-byte magic
    uint32 LE              format version
    uint64 LE              header length H
    H bytes                UTF-8 JSON header
    payload                raw little-endian arrays, offsets given in the header

The header lists each stage's kind and its arrays (name, dtype, shape,
offset, nbytes), plus the training config and its SHA-256 hash.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .enhance import STAGE_KINDS, LinearStage, WienerStage
from .errors import ConfigError

MAGIC = b"SHCSTAGE"
VERSION = 1


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_stages(path, stages, config: dict | None = None) -> Path:
    config = config or {}
    payload = bytearray()
    entries = []
    for stage in stages:
        arrays = []
        for name, arr in stage.params().items():
            arr = np.ascontiguousarray(arr)
            dtype = arr.dtype.newbyteorder("<")
            raw = arr.astype(dtype).tobytes()
            arrays.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape),
                           "offset": len(payload), "nbytes": len(raw)})
            payload += raw
        entries.append({"kind": stage.kind, "arrays": arrays})
    header = json.dumps({"version": VERSION, "stages": entries, "config": config,
                         "config_hash": config_hash(config)}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        fh.write(bytes(payload))
    return path


def load_stages(path):
    """Return ``(stages, header)``."""
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ConfigError(f"{path}: not a stage container")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported container version {version}")
    header = json.loads(blob[20:20 + hlen])
    base = 20 + hlen
    stages = []
    for entry in header["stages"]:
        arrays = {}
        for a in entry["arrays"]:
            start = base + a["offset"]
            arrays[a["name"]] = np.frombuffer(blob[start:start + a["nbytes"]],
                                              dtype=np.dtype(a["dtype"])).reshape(a["shape"]).copy()
        kind = entry["kind"]
        if kind not in STAGE_KINDS:
            raise ConfigError(f"{path}: unknown stage kind {kind!r}")
        if kind == "linear":
            stages.append(LinearStage(arrays["weight"], arrays["bias"]))
        elif kind == "wiener":
            stages.append(WienerStage(floor=float(np.ravel(arrays.get("floor", 0.05))[0])))
        else:
            stages.append(STAGE_KINDS[kind]())
    return stages, header
