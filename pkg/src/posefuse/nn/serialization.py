"""Versioned binary model container.

Layout (all integers little-endian)::

    b"PFM1"                     magic
    uint16 format version
    uint32 manifest length      followed by a UTF-8 JSON manifest
    float64 blobs               one per manifest entry, in manifest order
    uint32 CRC32                of every preceding byte

The manifest holds the model configuration (enough to rebuild the
architecture) and a list of ``{"name", "shape", "dtype"}`` parameter entries.
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

from ..errors import CorruptModelFile
from .model import PoseNetModel, model_from_config

MAGIC = b"PFM1"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)


def model_to_bytes(model: PoseNetModel) -> bytes:
    params = model.parameters(include_backbone=True)
    entries = [{"name": k, "shape": list(v.shape), "dtype": "<f8"} for k, v in params.items()]
    manifest = json.dumps({"config": model.config(), "parameters": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray()
    body += MAGIC
    body += struct.pack("<HI", FORMAT_VERSION, len(manifest))
    body += manifest
    for v in params.values():
        body += np.ascontiguousarray(v, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    return bytes(body)


def model_from_bytes(data: bytes) -> PoseNetModel:
    if len(data) < 14 or data[:4] != MAGIC:
        raise CorruptModelFile("bad magic bytes or truncated header")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptModelFile("CRC32 mismatch")
    version, mlen = struct.unpack("<HI", data[4:10])
    if version not in SUPPORTED_VERSIONS:
        raise CorruptModelFile(f"unsupported format version {version}")
    try:
        manifest = json.loads(data[10:10 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptModelFile(f"unreadable manifest: {exc}") from exc

    model = model_from_config(manifest["config"])
    offset = 10 + mlen
    for entry in manifest["parameters"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(data) - 4:
            raise CorruptModelFile(f"blob for {entry['name']} runs past end of file")
        arr = np.frombuffer(data[offset:end], dtype=entry["dtype"]).astype(float).reshape(shape)
        model.set_parameter(entry["name"], arr)
        offset = end
    if offset != len(data) - 4:
        raise CorruptModelFile("trailing bytes after parameter blobs")
    return model


def save_model(model: PoseNetModel, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(model_to_bytes(model))
    os.replace(tmp, path)


def load_model(path) -> PoseNetModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
