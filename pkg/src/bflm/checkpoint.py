"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"BFLM"  u32 version=1  u64 metadata length  metadata (UTF-8 JSON)
    repeated: u32 name length, name (UTF-8), u32 rank, u64 dims..., float64 data
    u32 CRC32 of every preceding byte

Metadata is serialised with sorted keys, so equal checkpoints are equal
byte strings.
"""

import json
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

MAGIC = b"BFLM"
VERSION = 1


@dataclass
class Checkpoint:
    meta: dict
    tensors: OrderedDict = field(default_factory=OrderedDict)


def dumps(ckpt):
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(meta)), meta]
    for name, value in ckpt.tensors.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(value.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data):
    if len(data) < 4 + 12 + 4:
        raise CheckpointError("header", "file too short")
    if data[:4] != MAGIC:
        raise CheckpointError("header", "bad magic bytes")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum", "CRC32 mismatch (file truncated or corrupt)")
    version, meta_len = struct.unpack_from("<IQ", body, 4)
    if version != VERSION:
        raise CheckpointError("header", f"unsupported version {version}")
    pos = 16
    try:
        meta = json.loads(body[pos:pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("metadata", str(exc)) from exc
    pos += meta_len
    tensors = OrderedDict()
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(body):
                raise CheckpointError("tensor-table", f"tensor {name!r} overruns the file")
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos)
            tensors[name] = arr.astype(np.float64).reshape(dims)
            pos += 8 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError("tensor-table", str(exc)) from exc
    return Checkpoint(meta, tensors)


def save_checkpoint(path, ckpt):
    data = dumps(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return data


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CheckpointError("file", str(exc)) from exc
    return loads(data)
