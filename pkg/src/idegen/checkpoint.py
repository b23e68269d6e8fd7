"""Binary named-tensor checkpoint files.

Layout (all integers little-endian)::

    b"IDECKPT1"  u32 version  u32 count
    count x { u16 name_len, name (UTF-8), u8 dtype, u8 rank, rank x u32 extent, payload }
    u32 crc32 of every byte between the version field and the checksum

dtype 0 is float32, dtype 1 is raw bytes (used for the JSON metadata
record ``__meta__``).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .errors import CheckpointVersionError, ContractError, CorruptCheckpointError

MAGIC = b"IDECKPT1"
VERSION = 1
META_KEY = "__meta__"
_F32, _U8 = 0, 1
_DTYPES = {_F32: np.dtype("<f4"), _U8: np.dtype("u1")}


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def with_prefix(self, prefix: str) -> dict:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _items(tensors) -> list:
    return list(tensors.items()) if isinstance(tensors, dict) else list(tensors)


def encode_checkpoint(tensors: Union[dict, Iterable], meta: dict | None = None) -> bytes:
    items = _items(tensors)
    if meta is not None:
        raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        items.append((META_KEY, np.frombuffer(raw, dtype=np.uint8)))
    seen = set()
    body = [struct.pack("<I", len(items))]
    for name, arr in items:
        if name in seen:
            raise ContractError(f"duplicate tensor name {name!r} in checkpoint")
        seen.add(name)
        arr = np.asarray(arr)
        code = _U8 if arr.dtype == np.uint8 else _F32
        arr = np.asarray(arr, dtype=_DTYPES[code], order="C")
        key = name.encode("utf-8")
        body.append(struct.pack("<H", len(key)) + key)
        body.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.append(arr.tobytes())
    region = b"".join(body)
    return MAGIC + struct.pack("<I", VERSION) + region + struct.pack("<I", zlib.crc32(region))


def save_checkpoint(path, tensors, meta: dict | None = None) -> None:
    data = encode_checkpoint(tensors, meta)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 20 or data[:8] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    region = data[12:-4]
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(region) != crc:
        raise CorruptCheckpointError("checksum mismatch: checkpoint is corrupt")
    try:
        return _parse(region, version)
    except (struct.error, ValueError, UnicodeDecodeError, KeyError) as exc:
        raise CorruptCheckpointError(f"malformed checkpoint table: {exc}") from exc


def _parse(region: bytes, version: int) -> Checkpoint:
    (count,) = struct.unpack_from("<I", region, 0)
    off = 4
    out = Checkpoint(version=version)
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", region, off)
        off += 2
        name = region[off:off + nlen].decode("utf-8")
        off += nlen
        code, rank = struct.unpack_from("<BB", region, off)
        off += 2
        shape = struct.unpack_from(f"<{rank}I", region, off)
        off += 4 * rank
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if off + nbytes > len(region):
            raise ValueError(f"tensor {name!r} runs past the end of the file")
        arr = np.frombuffer(region, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape)
        off += nbytes
        if name in out.tensors:
            raise ValueError(f"duplicate tensor name {name!r}")
        if name == META_KEY:
            out.meta = json.loads(arr.tobytes().decode("utf-8"))
        else:
            out.tensors[name] = arr.astype(np.float32)
    if off != len(region):
        raise ValueError("trailing bytes after tensor table")
    return out


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
