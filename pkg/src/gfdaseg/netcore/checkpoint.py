"""Binary checkpoint container.

Layout (little-endian)::

    b"GFDACKPT"  u32 version  u32 meta_len  meta (UTF-8 JSON)
    u32 n_arrays
    n_arrays x [ u16 name_len, name, u8 dtype(=1, f64), u8 ndim, ndim x u32 dims, f64 payload ]
    u32 crc32 of every preceding byte

The whole file is parsed and verified before anything is returned, so a
damaged file never yields partial state.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"GFDACKPT"
VERSION = 1
_F64 = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", _F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointError("checkpoint truncated in header")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint payload corrupted or truncated (checksum mismatch)")

    pos = len(MAGIC) + 4
    try:
        (meta_len,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            dtype, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            if dtype != _F64:
                raise CheckpointError(f"array {name!r}: unsupported dtype code {dtype}")
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(body):
                raise CheckpointError(f"array {name!r} truncated at byte {pos}")
            arrays[name] = np.frombuffer(body, dtype="<f8", count=nbytes // 8,
                                         offset=pos).reshape(shape).astype(np.float64)
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint near byte {pos}: {exc}") from None
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after last array")
    return arrays, meta


def save(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
