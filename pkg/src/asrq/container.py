"""AQM1 single-file container: magic, u32 LE header length, JSON header, raw payloads.

Payloads are little-endian row-major and stored back to back in header
order. The header's ``tensors`` list records each payload's key, dtype,
shape, offset (relative to the end of the header) and byte length.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AQM1"

_LE = {
    "real32": "<f4",
    "real64": "<f8",
    "int8": "i1",
    "int16": "<i2",
    "int32": "<i4",
}


class LoadError(Exception):
    pass


class MagicError(LoadError):
    pass


class TruncatedError(LoadError):
    pass


class FormatError(LoadError):
    pass


def encode(header: dict, tensors: dict[str, tuple[str, np.ndarray]]) -> bytes:
    """``tensors`` maps key -> (dtype tag, array); payloads are laid out in key order."""
    entries, chunks, offset = [], [], 0
    for key, (tag, arr) in sorted(tensors.items()):
        if tag not in _LE:
            raise ValueError(f"unsupported payload dtype {tag!r}")
        raw = np.ascontiguousarray(arr, dtype=_LE[tag]).tobytes()
        entries.append(
            {"key": key, "dtype": tag, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise MagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise TruncatedError(f"header declares {hlen} bytes, only {len(blob) - 8} present")
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise FormatError("header lacks a tensor table")
    body = memoryview(blob)[8 + hlen :]
    tensors = {}
    for ent in header.pop("tensors"):
        try:
            key, tag, shape = ent["key"], ent["dtype"], tuple(ent["shape"])
            off, nbytes = int(ent["offset"]), int(ent["nbytes"])
            dt = np.dtype(_LE[tag])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed tensor entry {ent!r}") from exc
        if int(np.prod(shape, dtype=np.int64)) * dt.itemsize != nbytes:
            raise FormatError(f"tensor {key!r}: shape {shape} inconsistent with {nbytes} bytes")
        if off + nbytes > len(body):
            raise TruncatedError(f"payload for {key!r} ends at {off + nbytes}, file body has {len(body)} bytes")
        arr = np.frombuffer(body[off : off + nbytes], dtype=dt).reshape(shape)
        tensors[key] = arr.astype(dt.newbyteorder("="))
    return header, tensors


def write(path, header, tensors) -> None:
    Path(path).write_bytes(encode(header, tensors))


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
