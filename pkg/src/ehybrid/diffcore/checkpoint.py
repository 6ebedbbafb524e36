"""Binary parameter checkpoints.

Layout (little-endian)::

    b"EHYBCKPT" | u32 version | u32 entry count
    per entry: u16 name length | name (utf-8) | u8 dtype tag | u32 x4 shape | raw values

Shapes of rank < 4 are right-padded with ones; loading into a model
reshapes each entry back to the parameter's own shape.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .layers import ParamStore

MAGIC = b"EHYBCKPT"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


def _shape4(shape: tuple) -> tuple:
    if len(shape) > 4:
        raise FormatError(f"checkpoint entries are at most rank 4, got shape {shape}")
    return tuple(shape) + (1,) * (4 - len(shape))


def encode_checkpoint(store: ParamStore) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name, t in store.items():
        arr = np.asarray(t.data)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in DTYPE_TAGS:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B4I", DTYPE_TAGS[dtype], *_shape4(arr.shape)))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[:8] != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 16
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, *shape = struct.unpack_from("<B4I", blob, pos)
            pos += 17
            dtype = TAG_DTYPES[tag]
            nbytes = int(np.prod(shape)) * dtype.itemsize
            if pos + nbytes > len(blob):
                raise FormatError(f"checkpoint truncated in entry {name!r} at byte {pos}")
            out[name] = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise FormatError(f"corrupt checkpoint near byte {pos}: {exc}") from exc
    return out


def save_checkpoint(store: ParamStore, path) -> None:
    Path(path).write_bytes(encode_checkpoint(store))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    return decode_checkpoint(Path(path).read_bytes())


def restore(store: ParamStore, entries) -> None:
    """Copy decoded entries into ``store`` in place, checking names and sizes."""
    missing = set(store) - set(entries)
    extra = set(entries) - set(store)
    if missing or extra:
        raise FormatError(f"checkpoint does not match model: missing={sorted(missing)}, unexpected={sorted(extra)}")
    for name, t in store.items():
        value = entries[name]
        if value.size != t.size:
            raise FormatError(f"{name}: checkpoint has {value.size} values, model expects {t.size}")
        t.data = value.reshape(t.shape).astype(t.dtype)
