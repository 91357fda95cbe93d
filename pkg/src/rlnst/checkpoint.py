"""Binary parameter container.

Layout: magic "RLNST1" (6 bytes), dtype code u8 (0 = float32), entry count
u32 LE, then per entry: name length u16 LE, UTF-8 name, rank u8, extents
u32 LE each, raw little-endian float32 values. Writing is canonical, so a
save/load/save round trip is byte-identical.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"RLNST1"
DTYPE_F32 = 0


class CheckpointError(Exception):
    """Base class for container problems."""


class BadMagicError(CheckpointError):
    """File does not start with the expected magic/dtype header."""


class TruncatedError(CheckpointError):
    """File ended before the declared entries were read."""


class ArchitectureMismatchError(CheckpointError):
    """Stored names/shapes disagree with the current model architecture."""


def save(arrays: "OrderedDict[str, np.ndarray]", path) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<B", DTYPE_F32)
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype=np.float32)
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", a.ndim)
        for ext in a.shape:
            blob += struct.pack("<I", ext)
        blob += a.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load(path) -> "OrderedDict[str, np.ndarray]":
    raw = Path(path).read_bytes()
    if len(raw) < 11:
        raise TruncatedError(f"{path}: file shorter than header")
    if raw[:6] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:6]!r}")
    dtype_code = raw[6]
    if dtype_code != DTYPE_F32:
        raise BadMagicError(f"{path}: unsupported dtype code {dtype_code}")
    (count,) = struct.unpack_from("<I", raw, 7)
    pos = 11
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + name_len].decode("utf-8")
            if len(raw) < pos + name_len:
                raise TruncatedError(f"{path}: truncated inside entry name")
            pos += name_len
            rank = raw[pos]
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", raw, pos) if rank else ()
            pos += 4 * rank
            n_vals = int(np.prod(shape)) if shape else 1
            end = pos + 4 * n_vals
            if end > len(raw):
                raise TruncatedError(f"{path}: truncated inside values of {name!r}")
            out[name] = np.frombuffer(raw[pos:end], dtype="<f4").reshape(shape).copy()
            pos = end
        except struct.error:
            raise TruncatedError(f"{path}: truncated entry header") from None
    if pos != len(raw):
        raise TruncatedError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def bind(registry, arrays: "OrderedDict[str, np.ndarray]",
         only_prefix: str | None = None) -> None:
    """Copy stored arrays onto existing registry tensors, strictly by name."""
    expected = [n for n in registry.names()
                if only_prefix is None or n.startswith(only_prefix)]
    provided = set(arrays)
    for name in expected:
        if name not in arrays:
            raise ArchitectureMismatchError(f"checkpoint is missing parameter {name!r}")
        tensor = registry[name]
        stored = arrays[name]
        if tuple(stored.shape) != tuple(tensor.shape):
            raise ArchitectureMismatchError(
                f"shape of {name!r} is {stored.shape}, architecture expects {tensor.shape}")
        tensor.data = stored.astype(tensor.data.dtype)
        provided.discard(name)
    if only_prefix is None and provided:
        extra = sorted(provided)[:5]
        raise ArchitectureMismatchError(f"checkpoint has unknown parameters {extra}")
