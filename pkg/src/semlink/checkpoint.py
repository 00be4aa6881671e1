"""Binary checkpoint format.

Layout (little-endian)::

    b"SEMW" | version:u16 | record*
    record = name_len:u16 | name:utf-8 | rank:u8 | dims:u32*rank | payload:f32*prod(dims)

Records run to end of file. Payloads are always float32; float64 parameters
are narrowed on save.
"""
import struct

import numpy as np

MAGIC = b"SEMW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(named_arrays):
    """Serialize an iterable of ``(name, array)`` pairs (or a dict) to bytes."""
    if hasattr(named_arrays, "items"):
        named_arrays = named_arrays.items()
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for name, arr in named_arrays:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise CheckpointError("rank above 255")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf):
    """Parse checkpoint bytes into an ordered ``{name: float32 array}`` dict."""
    mv = memoryview(buf)
    if bytes(mv[:4]) != MAGIC:
        raise CheckpointError("bad magic")
    if len(mv) < 6:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<H", mv, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    pos = 6
    out = {}
    try:
        while pos < len(mv):
            (nlen,) = struct.unpack_from("<H", mv, pos)
            pos += 2
            name = bytes(mv[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", mv, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", mv, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(mv):
                raise CheckpointError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(mv[pos:pos + 4 * count], dtype="<f4").reshape(dims).copy()
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError("truncated record") from exc
    return out


def save(path, named_arrays):
    with open(path, "wb") as fh:
        fh.write(dumps(named_arrays))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
