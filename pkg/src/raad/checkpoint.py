"""Binary checkpoint serialization.

Layout (all integers little-endian):

    magic   8 bytes  b"RAADCKPT"
    version u32      currently 1
    count   u32      number of named tensors
    entry*  count times:
        name_len u32, name UTF-8 bytes
        rank     u32
        dims     rank x u64
        payload  prod(dims) x f64 (little-endian, C order)

Tensors round-trip bit-exactly.  Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import ContractError

MAGIC = b"RAADCKPT"
VERSION = 1


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack("<%dQ" % arr.ndim, *arr.shape))
        parts.append(arr.astype("<f8", copy=False).tobytes(order="C"))
    blob = b"".join(parts)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise ContractError(f"{path}: file too short for a checkpoint header")
    if blob[:8] != MAGIC:
        raise ContractError(f"{path}: bad checkpoint magic {blob[:8]!r}")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")

    def take(n: int, off: int, what: str) -> int:
        if off + n > len(blob):
            raise ContractError(
                f"{path}: truncated at byte {off} reading {what} "
                f"({off + n - len(blob)} bytes missing)")
        return off + n

    off = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        end = take(4, off, "name length")
        (name_len,) = struct.unpack_from("<I", blob, off)
        off = take(name_len, end, "name")
        name = blob[end:off].decode("utf-8")
        end = take(4, off, "rank")
        (rank,) = struct.unpack_from("<I", blob, off)
        off = take(8 * rank, end, "dims")
        dims = struct.unpack_from("<%dQ" % rank, blob, end)
        n = int(np.prod(dims)) if rank else 1
        end = take(8 * n, off, f"payload of {name!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off = end
        out[name] = arr.astype(np.float64)  # owned, writable copy
    if off != len(blob):
        raise ContractError(f"{path}: {len(blob) - off} trailing bytes after last tensor")
    return out
