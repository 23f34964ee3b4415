"""Binary PPM (P6) and PGM (P5) reading and writing.

The reader is strict about substance (maxval 255, complete payload) but
accepts standard header whitespace and '#' comments.  Parse failures name
the byte offset.  Writes are atomic.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .errors import ImageParseError, ParameterError

_WS = (0x20, 0x09, 0x0A, 0x0D, 0x0B, 0x0C)


def _token(blob: bytes, off: int) -> tuple[bytes, int]:
    n = len(blob)
    while off < n:
        c = blob[off]
        if c in _WS:
            off += 1
        elif c == 0x23:  # '#' comment runs to end of line
            while off < n and blob[off] not in (0x0A, 0x0D):
                off += 1
        else:
            break
    if off >= n:
        raise ImageParseError(f"unexpected end of header at byte {off}")
    start = off
    while off < n and blob[off] not in _WS and blob[off] != 0x23:
        off += 1
    return blob[start:off], off


def read_netpbm(path: str) -> np.ndarray:
    """Read P6 as [H,W,3] uint8 or P5 as [H,W] uint8."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, off = _token(blob, 0)
    if magic not in (b"P5", b"P6"):
        raise ImageParseError(f"{path}: unsupported magic {magic!r} at byte 0")
    fields = []
    for _ in range(3):
        tok, off = _token(blob, off)
        if not tok.isdigit():
            raise ImageParseError(f"{path}: non-numeric header field at byte {off - len(tok)}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise ImageParseError(f"{path}: maxval {maxval} unsupported (byte {off})")
    if off >= len(blob) or blob[off] not in _WS:
        raise ImageParseError(f"{path}: missing whitespace after maxval at byte {off}")
    off += 1  # exactly one whitespace byte separates header from payload
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    if len(blob) - off < need:
        raise ImageParseError(
            f"{path}: payload truncated at byte {len(blob)} (need {need} from byte {off})")
    if len(blob) - off > need:
        raise ImageParseError(f"{path}: {len(blob) - off - need} trailing bytes at byte {off + need}")
    data = np.frombuffer(blob, dtype=np.uint8, count=need, offset=off)
    if channels == 3:
        return data.reshape(height, width, 3).copy()
    return data.reshape(height, width).copy()


def _atomic_write(path: str, blob: bytes) -> None:
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


def write_ppm(path: str, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ParameterError(f"write_ppm expects [H,W,3] uint8, got {img.shape} {img.dtype}")
    header = b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0])
    _atomic_write(path, header + img.tobytes())


def write_pgm(path: str, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ParameterError(f"write_pgm expects [H,W] uint8, got {img.shape} {img.dtype}")
    header = b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0])
    _atomic_write(path, header + img.tobytes())


def to_unit_float(raw: np.ndarray) -> np.ndarray:
    """uint8 [H,W] or [H,W,3] -> float64 [3,H,W] in [0,1] (gray replicated)."""
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    return raw.astype(np.float64).transpose(2, 0, 1) / 255.0


def from_unit_float(image: np.ndarray) -> np.ndarray:
    """float [3,H,W] in [0,1] -> uint8 [H,W,3] by round-half-away scaling."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
