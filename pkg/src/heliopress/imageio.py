"""PGM (P5) and SDT raw-tensor I/O plus atomic file writes."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

SDT_MAGIC = b"SDT1"


class ImageFormatError(ValueError):
    pass


def atomic_write(path: str | Path, blob: bytes) -> None:
    """Write to a sibling temp file then rename, so readers never see a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


# ---------------------------------------------------------------------------
# PGM

def _pgm_tokens(blob: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers after the magic, skipping comments."""
    pos, out = 2, []
    while len(out) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed PGM header")
        out.append(int(blob[start:pos]))
    return out, pos + 1  # one whitespace byte separates header and raster


def decode_pgm(blob: bytes) -> np.ndarray:
    """P5 PGM -> float64 image in [0, 1] (8-bit / 255, 16-bit big-endian / 65535)."""
    if blob[:2] != b"P5":
        raise ImageFormatError("not a binary PGM (P5)")
    (w, h, maxval), pos = _pgm_tokens(blob, 3)
    if not 0 < maxval < 65536 or w <= 0 or h <= 0:
        raise ImageFormatError("bad PGM geometry or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    raster = blob[pos:pos + need]
    if len(raster) != need:
        raise ImageFormatError("truncated PGM raster")
    img = np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.float64)
    return img / (65535.0 if maxval > 255 else 255.0)


def encode_pgm(image: np.ndarray, bits: int = 8) -> bytes:
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ImageFormatError(f"expected a 2-D image, got {image.shape}")
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(image, 0.0, 1.0) * maxval)
    raster = q.astype(np.uint8 if bits == 8 else ">u2").tobytes()
    h, w = image.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode() + raster


# ---------------------------------------------------------------------------
# SDT

def encode_sdt(array: np.ndarray) -> bytes:
    a = np.asarray(array, dtype="<f8")
    return SDT_MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def decode_sdt(blob: bytes) -> np.ndarray:
    if blob[:4] != SDT_MAGIC or len(blob) < 5:
        raise ImageFormatError("not an SDT tensor")
    rank = blob[4]
    end = 5 + 4 * rank
    if len(blob) < end:
        raise ImageFormatError("truncated SDT header")
    shape = struct.unpack(f"<{rank}I", blob[5:end])
    need = 8 * int(np.prod(shape, dtype=np.int64))
    if len(blob) - end != need:
        raise ImageFormatError(f"SDT payload is {len(blob) - end} bytes, expected {need}")
    return np.frombuffer(blob[end:], dtype="<f8").reshape(shape).astype(np.float64)


# ---------------------------------------------------------------------------
# by extension / magic

def read_image(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] == SDT_MAGIC:
        img = decode_sdt(blob)
        if img.ndim == 3 and img.shape[0] == 1:
            img = img[0]
        if img.ndim != 2:
            raise ImageFormatError(f"SDT image must be 2-D, got {img.shape}")
        return img
    return decode_pgm(blob)


def write_image(path: str | Path, image: np.ndarray, bits: int = 8) -> None:
    path = Path(path)
    blob = encode_sdt(image) if path.suffix.lower() == ".sdt" else encode_pgm(image, bits)
    atomic_write(path, blob)
