"""Minimal binary PPM (P6, 8-bit) reader and writer.

Frames travel as float64 arrays of shape (3, H, W) in [0, 1]; files store
8-bit RGB. Reading maps bytes to value/255, writing quantizes with
round(255 * clamp(v, 0, 1)), so a save/load round trip moves any pixel by
at most 1/510.
"""

from __future__ import annotations

import numpy as np

_MAXVAL = 255


def _next_token(blob: bytes, off: int, path) -> tuple[bytes, int]:
    # Whitespace-delimited header token; '#' starts a comment through end of line.
    n = len(blob)
    while off < n:
        c = blob[off : off + 1]
        if c == b"#":
            while off < n and blob[off : off + 1] != b"\n":
                off += 1
        elif c.isspace():
            off += 1
        else:
            break
    if off >= n:
        raise ValueError(f"{path}: truncated PPM header")
    start = off
    while off < n and not blob[off : off + 1].isspace():
        off += 1
    return blob[start:off], off


def read_ppm(path) -> np.ndarray:
    """Read one P6 file into a (3, H, W) float64 array in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, off = _next_token(blob, 0, path)
    if magic != b"P6":
        raise ValueError(f"{path}: expected binary PPM magic 'P6', got {magic!r}")
    fields = []
    for _ in range(3):
        tok, off = _next_token(blob, off, path)
        if not tok.isdigit():
            raise ValueError(f"{path}: malformed PPM header token {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != _MAXVAL:
        raise ValueError(f"{path}: only 8-bit PPM supported (maxval 255), got {maxval}")
    if width < 1 or height < 1:
        raise ValueError(f"{path}: bad dimensions {width}x{height}")
    off += 1  # single whitespace byte after maxval
    need = width * height * 3
    raster = blob[off : off + need]
    if len(raster) != need:
        raise ValueError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / _MAXVAL


def write_ppm(frame: np.ndarray, path) -> None:
    """Write a (3, H, W) array in [0, 1] as a binary P6 file."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"write_ppm: expected (3, H, W) frame, got shape {arr.shape}")
    q = np.rint(_MAXVAL * np.clip(arr, 0.0, 1.0)).astype(np.uint8)
    h, w = arr.shape[1:]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n%d\n" % (w, h, _MAXVAL))
        fh.write(q.transpose(1, 2, 0).tobytes())
