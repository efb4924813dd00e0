"""Minimal binary PPM (P6) / PGM (P5) reading and writing.

Only maxval 255 is supported.  Writers emit a fixed header layout so the
same image always produces the same bytes.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, GarmentGenError


class PpmFormatError(GarmentGenError):
    """Malformed PPM/PGM payload."""


def _header(magic: bytes, w: int, h: int) -> bytes:
    return b"%s\n%d %d\n255\n" % (magic, w, h)


def write_ppm(path, img: np.ndarray) -> None:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"PPM wants uint8 [H,W,3], got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(_header(b"P6", w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    if img.dtype != np.uint8 or img.ndim != 2:
        raise DimensionError(f"PGM wants uint8 [H,W], got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(_header(b"P5", w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def _read_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read whitespace-separated header tokens, honouring '#' comments.
    Returns the tokens and the offset just past the final separator."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise PpmFormatError("truncated header")
        ch = data[i:i + 1]
        if ch == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    if i >= len(data) or not data[i:i + 1].isspace():
        raise PpmFormatError("missing separator after maxval")
    return tokens, i + 1


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _read_tokens(data, 4)
    if tokens[0] != magic:
        raise PpmFormatError(f"bad magic {tokens[0]!r}, expected {magic!r}")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise PpmFormatError(f"non-numeric header fields {tokens[1:]}")
    if maxval != 255:
        raise PpmFormatError(f"unsupported maxval {maxval}")
    need = w * h * channels
    payload = data[offset:offset + need]
    if len(payload) != need:
        raise PpmFormatError(f"payload has {len(payload)} bytes, expected {need}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def read_ppm(path) -> np.ndarray:
    return _read(path, b"P6", 3).copy()


def read_pgm(path) -> np.ndarray:
    return _read(path, b"P5", 1).copy()
