"""Binary PPM (P6) and PGM (P5) codecs, 8-bit only, values mapped to [0,1]."""

from __future__ import annotations

import numpy as np

from .core import Tensor3


def _read_token(fh) -> bytes:
    tok = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise ValueError("unexpected end of file in PNM header")
        if ch in b" \t\r\n":
            if tok:
                return tok
            continue
        if ch == b"#":
            while ch and ch != b"\n":
                ch = fh.read(1)
            if tok:
                return tok
            continue
        tok += ch


def _read_header(fh, magic: bytes) -> tuple[int, int]:
    got = _read_token(fh)
    if got != magic:
        raise ValueError(f"expected {magic.decode()} file, got magic {got!r}")
    try:
        width = int(_read_token(fh))
        height = int(_read_token(fh))
        maxval = int(_read_token(fh))
    except ValueError as exc:
        raise ValueError(f"malformed PNM header: {exc}") from exc
    if width <= 0 or height <= 0:
        raise ValueError(f"bad PNM dimensions {width}x{height}")
    if maxval != 255:
        raise ValueError(f"only 8-bit PNM supported (maxval 255), got {maxval}")
    return width, height


def read_pgm(path) -> Tensor3:
    """Read a binary PGM into a 1 x H x W tensor with values in [0,1]."""
    with open(path, "rb") as fh:
        width, height = _read_header(fh, b"P5")
        payload = fh.read(width * height)
        if len(payload) != width * height:
            raise ValueError("truncated PGM payload")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return Tensor3(arr[None].astype(np.float64) / 255.0)


def read_ppm(path) -> Tensor3:
    """Read a binary PPM into a 3 x H x W tensor with values in [0,1]."""
    with open(path, "rb") as fh:
        width, height = _read_header(fh, b"P6")
        payload = fh.read(width * height * 3)
        if len(payload) != width * height * 3:
            raise ValueError("truncated PPM payload")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Tensor3(arr.transpose(2, 0, 1).astype(np.float64) / 255.0)


def _to_bytes(plane: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(t, path) -> None:
    """Write a 1 x H x W tensor (or 2D array) as binary PGM, scaled by 255."""
    if isinstance(t, Tensor3):
        if t.channels != 1:
            raise ValueError(f"PGM requires 1 channel, got {t.channels}")
        plane = t.data[0]
    else:
        plane = np.asarray(t, dtype=np.float64)
        if plane.ndim != 2:
            raise ValueError("PGM requires a 2D array")
    h, w = plane.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_to_bytes(plane).tobytes())


def write_ppm(t: Tensor3, path) -> None:
    """Write a 3 x H x W tensor as binary PPM, scaled by 255."""
    if t.channels != 3:
        raise ValueError(f"PPM requires 3 channels, got {t.channels}")
    h, w = t.height, t.width
    interleaved = _to_bytes(t.data).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(interleaved).tobytes())
