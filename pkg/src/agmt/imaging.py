"""Binary portable pixmap I/O (P5/P6) and bilinear resampling."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError


def _header_tokens(buf: bytes, path) -> tuple:
    tokens, pos = [], 0
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated pixmap header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError(f"{path}: missing whitespace after pixmap header")
    return tokens, pos + 1


def read_pixmap(path) -> np.ndarray:
    """Decode a binary P5 (gray) or P6 (RGB) file into ``[H, W, C]`` floats in [0, 1]."""
    path = Path(path)
    buf = path.read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"{path}: not a binary P5/P6 pixmap (magic {magic!r})")
    tokens, offset = _header_tokens(buf[2:], path)
    offset += 2
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ParseError(f"{path}: malformed pixmap header {tokens!r}") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ParseError(f"{path}: invalid pixmap dimensions or maxval ({width}x{height}, {maxval})")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raster = buf[offset:offset + count * dtype.itemsize]
    if len(raster) < count * dtype.itemsize:
        raise ParseError(f"{path}: raster truncated ({len(raster)} of {count * dtype.itemsize} bytes)")
    data = np.frombuffer(raster, dtype=dtype).astype(np.float64) / maxval
    return data.reshape(height, width, channels)


def write_pixmap(path, image: np.ndarray) -> None:
    """Encode ``[H, W]``/``[H, W, 1]`` as P5 and ``[H, W, 3]`` as P6, 8 bits per sample."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError(f"cannot write image of shape {image.shape} as a pixmap")
    h, w, c = image.shape
    magic = b"P5" if c == 1 else b"P6"
    raster = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + raster.tobytes())


def _axis_weights(n_in: int, n_out: int) -> tuple:
    t = np.arange(n_out, dtype=np.float64)
    src = np.clip((t + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centred (align-corners false) bilinear resampling of ``[H, W, ...]``."""
    image = np.asarray(image, dtype=np.float64)
    y0, y1, wy = _axis_weights(image.shape[0], height)
    x0, x1, wx = _axis_weights(image.shape[1], width)
    extra = (1,) * (image.ndim - 2)
    wy = wy.reshape((-1, 1) + extra)
    wx = wx.reshape((1, -1) + extra)
    rows = image[y0] * (1.0 - wy) + image[y1] * wy
    return rows[:, x0] * (1.0 - wx) + rows[:, x1] * wx
