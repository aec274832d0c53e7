"""Binary netpbm (P5/P6) reading and writing, 8- and 16-bit."""

from __future__ import annotations

import numpy as np

from .exceptions import LoadError


def write_pnm(path, pixels: np.ndarray, maxval: int = 255) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot store array of shape {pixels.shape} as PNM")
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval out of range: {maxval}")
    dtype = ">u1" if maxval < 256 else ">u2"
    body = np.ascontiguousarray(pixels, dtype=dtype)
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(body.tobytes())


def _tokens(buf: bytes, count: int):
    """Yield ``count`` header tokens and the offset of the raster."""
    out, i, n = [], 0, len(buf)
    while len(out) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not buf[j : j + 1].isspace() and buf[j : j + 1] != b"#":
            j += 1
        if j == i:
            raise LoadError("truncated PNM header")
        out.append(buf[i:j])
        i = j
    # exactly one whitespace byte separates the header from the raster
    return out, i + 1


def read_pnm(path) -> tuple[np.ndarray, int]:
    """Return ``(pixels, maxval)``; pixels are HxW (P5) or HxWx3 (P6) ints."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    try:
        (magic, w, h, maxval), off = _tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (LoadError, ValueError) as exc:
        raise LoadError(f"{path}: malformed PNM header") from exc
    if magic not in (b"P5", b"P6") or not 0 < maxval < 65536:
        raise LoadError(f"{path}: unsupported PNM variant {magic!r} maxval={maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = ">u1" if maxval < 256 else ">u2"
    count = w * h * channels
    need = count * np.dtype(dtype).itemsize
    if len(buf) - off < need:
        raise LoadError(f"{path}: raster truncated ({max(len(buf) - off, 0)} of {need} bytes)")
    raster = np.frombuffer(buf, dtype=dtype, count=count, offset=off).astype(np.int64)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return raster.reshape(shape), maxval
