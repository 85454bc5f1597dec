"""Binary PGM (P5) raster I/O, 8-bit only.

Masks are stored as PGM with values {0, 255}; any nonzero value reads back
as foreground.
"""

from __future__ import annotations

import os
import re

import numpy as np

_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


class PgmError(ValueError):
    pass


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    m = _HEADER.match(data)
    if m is None:
        raise PgmError(f"{path}: not a binary PGM (P5) file")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise PgmError(f"{path}: only 8-bit PGM is supported (maxval={maxval})")
    body = data[m.end():]
    if len(body) < width * height:
        raise PgmError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8, count=width * height).reshape(height, width).copy()


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise PgmError("PGM rasters must be 2-D")
    if image.dtype == bool:
        image = image.astype(np.uint8) * 255
    elif image.dtype != np.uint8:
        if image.min() < 0 or image.max() > 255:
            raise PgmError("pixel values outside 0..255")
        image = image.astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_mask(path: str | os.PathLike) -> np.ndarray:
    return read_pgm(path) > 0


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    write_pgm(path, np.asarray(mask, dtype=bool))
