"""Minimal binary netpbm (P5/P6) reading and writing for uint8 data."""

import numpy as np


def write_pgm(path, gray):
    """Write a (H, W) uint8 array as a binary portable graymap."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError("PGM data must be 2-D")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm(path, rgb):
    """Write a (H, W, 3) uint8 array as a binary portable pixmap."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("PPM data must be (H, W, 3)")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def _read_header(fh, magic):
    if fh.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise ValueError("truncated netpbm header")
        line = line.split(b"#", 1)[0]
        fields.extend(int(tok) for tok in line.split())
    w, h, maxval = fields[:3]
    if maxval != 255:
        raise ValueError("only maxval 255 supported")
    return w, h


def read_pgm(path):
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P5")
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"truncated PGM payload in {path}")
    return data.reshape(h, w).copy()


def read_ppm(path):
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P6")
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"truncated PPM payload in {path}")
    return data.reshape(h, w, 3).copy()
