"""Tiny image I/O helpers: binary PGM by hand, PNG through Pillow."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, values: np.ndarray) -> None:
    """Write a 2-D array in [0, 1] as an 8-bit binary PGM (value*255 rounded)."""
    arr = to_uint8(values)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM into floats in [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pixels = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError(f"{path}: truncated PGM")
    return pixels.reshape(h, w).astype(float) / 255.0


def write_png(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def read_image(path) -> np.ndarray:
    """Load PNG/PGM as float RGB (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=float) / 255.0
    return arr


def resize_nearest(image: np.ndarray, hw) -> np.ndarray:
    h, w = image.shape[:2]
    th, tw = hw
    if (h, w) == (th, tw):
        return image
    rows = np.minimum((np.arange(th) * h) // th, h - 1)
    cols = np.minimum((np.arange(tw) * w) // tw, w - 1)
    return image[rows][:, cols]
