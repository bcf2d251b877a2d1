"""PNG and float-array image I/O shared by the renderer, pipeline, and CLI.

All writers go through temp + rename so failures never leave partial files.
"""

from __future__ import annotations

import io
import os

import numpy as np
from PIL import Image


def atomic_write_bytes(data: bytes, path) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def atomic_write_text(text: str, path) -> None:
    atomic_write_bytes(text.encode(), path)


def save_image_png(img: np.ndarray, path) -> None:
    """Write a float [0,1] RGB image as 8-bit PNG, value*255 rounded half-up."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    q = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(buf.getvalue(), path)


def load_image_rgb(path) -> np.ndarray:
    """Read an image as float64 RGB in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_depth_png(depth_m: np.ndarray, path) -> None:
    """Write depth in meters as 16-bit grayscale PNG in millimeters."""
    mm = np.clip(np.round(np.asarray(depth_m) * 1000.0), 0, 65535).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(mm).save(buf, format="PNG")
    atomic_write_bytes(buf.getvalue(), path)


def load_depth_png(path) -> np.ndarray:
    """Read a 16-bit millimeter depth PNG as float64 meters (0 = invalid)."""
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr / 1000.0


def save_float32(img: np.ndarray, path) -> None:
    buf = io.BytesIO()
    np.save(buf, np.asarray(img, dtype=np.float32))
    atomic_write_bytes(buf.getvalue(), path)
