"""8-bit PNG and raw float32 image I/O.

Raw dump layout (little-endian)::

    magic   8 bytes  b"CTRAW01\\0"
    ndim    uint32
    shape   ndim x uint32
    data    float32, C order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

RAW_MAGIC = b"CTRAW01\0"


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so a PNG round trip is lossless."""
    return to_uint8(img).astype(np.float64) / 255.0


def save_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        a = np.asarray(im)
    if a.ndim == 3 and a.shape[2] == 4:
        a = a[..., :3]
    return a.astype(np.float64) / 255.0


def save_raw(path, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype="<f4")
    head = RAW_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    Path(path).write_bytes(head + a.tobytes())


def load_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(RAW_MAGIC):
        raise ValueError(f"{path}: not a raw float32 dump")
    (ndim,) = struct.unpack_from("<I", data, 8)
    shape = struct.unpack_from(f"<{ndim}I", data, 12)
    off = 12 + 4 * ndim
    n = int(np.prod(shape))
    if len(data) - off != 4 * n:
        raise ValueError(f"{path}: truncated raw dump")
    return np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).copy()
