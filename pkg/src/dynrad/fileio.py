"""Binary map / image IO.

All maps share one container: a 16-byte little-endian header
(magic 'DRMP', dtype code u16, H u32, W u32, channels u16) followed by
row-major data. dtype codes: 1 = uint8, 2 = float64. Files ending in .png
go through Pillow instead, for viewing convenience.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAP_MAGIC = b"DRMP"
DTYPE_U8 = 1
DTYPE_F64 = 2
_CODES = {DTYPE_U8: np.uint8, DTYPE_F64: "<f8"}


def write_map(path, arr):
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"map must be HxW or HxWxC, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        code, out = DTYPE_U8, arr
    else:
        code, out = DTYPE_F64, arr.astype("<f8")
    H, W, C = out.shape
    with open(path, "wb") as fh:
        fh.write(MAP_MAGIC)
        fh.write(struct.pack("<HIIH", code, H, W, C))
        fh.write(np.ascontiguousarray(out).tobytes())


def read_map(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAP_MAGIC:
            raise ValueError(f"{path}: bad map magic")
        code, H, W, C = struct.unpack("<HIIH", fh.read(12))
        if code not in _CODES:
            raise ValueError(f"{path}: unknown dtype code {code}")
        data = np.frombuffer(fh.read(), dtype=_CODES[code])
    arr = data.reshape(H, W, C)
    return arr[:, :, 0] if C == 1 else arr


def write_image(path, rgb):
    """8-bit RGB image; .png via Pillow, anything else in the raw map format."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if str(path).endswith(".png"):
        from PIL import Image
        Image.fromarray(rgb, mode="RGB").save(path)
    else:
        write_map(path, rgb)


def read_image(path):
    """Returns float64 RGB in [0, 1]."""
    if str(path).endswith(".png"):
        from PIL import Image
        arr = np.asarray(Image.open(path).convert("RGB"))
    else:
        arr = read_map(path)
    return arr.astype(np.float64) / 255.0


def ensure_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
