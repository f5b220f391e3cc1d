"""Lossless raster I/O for images in [0, 1].

Color images round-trip through 8-bit PNG; single-channel maps may use
16-bit grayscale PNG.  Everything returns float64.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

__all__ = ["write_image", "read_image"]


def write_image(path, img: np.ndarray) -> None:
    """Write a float image.

    (H, W, 3) arrays quantize to 8-bit RGB; (H, W) arrays to 16-bit grayscale.
    Values are clipped to [0, 1] first.
    """
    img = np.asarray(img, dtype=np.float64)
    clipped = np.clip(np.nan_to_num(img), 0.0, 1.0)
    if img.ndim == 3 and img.shape[2] == 3:
        q = np.round(clipped * 255.0).astype(np.uint8)
        Image.fromarray(q, mode="RGB").save(path)
    elif img.ndim == 2:
        q = np.round(clipped * 65535.0).astype("<u2")
        h, w = q.shape
        Image.frombytes("I;16", (w, h), q.tobytes()).save(path)
    else:
        raise ValueError(f"write_image: expected (H,W,3) or (H,W), got {img.shape}")


def read_image(path) -> np.ndarray:
    """Read a PNG written by write_image back to float64 in [0, 1]."""
    with Image.open(path) as im:
        if im.mode == "I;16":
            return np.asarray(im, dtype=np.float64) / 65535.0
        if im.mode != "RGB":
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64) / 255.0
