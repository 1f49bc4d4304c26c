"""16-bit grayscale PNG in and out."""

from __future__ import annotations

import numpy as np
from PIL import Image


def write_png16(path, image: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> None:
    """Map ``[lo, hi]`` linearly onto 0..65535 (clamped) and save."""
    a = (np.asarray(image, dtype=np.float64) - lo) / (hi - lo)
    a = np.round(np.clip(np.nan_to_num(a), 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(a).save(path, format="PNG")


def read_png16(path) -> np.ndarray:
    """Raw pixel values as ``uint16``; rejects colour images."""
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L", "I", "L"):
            raise ValueError(f"{path}: expected single-channel grayscale, got mode {im.mode}")
        a = np.array(im)
    if a.dtype == np.uint8:
        return a.astype(np.uint16) * 257
    return a.astype(np.uint16)


def tile(images, cols: int, pad: int = 2, fill: float = 1.0) -> np.ndarray:
    """Row-major grid of equally sized 2-D images separated by ``pad`` pixels."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    h, w = images[0].shape
    rows = -(-len(images) // cols)
    out = np.full((rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad), fill)
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        out[r * (h + pad) : r * (h + pad) + h, c * (w + pad) : c * (w + pad) + w] = im
    return out
