"""Small image helpers: luma conversion and 8-bit PNG round trips."""

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeError

LUMA = np.array([0.299, 0.587, 0.114])


def gray(img):
    """Luma of a ``[3, H, W]`` image (2-d inputs are returned as float64 unchanged)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected [3, H, W] or [H, W] image, got {img.shape}")
    return np.tensordot(LUMA, img, axes=(0, 0))


def to_uint8(img):
    """Scale ``[0, 1]`` values by 255 with round-half-up."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_png(path, img):
    """Write a ``[3, H, W]`` (RGB) or ``[H, W]`` (grayscale) image in ``[0, 1]``."""
    arr = to_uint8(img)
    if arr.ndim == 3:
        pil = Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0)), mode="RGB")
    else:
        pil = Image.fromarray(arr, mode="L")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pil.save(path, format="PNG", optimize=False)


def load_png(path):
    """Read a PNG as a float32 ``[3, H, W]`` array in ``[0, 1]`` (grayscale is replicated)."""
    with Image.open(path) as pil:
        arr = np.asarray(pil.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))
