"""PNG I/O and resampling helpers shared by the data and metric paths."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def load_image_u8(path: str | Path) -> np.ndarray:
    """Read an image file as (H, W, 3) uint8 RGB."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image_u8(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8, got {image.shape} {image.dtype}")
    Image.fromarray(image, mode="RGB").save(path)


def load_mask_u8(path: str | Path) -> np.ndarray:
    """Read a single-channel class-id mask as (H, W) uint8."""
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise ValueError(
                f"{path}: mask files must be single-channel, got mode {im.mode}"
            )
        arr = np.asarray(im.convert("I"), dtype=np.int64)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError(f"{path}: mask values outside [0, 255]")
    return arr.astype(np.uint8)


def save_mask_u8(path: str | Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected (H, W) mask, got shape {mask.shape}")
    if mask.min() < 0 or mask.max() > 255:
        raise ValueError("mask class ids must fit in 8 bits")
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


def image_u8_to_signed(image: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float64 [-1, 1] (0 -> -1, 255 -> +1)."""
    return np.asarray(image, dtype=np.float64) / 255.0 * 2.0 - 1.0


def signed_to_image_u8(field: np.ndarray) -> np.ndarray:
    """float [-1, 1] -> uint8 [0, 255], rounding to nearest."""
    scaled = (np.asarray(field, dtype=np.float64) + 1.0) / 2.0 * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def image_u8_to_unit(image: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float64 [0, 1]."""
    return np.asarray(image, dtype=np.float64) / 255.0


def _source_coords(out_size: int, in_size: int) -> np.ndarray:
    # half-pixel-center convention (matches common image resamplers)
    scale = in_size / out_size
    return (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (H, W) or (H, W, C) float array."""
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    in_h, in_w = image.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        out = image.copy()
        return out[:, :, 0] if squeeze else out

    ys = np.clip(_source_coords(out_h, in_h), 0.0, in_h - 1.0)
    xs = np.clip(_source_coords(out_w, in_w), 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]

    top = image[y0][:, x0] * (1.0 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1.0 - wx) + image[y1][:, x1] * wx
    out = top * (1.0 - wy) + bottom * wy
    return out[:, :, 0] if squeeze else out


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize; preserves label values exactly."""
    mask = np.asarray(mask)
    in_h, in_w = mask.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return mask.copy()
    ys = np.clip(np.rint(_source_coords(out_h, in_h)), 0, in_h - 1).astype(np.int64)
    xs = np.clip(np.rint(_source_coords(out_w, in_w)), 0, in_w - 1).astype(np.int64)
    return mask[ys][:, xs]
