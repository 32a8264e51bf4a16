"""Reverse-process sampling of paired outputs, box extraction, and export.

Each batch item owns an independent random stream derived from the batch
seed (stream id = seed XOR item index), so the image and mask of item i
always come from the same trajectory and results do not depend on how items
are grouped into forward passes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cfl import ClassPalette, decode_mask, mask_to_rgb
from .denoiser import DenoiserNet, predict_noise
from .imageio import save_image_u8, save_mask_u8, signed_to_image_u8
from .schedule import NoiseSchedule, p_sample_step

# batch items per forward pass during sampling; fixed so runs are bit-stable
_CHUNK = 32

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class BoundingBox:
    """Tight, inclusive pixel box around one connected component."""

    class_id: int
    x_min: int
    y_min: int
    x_max: int
    y_max: int


@dataclass
class GenerationBatch:
    images: np.ndarray  # (N, 3, H, W) float64, clamped to [-1, 1]
    raw_masks: np.ndarray  # (N, 3, H, W) float64, unclamped palette field
    decoded_masks: np.ndarray  # (N, H, W) int64
    seed: int
    num_steps: int


def default_min_area(height: int, width: int) -> int:
    """Speckle threshold for box extraction: 8 px at 32x32, scaling with area."""
    return max(1, round(8 * (height * width) / (32 * 32)))


def sample_pairs(
    net: DenoiserNet,
    schedule: NoiseSchedule,
    palette: ClassPalette,
    count: int,
    size: int,
    seed: int,
) -> GenerationBatch:
    """Draw ``count`` paired samples of ``size`` x ``size`` from pure noise.

    Runs the full reverse chain from t=T to t=1, then splits channels 0-2
    (image, clamped to [-1, 1]) from channels 3-5 (raw mask field, left
    unclamped: cosine decoding only uses direction). Deterministic in seed.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    divisor = net.config.spatial_divisor
    if size % divisor:
        raise ValueError(f"size {size} must be divisible by {divisor}")

    rngs = [np.random.default_rng(seed ^ i) for i in range(count)]
    shape = (6, size, size)
    fields = np.empty((count, *shape), dtype=np.float64)

    for start in range(0, count, _CHUNK):
        stop = min(start + _CHUNK, count)
        chunk_rngs = rngs[start:stop]
        x = np.stack([r.standard_normal(shape) for r in chunk_rngs])
        for t in range(schedule.num_steps, 0, -1):
            eps_hat = predict_noise(net, x, t)
            if t > 1:
                z = np.stack([r.standard_normal(shape) for r in chunk_rngs])
            else:
                z = np.zeros_like(x)
            x = p_sample_step(x, t, eps_hat, schedule, z)
        fields[start:stop] = x

    images = np.clip(fields[:, :3], -1.0, 1.0)
    raw_masks = fields[:, 3:]
    decoded = np.stack(
        [decode_mask(m.transpose(1, 2, 0), palette) for m in raw_masks]
    )
    return GenerationBatch(
        images=images,
        raw_masks=raw_masks,
        decoded_masks=decoded,
        seed=seed,
        num_steps=schedule.num_steps,
    )


def masks_to_boxes(mask: np.ndarray, min_area: int | None = None) -> list[BoundingBox]:
    """Tight boxes of 4-connected components per class id > 0.

    Components smaller than ``min_area`` pixels are dropped. Ordered by
    class id, then (y_min, x_min).
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if min_area is None:
        min_area = default_min_area(*mask.shape)
    boxes: list[BoundingBox] = []
    if mask.size == 0:
        return boxes
    for class_id in range(1, int(mask.max()) + 1):
        labeled, n = ndimage.label(mask == class_id, structure=_FOUR_CONNECTED)
        if n == 0:
            continue
        areas = np.bincount(labeled.ravel())
        class_boxes = []
        for comp, slices in enumerate(ndimage.find_objects(labeled), start=1):
            if slices is None or areas[comp] < min_area:
                continue
            ys, xs = slices
            class_boxes.append(
                BoundingBox(
                    class_id=class_id,
                    x_min=int(xs.start),
                    y_min=int(ys.start),
                    x_max=int(xs.stop - 1),
                    y_max=int(ys.stop - 1),
                )
            )
        class_boxes.sort(key=lambda b: (b.y_min, b.x_min))
        boxes.extend(class_boxes)
    return boxes


def _grid_image(tiles: list[np.ndarray]) -> np.ndarray:
    cols = math.ceil(math.sqrt(len(tiles)))
    rows = math.ceil(len(tiles) / cols)
    th, tw = tiles[0].shape[:2]
    grid = np.zeros((rows * th, cols * tw, 3), dtype=np.uint8)
    for k, tile in enumerate(tiles):
        r, c = divmod(k, cols)
        grid[r * th : (r + 1) * th, c * tw : (c + 1) * tw] = tile
    return grid


def export_batch(
    batch: GenerationBatch,
    out_dir: str | Path,
    palette: ClassPalette,
    min_area: int | None = None,
) -> Path:
    """Write images/, masks/, masks_rgb/, boxes.json, and grid.png.

    Grid tiles are [image | colored mask] side by side, one tile per sample
    in row-major order. Returns the output directory.
    """
    out_dir = Path(out_dir)
    for sub in ("images", "masks", "masks_rgb"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    box_records = []
    tiles = []
    for i in range(len(batch.images)):
        name = f"{i:04d}"
        image_u8 = signed_to_image_u8(batch.images[i].transpose(1, 2, 0))
        mask = batch.decoded_masks[i]
        mask_rgb = mask_to_rgb(mask, palette)
        try:
            save_image_u8(out_dir / "images" / f"{name}.png", image_u8)
            save_mask_u8(out_dir / "masks" / f"{name}.png", mask)
            save_image_u8(out_dir / "masks_rgb" / f"{name}.png", mask_rgb)
        except OSError as exc:
            raise OSError(f"failed writing sample {name} under {out_dir}: {exc}") from exc
        for box in masks_to_boxes(mask, min_area=min_area):
            box_records.append(
                {
                    "image": name,
                    "class": box.class_id,
                    "bbox": [box.x_min, box.y_min, box.x_max, box.y_max],
                }
            )
        tiles.append(np.concatenate([image_u8, mask_rgb], axis=1))

    (out_dir / "boxes.json").write_text(json.dumps(box_records, indent=2) + "\n")
    save_image_u8(out_dir / "grid.png", _grid_image(tiles))
    return out_dir
