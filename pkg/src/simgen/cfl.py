"""Class-label codec on the RGB unit sphere.

Every segmentation class owns a fixed 3-vector "color". The lattice
placement walks down the sphere in equal-area bands while rotating by the
golden angle, which keeps the points close to uniformly spread for any
class count. Masks encode to 3-channel real fields by palette lookup and
decode back by cosine similarity, so a decoded pixel survives any additive
perturbation smaller (in norm) than the sine of half the minimum pairwise
angle of the palette.

A seeded random-color palette is provided as the ablation baseline for the
lattice placement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0

# Minimum Euclidean separation enforced between random-palette colors.
_NOCFL_MIN_DISTANCE = 0.05


@dataclass(frozen=True)
class ClassPalette:
    """Per-class 3-vectors; row index is the class id.

    Palettes from :func:`build_palette` have unit-norm rows; the random
    palettes from :func:`build_nocfl_palette` do not (cosine decoding does
    not require it).
    """

    num_classes: int
    points: np.ndarray  # (num_classes, 3) float64

    def __post_init__(self) -> None:
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.shape != (self.num_classes, 3):
            raise ValueError(
                f"points must have shape ({self.num_classes}, 3), got {pts.shape}"
            )
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)


def cfl_point(num_classes: int, i: int) -> np.ndarray:
    """Lattice point for class ``i`` of ``num_classes``, a unit 3-vector.

    theta = 2*pi*i / golden_ratio (azimuth), phi = arccos(1 - 2(i+0.5)/NC)
    (polar), returned as (cos(theta)sin(phi), sin(theta)sin(phi), cos(phi)).
    """
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    if not 0 <= i < num_classes:
        raise ValueError(f"class index {i} out of range [0, {num_classes})")
    theta = 2.0 * np.pi * i / GOLDEN_RATIO
    phi = np.arccos(1.0 - 2.0 * (i + 0.5) / num_classes)
    return np.array(
        [np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)]
    )


def build_palette(num_classes: int) -> ClassPalette:
    """Lattice palette for ``num_classes`` classes (deterministic in NC)."""
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    i = np.arange(num_classes, dtype=np.float64)
    theta = 2.0 * np.pi * i / GOLDEN_RATIO
    phi = np.arccos(1.0 - 2.0 * (i + 0.5) / num_classes)
    points = np.stack(
        [np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)],
        axis=1,
    )
    return ClassPalette(num_classes=num_classes, points=points)


def build_nocfl_palette(num_classes: int) -> ClassPalette:
    """Seeded random color palette (the no-lattice ablation baseline).

    Colors are uniform draws on [-1, 1]^3 from a generator seeded with
    ``num_classes``, rejecting any draw within Euclidean distance 0.05 of an
    already accepted color, so the palette is reproducible and free of
    accidental collisions.
    """
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    rng = np.random.default_rng(num_classes)
    points: list[np.ndarray] = []
    while len(points) < num_classes:
        cand = rng.uniform(-1.0, 1.0, size=3)
        if any(np.linalg.norm(cand - p) < _NOCFL_MIN_DISTANCE for p in points):
            continue
        points.append(cand)
    return ClassPalette(num_classes=num_classes, points=np.stack(points))


def encode_mask(mask: np.ndarray, palette: ClassPalette) -> np.ndarray:
    """Encode an integer class mask (H, W) as a (H, W, 3) palette field."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.issubdtype(mask.dtype, np.integer):
        raise ValueError(f"mask must be integer-typed, got dtype {mask.dtype}")
    if mask.size and (mask.min() < 0 or mask.max() >= palette.num_classes):
        bad = int(mask.min()) if mask.min() < 0 else int(mask.max())
        raise ValueError(
            f"mask label {bad} outside [0, {palette.num_classes})"
        )
    return palette.points[mask]


def decode_mask(encoded: np.ndarray, palette: ClassPalette) -> np.ndarray:
    """Assign each (H, W, 3) pixel the class with the highest cosine similarity.

    Ties resolve to the lowest class id; zero-norm pixels fall back to
    class 0. Total over all inputs: never raises on pixel content.
    """
    encoded = np.asarray(encoded, dtype=np.float64)
    if encoded.ndim != 3 or encoded.shape[2] != 3:
        raise ValueError(f"encoded mask must have shape (H, W, 3), got {encoded.shape}")
    flat = encoded.reshape(-1, 3)
    pixel_norms = np.linalg.norm(flat, axis=1)
    point_norms = np.linalg.norm(palette.points, axis=1)
    sims = flat @ palette.points.T
    # Scale-invariant per pixel, but each class must be normalized so that
    # non-unit palettes (the ablation baseline) decode correctly.
    sims /= np.maximum(point_norms, np.finfo(np.float64).tiny)[None, :]
    labels = np.argmax(sims, axis=1)  # argmax takes the first (lowest) id on ties
    labels[pixel_norms == 0.0] = 0
    return labels.reshape(encoded.shape[:2]).astype(np.int64)


def encode_mask_nocfl(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Encode with the seeded random palette instead of the lattice."""
    return encode_mask(mask, build_nocfl_palette(num_classes))


def min_pairwise_angle(palette: ClassPalette) -> float:
    """Smallest angle (radians) between any two palette directions."""
    if palette.num_classes < 2:
        raise ValueError("min_pairwise_angle needs at least 2 classes")
    pts = palette.points / np.linalg.norm(palette.points, axis=1, keepdims=True)
    cosine = np.clip(pts @ pts.T, -1.0, 1.0)
    np.fill_diagonal(cosine, -1.0)
    return float(np.arccos(cosine.max()))


def mask_to_rgb(mask: np.ndarray, palette: ClassPalette) -> np.ndarray:
    """8-bit visualization of a class mask: affine map of palette colors.

    Display-only; the model always works with the raw [-1, 1] palette values.
    """
    lut = np.rint((palette.points + 1.0) / 2.0 * 255.0)
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= palette.num_classes):
        raise ValueError("mask labels outside palette range")
    return lut[mask]


def save_palette(palette: ClassPalette, path: str | Path) -> None:
    """Write a palette as JSON with full double precision."""
    doc = {
        "num_classes": palette.num_classes,
        "points": [[float(v) for v in row] for row in palette.points],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_palette(path: str | Path) -> ClassPalette:
    doc = json.loads(Path(path).read_text())
    return ClassPalette(
        num_classes=int(doc["num_classes"]),
        points=np.asarray(doc["points"], dtype=np.float64),
    )
