"""Paired image/mask dataset ingestion, splitting, and the toy-shapes generator.

Directory layout: ``root/images/<id>.png`` (RGB) and ``root/masks/<id>.png``
(single-channel class ids), with an optional ``manifest.json`` recording
``{num_classes, resolution, splits}``. Images travel through the pipeline
scaled to [-1, 1]; masks stay integer class ids.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import (
    image_u8_to_signed,
    load_image_u8,
    load_mask_u8,
    resize_bilinear,
    save_image_u8,
    save_mask_u8,
)


class ValidationError(ValueError):
    """Raised with an itemized list of dataset problems."""


@dataclass
class PairedSample:
    id: str
    image: np.ndarray  # (H, W, 3) float64 in [-1, 1]
    mask: np.ndarray  # (H, W) int64, labels in [0, num_classes)


@dataclass
class DatasetManifest:
    root: Path
    num_classes: int
    resolution: tuple[int, int]  # (height, width)
    ids: list[str]
    splits: dict[str, list[str]]
    class_pixel_counts: np.ndarray | None = field(default=None, repr=False)


def save_manifest(manifest: DatasetManifest) -> Path:
    path = Path(manifest.root) / "manifest.json"
    doc = {
        "num_classes": manifest.num_classes,
        "resolution": list(manifest.resolution),
        "splits": manifest.splits,
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def ingest(root: str | Path, num_classes: int) -> DatasetManifest:
    """Scan and validate a paired dataset, collecting every problem found.

    Returns a manifest with per-class pixel counts attached; raises
    :class:`ValidationError` listing orphaned files, size mismatches, and
    out-of-range labels by name.
    """
    root = Path(root)
    images_dir = root / "images"
    masks_dir = root / "masks"
    problems: list[str] = []
    if not images_dir.is_dir():
        problems.append(f"missing directory: {images_dir}")
    if not masks_dir.is_dir():
        problems.append(f"missing directory: {masks_dir}")
    if problems:
        raise ValidationError("\n".join(problems))

    image_ids = {p.stem for p in images_dir.glob("*.png")}
    mask_ids = {p.stem for p in masks_dir.glob("*.png")}
    for orphan in sorted(image_ids - mask_ids):
        problems.append(f"image without mask: images/{orphan}.png")
    for orphan in sorted(mask_ids - image_ids):
        problems.append(f"mask without image: masks/{orphan}.png")

    ids = sorted(image_ids & mask_ids)
    if not ids and not problems:
        problems.append(f"no paired samples under {root}")

    resolution: tuple[int, int] | None = None
    counts = np.zeros(num_classes, dtype=np.int64)
    for sample_id in ids:
        image = load_image_u8(images_dir / f"{sample_id}.png")
        mask = load_mask_u8(masks_dir / f"{sample_id}.png")
        if image.shape[:2] != mask.shape:
            problems.append(
                f"{sample_id}: image {image.shape[1]}x{image.shape[0]} does not "
                f"match mask {mask.shape[1]}x{mask.shape[0]}"
            )
            continue
        if mask.max(initial=0) >= num_classes:
            problems.append(
                f"masks/{sample_id}.png: label {int(mask.max())} outside "
                f"[0, {num_classes})"
            )
            continue
        if resolution is None:
            resolution = mask.shape
        elif mask.shape != resolution:
            problems.append(
                f"{sample_id}: resolution {mask.shape} differs from first "
                f"pair's {resolution}"
            )
            continue
        counts += np.bincount(mask.ravel(), minlength=num_classes)

    if problems:
        raise ValidationError("\n".join(problems))

    splits = {"train": list(ids), "val": [], "test": []}
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        doc = json.loads(manifest_path.read_text())
        if int(doc["num_classes"]) != num_classes:
            raise ValidationError(
                f"manifest.json declares {doc['num_classes']} classes, "
                f"ingest was asked for {num_classes}"
            )
        declared = doc.get("splits", splits)
        known = {i for part in declared.values() for i in part}
        if known != set(ids):
            raise ValidationError(
                "manifest.json splits do not cover exactly the ids on disk"
            )
        splits = {k: list(v) for k, v in declared.items()}

    assert resolution is not None
    return DatasetManifest(
        root=root,
        num_classes=num_classes,
        resolution=resolution,
        ids=ids,
        splits=splits,
        class_pixel_counts=counts,
    )


def split(
    manifest: DatasetManifest, fractions: tuple[float, float, float], seed: int
) -> DatasetManifest:
    """Seeded shuffle-then-partition into train/val/test."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    if any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be non-negative, got {fractions}")
    rng = np.random.default_rng(seed)
    order = [manifest.ids[i] for i in rng.permutation(len(manifest.ids))]
    n = len(order)
    c1 = int(round(fractions[0] * n))
    c2 = int(round((fractions[0] + fractions[1]) * n))
    splits = {"train": order[:c1], "val": order[c1:c2], "test": order[c2:]}
    return DatasetManifest(
        root=manifest.root,
        num_classes=manifest.num_classes,
        resolution=manifest.resolution,
        ids=list(manifest.ids),
        splits=splits,
        class_pixel_counts=manifest.class_pixel_counts,
    )


def load_samples(manifest: DatasetManifest, split_name: str | None = None) -> list[PairedSample]:
    """Load samples for one split (or every id when split_name is None)."""
    if split_name is None:
        ids = manifest.ids
    else:
        try:
            ids = manifest.splits[split_name]
        except KeyError:
            raise ValueError(f"unknown split {split_name!r}") from None
    samples = []
    for sample_id in ids:
        image = load_image_u8(Path(manifest.root) / "images" / f"{sample_id}.png")
        mask = load_mask_u8(Path(manifest.root) / "masks" / f"{sample_id}.png")
        samples.append(
            PairedSample(
                id=sample_id,
                image=image_u8_to_signed(image),
                mask=mask.astype(np.int64),
            )
        )
    return samples


# --- toy-shapes dataset -----------------------------------------------------

@dataclass(frozen=True)
class Shape:
    """A filled shape; params are pixel coordinates (x = column, y = row).

    circle: (cx, cy, r); rectangle: (x0, y0, x1, y1) inclusive;
    triangle: (x0, y0, x1, y1, x2, y2).
    """

    kind: str
    class_id: int
    params: tuple[float, ...]


_KINDS = ("circle", "rectangle", "triangle")


def class_color(class_id: int, num_classes: int) -> np.ndarray:
    """Fixed RGB color in [0, 1] for a toy shape class (class_id >= 1)."""
    hue = 0.9 * (class_id - 1) / max(num_classes - 1, 1)
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.9))


def sample_scene(rng: np.random.Generator, size: int, num_classes: int,
                 forced_class: int | None = None) -> list[Shape]:
    """Draw 1-3 shapes; the first takes forced_class when given."""
    num_shapes = int(rng.integers(1, 4))
    shapes = []
    for k in range(num_shapes):
        if k == 0 and forced_class is not None:
            class_id = forced_class
        else:
            class_id = int(rng.integers(1, num_classes))
        kind = _KINDS[(class_id - 1) % 3]
        if kind == "circle":
            r = rng.uniform(0.12, 0.22) * size
            cx = rng.uniform(r, size - 1 - r)
            cy = rng.uniform(r, size - 1 - r)
            params = (cx, cy, r)
        elif kind == "rectangle":
            w = rng.uniform(0.2, 0.45) * size
            h = rng.uniform(0.2, 0.45) * size
            x0 = rng.uniform(0, size - 1 - w)
            y0 = rng.uniform(0, size - 1 - h)
            params = (x0, y0, x0 + w, y0 + h)
        else:
            while True:
                side = rng.uniform(0.35, 0.6) * size
                ox = rng.uniform(0, size - 1 - side)
                oy = rng.uniform(0, size - 1 - side)
                xs = ox + rng.uniform(0, side, size=3)
                ys = oy + rng.uniform(0, side, size=3)
                area = 0.5 * abs(
                    (xs[1] - xs[0]) * (ys[2] - ys[0])
                    - (xs[2] - xs[0]) * (ys[1] - ys[0])
                )
                # skinny triangles make undersized, hard-to-learn regions
                if area >= 0.15 * side * side:
                    break
            params = (xs[0], ys[0], xs[1], ys[1], xs[2], ys[2])
        shapes.append(Shape(kind=kind, class_id=class_id, params=params))
    return shapes


def shape_contains(shape: Shape, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Membership test at pixel coordinates; boundary-inclusive."""
    p = shape.params
    if shape.kind == "circle":
        cx, cy, r = p
        return (x - cx) ** 2 + (y - cy) ** 2 <= r * r
    if shape.kind == "rectangle":
        x0, y0, x1, y1 = p
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
    x0, y0, x1, y1, x2, y2 = p
    d0 = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
    d1 = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
    d2 = (x0 - x2) * (y - y2) - (y0 - y2) * (x - x2)
    neg = (d0 <= 0) & (d1 <= 0) & (d2 <= 0)
    pos = (d0 >= 0) & (d1 >= 0) & (d2 >= 0)
    return neg | pos


def rasterize_scene(shapes: list[Shape], size: int) -> np.ndarray:
    """Paint shapes in order (later shapes overdraw earlier ones)."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=np.int64)
    for shape in shapes:
        mask[shape_contains(shape, x, y)] = shape.class_id
    return mask


def _value_noise(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    coarse_n = max(2, size // 8)
    coarse = rng.uniform(-1.0, 1.0, size=(coarse_n, coarse_n, channels))
    return resize_bilinear(coarse, size, size)


def render_scene(
    rng: np.random.Generator, shapes: list[Shape], mask: np.ndarray,
    size: int, num_classes: int,
) -> np.ndarray:
    """Image in [0, 1]: textured background plus solid, lightly shaded shapes."""
    image = 0.42 + 0.16 * _value_noise(rng, size, 3)
    for shape in shapes:
        color = class_color(shape.class_id, num_classes)
        brightness = rng.uniform(0.85, 1.05)
        region = mask == shape.class_id
        image[region] = color[None, :] * brightness
    image += rng.uniform(-0.03, 0.03, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def make_toy_dataset(
    out_dir: str | Path, count: int, size: int, num_classes: int, seed: int
) -> DatasetManifest:
    """Generate ``count`` exact image/mask pairs of colored shapes.

    Shape classes cycle so every class appears across the set; the mask is
    the rasterized scene itself, so the pairing is ground truth. Deterministic
    under (count, size, num_classes, seed).
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    children = np.random.SeedSequence(seed).spawn(count)
    width = max(4, len(str(count - 1)))
    ids = []
    counts = np.zeros(num_classes, dtype=np.int64)
    for j in range(count):
        rng = np.random.default_rng(children[j])
        forced = 1 + j % (num_classes - 1)
        shapes = sample_scene(rng, size, num_classes, forced_class=forced)
        mask = rasterize_scene(shapes, size)
        image = render_scene(rng, shapes, mask, size, num_classes)
        sample_id = f"{j:0{width}d}"
        save_image_u8(
            out_dir / "images" / f"{sample_id}.png",
            np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8),
        )
        save_mask_u8(out_dir / "masks" / f"{sample_id}.png", mask)
        counts += np.bincount(mask.ravel(), minlength=num_classes)
        ids.append(sample_id)

    manifest = DatasetManifest(
        root=out_dir,
        num_classes=num_classes,
        resolution=(size, size),
        ids=ids,
        splits={"train": list(ids), "val": [], "test": []},
        class_pixel_counts=counts,
    )
    save_manifest(manifest)
    return manifest


def class_frequencies(manifest: DatasetManifest) -> np.ndarray:
    """Per-class pixel fractions over the whole set."""
    if manifest.class_pixel_counts is None:
        raise ValueError("manifest has no pixel counts; re-run ingest")
    counts = manifest.class_pixel_counts.astype(np.float64)
    return counts / counts.sum()
