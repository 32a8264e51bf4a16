"""Distribution distances for generated outputs: FID, KID, and their
per-semantic-region variants driven by segmentation masks.

The feature extractor is pluggable. The bundled default is a deterministic
random orthonormal projection of a 16x16 thumbnail, which is cheap enough
for desk-scale tests; externally computed features (e.g. from a pretrained
backbone) can be imported from ``.sgft`` files instead.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .imageio import image_u8_to_unit, load_image_u8, load_mask_u8, resize_bilinear

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")

FEATURE_MAGIC = b"SGFT"
FEATURE_VERSION = 1


class MetricError(RuntimeError):
    """Raised when a metric cannot be evaluated on the given inputs."""


class FeatureFormatError(ValueError):
    """Malformed .sgft feature file; message carries the byte offset."""


@dataclass(frozen=True)
class FeatureExtractor:
    """Deterministic map from an RGB field to a fixed-size feature vector."""

    name: str
    output_dim: int
    fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(image), dtype=np.float64)
        if out.shape != (self.output_dim,):
            raise ValueError(
                f"extractor {self.name} returned shape {out.shape}, "
                f"declared ({self.output_dim},)"
            )
        return out


_THUMB = 16  # thumbnail side used by the default extractor


def default_extractor(seed: int = 0, output_dim: int = 64) -> FeatureExtractor:
    """Random orthonormal projection of a 16x16 thumbnail, then tanh.

    Input is an (H, W, 3) array, either uint8 or float in [0, 1].
    """
    flat_dim = _THUMB * _THUMB * 3
    if not 8 <= output_dim <= flat_dim:
        raise ValueError(f"output_dim must be in [8, {flat_dim}], got {output_dim}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((flat_dim, output_dim)))
    projection = np.ascontiguousarray(q.T)  # rows orthonormal

    def fn(image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
        if image.dtype == np.uint8:
            image = image_u8_to_unit(image)
        thumb = resize_bilinear(image.astype(np.float64), _THUMB, _THUMB)
        return np.tanh(projection @ thumb.ravel())

    fn.projection = projection  # exposed for inspection
    return FeatureExtractor(
        name=f"random-projection-{output_dim}d-seed{seed}", output_dim=output_dim, fn=fn
    )


# --- Gaussian summaries and the Frechet distance -----------------------------

@dataclass(frozen=True)
class FeatureStats:
    """Sample count, mean vector, and (unbiased) covariance of a feature set."""

    n: int
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.mean)


def compute_stats(features: np.ndarray, regularization: float = 0.0) -> FeatureStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"features must be (n, dim), got shape {features.shape}")
    n = features.shape[0]
    if n < 2:
        raise ValueError(f"need >= 2 samples for an unbiased covariance, got {n}")
    mean = features.mean(axis=0)
    cov = np.atleast_2d(np.cov(features, rowvar=False))
    cov = (cov + cov.T) / 2.0
    if regularization:
        cov = cov + regularization * np.eye(cov.shape[0])
    return FeatureStats(n=n, mean=mean, cov=cov)


def merge_stats(a: FeatureStats, b: FeatureStats) -> FeatureStats:
    """Associative, order-independent combination of two summaries.

    Merge raw (unregularized) summaries; add any regularization afterwards.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    n = a.n + b.n
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.n / n)
    m2 = (
        a.cov * (a.n - 1)
        + b.cov * (b.n - 1)
        + np.outer(delta, delta) * (a.n * b.n / n)
    )
    return FeatureStats(n=n, mean=mean, cov=(m2 + m2.T) / (2.0 * (n - 1)))


def _sqrtm_psd(matrix: np.ndarray) -> np.ndarray:
    # symmetric PSD square root; eigenvalues clipped at zero
    vals, vecs = np.linalg.eigh(matrix)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Squared Wasserstein-2 distance between the two Gaussian summaries.

    Uses the symmetric form Tr((S_a^1/2 S_b S_a^1/2)^1/2) so only
    eigendecompositions of symmetric matrices are needed; small negative
    results from rounding are clipped to zero.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    for name, stats in (("a", a), ("b", b)):
        if np.abs(stats.cov - stats.cov.T).max() > 1e-8:
            raise ValueError(f"covariance of {name} is not symmetric")
    diff = a.mean - b.mean
    root_a = _sqrtm_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    inner = (inner + inner.T) / 2.0
    trace_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)).sum()
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt)
    if value < -1e-6:
        raise FloatingPointError(f"Frechet distance evaluated to {value}")
    return max(value, 0.0)


# --- kernel distance ----------------------------------------------------------

def poly_kernel_gram(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Polynomial kernel gram matrix k(u, v) = (u.v / dim + 1)^3."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    kxx = poly_kernel_gram(x, x)
    kyy = poly_kernel_gram(y, y)
    kxy = poly_kernel_gram(x, y)
    m, n = len(x), len(y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sum_xx + sum_yy - 2.0 * kxy.mean())


def _blocks(features: np.ndarray, block_size: int) -> list[np.ndarray]:
    out = [features[i : i + block_size] for i in range(0, len(features), block_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out.pop()  # a 1-element block has no unbiased estimator
    return out


def kid(
    features_a: np.ndarray, features_b: np.ndarray, block_size: int = 100
) -> float:
    """Unbiased MMD^2 under the cubic polynomial kernel, block-averaged.

    Both sets are cut into consecutive blocks of ``block_size`` (the final
    partial block is kept when it has >= 2 elements); the estimate is the
    mean over index-paired blocks.
    """
    features_a = np.asarray(features_a, dtype=np.float64)
    features_b = np.asarray(features_b, dtype=np.float64)
    if len(features_a) < 2 or len(features_b) < 2:
        raise ValueError(
            f"need >= 2 feature vectors per side, got {len(features_a)} and "
            f"{len(features_b)}"
        )
    if block_size < 2:
        raise ValueError(f"block_size must be >= 2, got {block_size}")
    blocks_a = _blocks(features_a, block_size)
    blocks_b = _blocks(features_b, block_size)
    pairs = min(len(blocks_a), len(blocks_b))
    values = [_mmd2_unbiased(blocks_a[i], blocks_b[i]) for i in range(pairs)]
    return float(np.mean(values))


# --- folder-level metrics ------------------------------------------------------

def folder_features(directory: str | Path, extractor: FeatureExtractor) -> np.ndarray:
    """Extract features for every image file in a directory (sorted by name)."""
    directory = Path(directory)
    paths = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
    )
    if not paths:
        raise MetricError(f"no image files found in {directory}")
    failures: list[str] = []
    features = []
    for path in paths:
        try:
            image = load_image_u8(path)
        except Exception as exc:  # noqa: BLE001 - every failure is reported
            failures.append(f"{path}: {exc}")
            continue
        features.append(extractor(image_u8_to_unit(image)))
    if failures:
        raise MetricError("unreadable images:\n" + "\n".join(failures))
    return np.stack(features)


def fid_folders(
    real_dir: str | Path,
    gen_dir: str | Path,
    extractor: FeatureExtractor,
    regularization: float = 1e-6,
) -> float:
    real = compute_stats(folder_features(real_dir, extractor), regularization)
    gen = compute_stats(folder_features(gen_dir, extractor), regularization)
    return frechet_distance(real, gen)


def kid_folders(
    real_dir: str | Path,
    gen_dir: str | Path,
    extractor: FeatureExtractor,
    block_size: int = 100,
) -> float:
    return kid(
        folder_features(real_dir, extractor),
        folder_features(gen_dir, extractor),
        block_size=block_size,
    )


# --- semantic region metrics ----------------------------------------------------

@dataclass
class SidClassResult:
    sfid: float | None
    skid: float | None
    n_real: int
    n_gen: int
    skipped: bool
    reason: str | None = None


@dataclass
class SidReport:
    per_class: dict[int, SidClassResult]
    mean_sfid: float
    mean_skid: float

    def to_json(self) -> dict:
        return {
            "per_class": {
                str(c): {
                    "sfid": r.sfid,
                    "skid": r.skid,
                    "n_real": r.n_real,
                    "n_gen": r.n_gen,
                    "skipped": r.skipped,
                    "reason": r.reason,
                }
                for c, r in self.per_class.items()
            },
            "mean_sfid": self.mean_sfid,
            "mean_skid": self.mean_skid,
        }


def _load_pairs(directory: Path) -> list[tuple[np.ndarray, np.ndarray]]:
    images_dir = directory / "images"
    masks_dir = directory / "masks"
    if not images_dir.is_dir() or not masks_dir.is_dir():
        raise MetricError(f"{directory} must contain images/ and masks/")
    ids = sorted(p.stem for p in images_dir.glob("*.png"))
    if not ids:
        raise MetricError(f"no paired samples under {directory}")
    pairs = []
    for sample_id in ids:
        mask_path = masks_dir / f"{sample_id}.png"
        if not mask_path.exists():
            raise MetricError(f"missing mask for {images_dir / sample_id}.png")
        image = image_u8_to_unit(load_image_u8(images_dir / f"{sample_id}.png"))
        mask = load_mask_u8(mask_path).astype(np.int64)
        if image.shape[:2] != mask.shape:
            raise MetricError(f"{sample_id}: image/mask size mismatch")
        pairs.append((image, mask))
    return pairs


def isolate_region(
    image: np.ndarray, mask: np.ndarray, class_id: int, crop_size: int
) -> np.ndarray | None:
    """Tight crop of one class with other pixels zeroed, resized square.

    Aspect ratio is deliberately not preserved. Returns None when the class
    is absent from the mask.
    """
    member = mask == class_id
    if not member.any():
        return None
    ys, xs = np.nonzero(member)
    y0, y1 = ys.min(), ys.max()
    x0, x1 = xs.min(), xs.max()
    crop = image[y0 : y1 + 1, x0 : x1 + 1].copy()
    crop[~member[y0 : y1 + 1, x0 : x1 + 1]] = 0.0
    return resize_bilinear(crop, crop_size, crop_size)


def _region_features(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    class_id: int,
    extractor: FeatureExtractor,
    crop_size: int,
    min_pixels: int,
) -> list[np.ndarray]:
    features = []
    for image, mask in pairs:
        if int((mask == class_id).sum()) < min_pixels:
            continue
        crop = isolate_region(image, mask, class_id, crop_size)
        if crop is not None:
            features.append(extractor(crop))
    return features


def sid(
    real_dir: str | Path,
    gen_dir: str | Path,
    extractor: FeatureExtractor,
    crop_size: int = 64,
    min_pixels: int = 32,
    block_size: int = 100,
    regularization: float = 1e-6,
) -> SidReport:
    """Per-class Frechet/kernel distances over mask-isolated image regions.

    For every class id > 0 present in either set, each image where the class
    occupies at least ``min_pixels`` contributes one isolated-region feature.
    Classes with fewer than 2 usable regions on either side are reported as
    skipped and excluded from the means.
    """
    real_pairs = _load_pairs(Path(real_dir))
    gen_pairs = _load_pairs(Path(gen_dir))
    num_classes = 1 + max(
        max(int(m.max()) for _, m in real_pairs),
        max(int(m.max()) for _, m in gen_pairs),
    )
    if num_classes < 2:
        raise MetricError("no foreground classes present in either set")

    per_class: dict[int, SidClassResult] = {}
    for class_id in range(1, num_classes):
        real_feats = _region_features(
            real_pairs, class_id, extractor, crop_size, min_pixels
        )
        gen_feats = _region_features(
            gen_pairs, class_id, extractor, crop_size, min_pixels
        )
        n_real, n_gen = len(real_feats), len(gen_feats)
        if n_real < 2 or n_gen < 2:
            side = "real" if n_real < 2 else "generated"
            count = n_real if n_real < 2 else n_gen
            per_class[class_id] = SidClassResult(
                sfid=None,
                skid=None,
                n_real=n_real,
                n_gen=n_gen,
                skipped=True,
                reason=f"only {count} usable {side} region(s), need >= 2",
            )
            continue
        real_stats = compute_stats(np.stack(real_feats), regularization)
        gen_stats = compute_stats(np.stack(gen_feats), regularization)
        per_class[class_id] = SidClassResult(
            sfid=frechet_distance(real_stats, gen_stats),
            skid=kid(np.stack(real_feats), np.stack(gen_feats), block_size=block_size),
            n_real=n_real,
            n_gen=n_gen,
            skipped=False,
        )

    evaluated = [r for r in per_class.values() if not r.skipped]
    if not evaluated:
        raise MetricError(
            "no evaluable classes: every class had < 2 usable regions on a side"
        )
    return SidReport(
        per_class=per_class,
        mean_sfid=float(np.mean([r.sfid for r in evaluated])),
        mean_skid=float(np.mean([r.skid for r in evaluated])),
    )


def save_sid_report(report: SidReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2) + "\n")


# --- feature file exchange -------------------------------------------------------

def export_features(path: str | Path, features: np.ndarray) -> None:
    """Write features as SGFT: magic, version, count, dim, float32 LE payload."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise ValueError(f"features must be (count, dim), got shape {features.shape}")
    count, dim = features.shape
    with Path(path).open("wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, count, dim))
        f.write(features.astype("<f4").tobytes())


def import_features(path: str | Path) -> np.ndarray:
    """Read an SGFT feature file back as a (count, dim) float64 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FeatureFormatError(
            f"{path}: truncated header at byte offset {len(raw)} (need 16 bytes)"
        )
    if raw[:4] != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {raw[:4]!r} at byte offset 0")
    version, count, dim = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise FeatureFormatError(
            f"{path}: unsupported version {version} at byte offset 4"
        )
    expected = 16 + count * dim * 4
    if len(raw) != expected:
        raise FeatureFormatError(
            f"{path}: header declares {count}x{dim} floats "
            f"({expected} bytes total) but file has {len(raw)} bytes; "
            f"payload mismatch at byte offset 16"
        )
    return (
        np.frombuffer(raw, dtype="<f4", count=count * dim, offset=16)
        .reshape(count, dim)
        .astype(np.float64)
    )
