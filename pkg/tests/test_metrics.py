import shutil

import numpy as np
import pytest
import scipy.linalg

from simgen.data import make_toy_dataset
from simgen.imageio import save_image_u8
from simgen.metrics import (
    FeatureFormatError,
    FeatureStats,
    MetricError,
    compute_stats,
    default_extractor,
    export_features,
    fid_folders,
    folder_features,
    frechet_distance,
    import_features,
    isolate_region,
    kid,
    kid_folders,
    merge_stats,
    poly_kernel_gram,
    save_sid_report,
    sid,
)

# --- Frechet distance --------------------------------------------------------

def _stats(mean, cov, n=100):
    return FeatureStats(n=n, mean=np.atleast_1d(np.asarray(mean, float)),
                        cov=np.atleast_2d(np.asarray(cov, float)))


def test_frechet_identical_stats_is_zero():
    rng = np.random.default_rng(0)
    a = compute_stats(rng.standard_normal((50, 4)))
    assert frechet_distance(a, a) < 1e-8


def test_frechet_closed_form_one_dimensional():
    # (m1-m2)^2 + (s1-s2)^2 in 1-D
    assert frechet_distance(_stats([0.0], [[1.0]]), _stats([1.0], [[1.0]])) == pytest.approx(1.0, abs=1e-9)
    assert frechet_distance(_stats([0.0], [[1.0]]), _stats([0.0], [[4.0]])) == pytest.approx(1.0, abs=1e-9)
    assert frechet_distance(_stats([2.0], [[0.25]]), _stats([0.0], [[2.25]])) == pytest.approx(5.0, abs=1e-9)


def _random_spd(rng, dim):
    a = rng.standard_normal((dim, dim))
    return a @ a.T + 0.5 * np.eye(dim)


def test_frechet_matches_sqrtm_oracle():
    # independent route: general matrix square root of the product
    rng = np.random.default_rng(7)
    for _ in range(10):
        a = _stats(rng.standard_normal(4), _random_spd(rng, 4))
        b = _stats(rng.standard_normal(4), _random_spd(rng, 4))
        oracle = float(
            (a.mean - b.mean) @ (a.mean - b.mean)
            + np.trace(a.cov + b.cov - 2.0 * scipy.linalg.sqrtm(a.cov @ b.cov).real)
        )
        assert frechet_distance(a, b) == pytest.approx(oracle, abs=1e-6)


def test_frechet_symmetric_and_positive():
    rng = np.random.default_rng(8)
    for _ in range(5):
        a = _stats(rng.standard_normal(3), _random_spd(rng, 3))
        b = _stats(rng.standard_normal(3), _random_spd(rng, 3))
        d_ab = frechet_distance(a, b)
        d_ba = frechet_distance(b, a)
        assert abs(d_ab - d_ba) < 1e-8
        assert d_ab > 0.0


def test_frechet_input_validation():
    a = _stats([0.0], [[1.0]])
    b = _stats([0.0, 0.0], np.eye(2))
    with pytest.raises(ValueError, match="dimension"):
        frechet_distance(a, b)
    lopsided = _stats([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError, match="symmetric"):
        frechet_distance(lopsided, b)


# --- stats accumulation --------------------------------------------------------

def test_compute_stats_matches_numpy():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((40, 5))
    stats = compute_stats(x)
    assert stats.n == 40
    assert np.allclose(stats.mean, x.mean(axis=0))
    assert np.allclose(stats.cov, np.cov(x, rowvar=False))
    assert np.abs(stats.cov - stats.cov.T).max() < 1e-10
    with pytest.raises(ValueError):
        compute_stats(x[:1])


def test_merge_stats_is_order_independent():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((60, 4))
    direct = compute_stats(x)
    parts = [compute_stats(x[i : i + 20]) for i in range(0, 60, 20)]

    merged_ltr = merge_stats(merge_stats(parts[0], parts[1]), parts[2])
    merged_rtl = merge_stats(parts[0], merge_stats(parts[1], parts[2]))
    merged_rev = merge_stats(merge_stats(parts[2], parts[1]), parts[0])
    for merged in (merged_ltr, merged_rtl, merged_rev):
        assert merged.n == 60
        assert np.allclose(merged.mean, direct.mean, atol=1e-12)
        assert np.allclose(merged.cov, direct.cov, atol=1e-10)


# --- kernel distance -------------------------------------------------------------

def naive_mmd2(x, y):
    """Double-loop unbiased estimator; the independent oracle."""
    def k(u, v):
        return (float(u @ v) / len(u) + 1.0) ** 3

    m, n = len(x), len(y)
    xx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j)
    yy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j)
    xy = sum(k(x[i], y[j]) for i in range(m) for j in range(n))
    return xx / (m * (m - 1)) + yy / (n * (n - 1)) - 2.0 * xy / (m * n)


def test_kernel_value_example():
    ones = np.ones((1, 3))
    assert poly_kernel_gram(ones, ones)[0, 0] == pytest.approx(8.0, abs=1e-12)


def test_kid_matches_exhaustive_oracle():
    rng = np.random.default_rng(3)
    for m, n in ((2, 2), (5, 9), (64, 64), (31, 17)):
        x = rng.standard_normal((m, 6))
        y = rng.standard_normal((n, 6)) + 0.3
        assert kid(x, y, block_size=100) == pytest.approx(naive_mmd2(x, y), abs=1e-10)


def test_kid_two_point_masses():
    x = np.tile([1.0, 0.0], (4, 1))
    y = np.tile([0.0, 1.0], (4, 1))
    assert kid(x, y) == pytest.approx(naive_mmd2(x, y), abs=1e-12)


def test_kid_unbiased_near_zero_on_same_distribution():
    rng = np.random.default_rng(4)
    values = []
    for _ in range(100):
        x = rng.standard_normal((24, 5))
        y = rng.standard_normal((24, 5))
        values.append(kid(x, y))
    mean = np.mean(values)
    stderr = np.std(values, ddof=1) / np.sqrt(len(values))
    assert abs(mean) < 3 * stderr


def test_kid_block_averaging():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((10, 3))
    y = rng.standard_normal((10, 3))
    manual = np.mean([naive_mmd2(x[:5], y[:5]), naive_mmd2(x[5:], y[5:])])
    assert kid(x, y, block_size=5) == pytest.approx(manual, abs=1e-12)

    # trailing 1-element block is dropped, not used
    x11 = rng.standard_normal((11, 3))
    y11 = rng.standard_normal((11, 3))
    manual = np.mean([naive_mmd2(x11[:5], y11[:5]), naive_mmd2(x11[5:10], y11[5:10])])
    assert kid(x11, y11, block_size=5) == pytest.approx(manual, abs=1e-12)


def test_kid_validation():
    ok = np.zeros((3, 2))
    with pytest.raises(ValueError):
        kid(ok[:1], ok)
    with pytest.raises(ValueError):
        kid(ok, ok, block_size=1)


# --- extractor --------------------------------------------------------------------

def test_default_extractor_deterministic():
    a = default_extractor(seed=3, output_dim=32)
    b = default_extractor(seed=3, output_dim=32)
    rng = np.random.default_rng(0)
    image = rng.uniform(0, 1, size=(20, 24, 3))
    assert np.array_equal(a(image), b(image))
    c = default_extractor(seed=4, output_dim=32)
    assert not np.array_equal(a(image), c(image))
    u8 = (image * 255).astype(np.uint8)
    assert np.array_equal(a(u8), a(u8 / 255.0))  # uint8 path = manual scaling


def test_default_extractor_orthonormal_rows():
    projection = default_extractor(seed=0, output_dim=64).fn.projection
    gram = projection @ projection.T
    assert np.abs(np.diag(gram) - 1.0).max() < 1e-8
    off_diagonal = gram - np.diag(np.diag(gram))
    assert np.abs(off_diagonal).max() < 1e-8


def test_default_extractor_validation():
    with pytest.raises(ValueError):
        default_extractor(output_dim=4)
    extractor = default_extractor(output_dim=8)
    with pytest.raises(ValueError):
        extractor(np.zeros((4, 4)))


def test_extractor_separates_toy_classes(tmp_path):
    manifest = make_toy_dataset(tmp_path / "toy", count=40, size=32, num_classes=4, seed=13)
    from simgen.imageio import image_u8_to_unit, load_image_u8, load_mask_u8

    extractor = default_extractor(0, 64)
    by_class: dict[int, list[np.ndarray]] = {1: [], 2: [], 3: []}
    for sample_id in manifest.ids:
        image = image_u8_to_unit(load_image_u8(tmp_path / "toy" / "images" / f"{sample_id}.png"))
        mask = load_mask_u8(tmp_path / "toy" / "masks" / f"{sample_id}.png").astype(np.int64)
        for c in (1, 2, 3):
            if (mask == c).sum() >= 16:
                by_class[c].append(extractor(isolate_region(image, mask, c, 32)))
    for c in (1, 2, 3):
        assert len(by_class[c]) >= 3

    def mean_dist(xs, ys):
        return np.mean([np.linalg.norm(x - y) for x in xs for y in ys if x is not y])

    within = np.mean([mean_dist(by_class[c], by_class[c]) for c in (1, 2, 3)])
    between = np.mean(
        [mean_dist(by_class[a], by_class[b]) for a in (1, 2, 3) for b in (1, 2, 3) if a != b]
    )
    assert between > within


def test_isolate_region_zeroes_and_crops():
    image = np.ones((6, 8, 3))
    mask = np.zeros((6, 8), dtype=np.int64)
    mask[2:4, 3:5] = 2  # 2x2 tight box
    mask[2, 4] = 1  # hole of another class inside it

    # crop_size matches the box, so no interpolation: values are exact
    crop = isolate_region(image, mask, 2, crop_size=2)
    assert crop.shape == (2, 2, 3)
    assert np.array_equal(crop[0, 1], [0.0, 0.0, 0.0])  # the hole is zeroed
    assert np.array_equal(crop[0, 0], [1.0, 1.0, 1.0])
    assert np.array_equal(crop[1, 1], [1.0, 1.0, 1.0])

    resized = isolate_region(image, mask, 2, crop_size=5)
    assert resized.shape == (5, 5, 3)
    assert isolate_region(image, mask, 3, crop_size=2) is None


# --- folder metrics -----------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("metric_toys")
    make_toy_dataset(root / "a", count=20, size=32, num_classes=4, seed=31)
    make_toy_dataset(root / "b", count=20, size=32, num_classes=4, seed=32)
    return root


def test_fid_folder_self_distance(toy_dirs):
    extractor = default_extractor(0, 32)
    assert fid_folders(toy_dirs / "a" / "images", toy_dirs / "a" / "images", extractor) < 1e-6


def test_fid_orders_noise_above_heldout(toy_dirs, tmp_path):
    rng = np.random.default_rng(0)
    noise_dir = tmp_path / "noise"
    noise_dir.mkdir()
    for i in range(20):
        save_image_u8(noise_dir / f"{i:04d}.png", rng.integers(0, 256, (32, 32, 3)).astype(np.uint8))
    extractor = default_extractor(0, 32)
    fid_heldout = fid_folders(toy_dirs / "a" / "images", toy_dirs / "b" / "images", extractor)
    fid_noise = fid_folders(toy_dirs / "a" / "images", noise_dir, extractor)
    assert fid_noise > fid_heldout
    # deterministic across runs
    assert fid_noise == fid_folders(toy_dirs / "a" / "images", noise_dir, extractor)


def test_folder_metrics_invariant_to_file_names(toy_dirs, tmp_path):
    renamed = tmp_path / "renamed"
    renamed.mkdir()
    sources = sorted((toy_dirs / "a" / "images").glob("*.png"))
    for i, path in enumerate(reversed(sources)):
        shutil.copy(path, renamed / f"z{i:03d}.png")
    extractor = default_extractor(0, 32)
    ref = toy_dirs / "b" / "images"
    assert fid_folders(ref, renamed, extractor) == pytest.approx(
        fid_folders(ref, toy_dirs / "a" / "images", extractor), abs=1e-9
    )
    assert kid_folders(ref, renamed, extractor) == pytest.approx(
        kid_folders(ref, toy_dirs / "a" / "images", extractor), abs=1e-9
    )


def test_folder_features_errors(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    extractor = default_extractor(0, 32)
    with pytest.raises(MetricError, match="no image files"):
        folder_features(empty, extractor)

    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "broken.png").write_bytes(b"this is not a png")
    (bad / "also_bad.png").write_bytes(b"nope")
    with pytest.raises(MetricError) as excinfo:
        folder_features(bad, extractor)
    assert "broken.png" in str(excinfo.value)
    assert "also_bad.png" in str(excinfo.value)


# --- semantic region metrics ----------------------------------------------------------

def test_sid_self_is_zero(toy_dirs):
    extractor = default_extractor(0, 32)
    report = sid(toy_dirs / "a", toy_dirs / "a", extractor, min_pixels=16)
    evaluated = [r for r in report.per_class.values() if not r.skipped]
    assert evaluated
    for result in evaluated:
        assert result.sfid < 1e-6
        assert result.n_real == result.n_gen


def test_sid_report_structure(toy_dirs, tmp_path):
    extractor = default_extractor(0, 32)
    report = sid(toy_dirs / "a", toy_dirs / "b", extractor, min_pixels=16)
    assert report.mean_sfid > 0
    evaluated = [r for r in report.per_class.values() if not r.skipped]
    assert report.mean_sfid == pytest.approx(np.mean([r.sfid for r in evaluated]))
    assert report.mean_skid == pytest.approx(np.mean([r.skid for r in evaluated]))

    path = tmp_path / "report.json"
    save_sid_report(report, path)
    import json

    doc = json.loads(path.read_text())
    assert set(doc) == {"per_class", "mean_sfid", "mean_skid"}
    for c, entry in doc["per_class"].items():
        assert set(entry) == {"sfid", "skid", "n_real", "n_gen", "skipped", "reason"}
        assert int(c) >= 1


def test_sid_skips_underpopulated_classes(tmp_path):
    from simgen.imageio import save_mask_u8

    for side in ("real", "gen"):
        make_toy_dataset(tmp_path / side, count=8, size=32, num_classes=3, seed=41)
    # erase class 2 from the gen masks so it has no usable regions
    for path in (tmp_path / "gen" / "masks").glob("*.png"):
        from simgen.imageio import load_mask_u8

        mask = load_mask_u8(path).astype(np.int64)
        mask[mask == 2] = 0
        save_mask_u8(path, mask)
    report = sid(tmp_path / "real", tmp_path / "gen", default_extractor(0, 32), min_pixels=16)
    assert report.per_class[2].skipped
    assert "generated" in report.per_class[2].reason
    assert not report.per_class[1].skipped


def test_sid_no_evaluable_classes(tmp_path):
    from simgen.imageio import save_mask_u8

    for side in ("real", "gen"):
        root = tmp_path / side
        (root / "images").mkdir(parents=True)
        (root / "masks").mkdir()
        rng = np.random.default_rng(0)
        for i in range(3):
            save_image_u8(root / "images" / f"{i}.png",
                          rng.integers(0, 256, (16, 16, 3)).astype(np.uint8))
            save_mask_u8(root / "masks" / f"{i}.png", np.zeros((16, 16), dtype=np.uint8))
    with pytest.raises(MetricError):
        sid(tmp_path / "real", tmp_path / "gen", default_extractor(0, 32))


# --- feature files -----------------------------------------------------------------------

def test_feature_file_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    features = rng.standard_normal((7, 12)).astype(np.float32)
    path = tmp_path / "f.sgft"
    export_features(path, features)
    loaded = import_features(path)
    assert loaded.shape == (7, 12)
    assert np.array_equal(loaded.astype(np.float32), features)


def test_feature_file_errors(tmp_path):
    empty = tmp_path / "empty.sgft"
    empty.write_bytes(b"")
    with pytest.raises(FeatureFormatError, match="byte offset 0"):
        import_features(empty)

    bad_magic = tmp_path / "bad.sgft"
    bad_magic.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(FeatureFormatError, match="bad magic"):
        import_features(bad_magic)

    mismatched = tmp_path / "short.sgft"
    export_features(mismatched, np.zeros((4, 4), dtype=np.float32))
    raw = mismatched.read_bytes()
    mismatched.write_bytes(raw[:-8])
    with pytest.raises(FeatureFormatError, match="byte offset 16"):
        import_features(mismatched)
