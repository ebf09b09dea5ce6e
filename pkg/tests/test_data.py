import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import write_cloud38, write_png
from rsamseg.data import (
    BandSpec,
    DatasetManifest,
    PatchRecord,
    SceneRecord,
    binarize_label,
    compose_bands,
    fewshot_subset,
    load_patch,
    normalize,
    prepare_manifest,
    scan_scenes,
    synthetic_fixture,
    tile_origins,
    tile_scene,
)
from rsamseg.errors import DataError, ParameterError


def _scene(h, w, sid="s"):
    return SceneRecord(sid, {"rgb": "unused"}, None, w, h)


def _manifest(n):
    records = [PatchRecord(f"scene{i:04d}", (0, 0), 8, "x") for i in range(n)]
    return DatasetManifest("inria", "train", records)


def test_cloud38_channel_zero_is_band_four(tmp_path):
    write_cloud38(tmp_path, "train", ["a"], 8)
    (scene,) = scan_scenes("cloud38", tmp_path, "train")
    image = compose_bands(scene, BandSpec.for_kind("cloud38"))
    assert image.shape == (3, 8, 8) and image.dtype == np.float32
    assert [image[c, 0, 0] for c in range(3)] == [4.0, 3.0, 2.0]


def test_rgb_keeps_channel_order(tmp_path):
    rgb = np.zeros((6, 6, 3), np.uint8)
    rgb[..., 0], rgb[..., 1], rgb[..., 2] = 10, 20, 30
    write_png(tmp_path / "img.png", rgb)
    scene = SceneRecord("x", {"rgb": str(tmp_path / "img.png")}, None, 6, 6)
    image = compose_bands(scene, BandSpec.for_kind("inria"))
    assert image[:, 3, 3].tolist() == [10.0, 20.0, 30.0]


def test_missing_band_three_is_named(tmp_path):
    write_cloud38(tmp_path, "train", ["a"], 8)
    (scene,) = scan_scenes("cloud38", tmp_path, "train")
    del scene.band_paths["3"]
    with pytest.raises(DataError, match="band 3"):
        compose_bands(scene, BandSpec.for_kind("cloud38"))


def test_scan_reports_missing_band_file(tmp_path):
    write_cloud38(tmp_path, "train", ["a", "b"], 8)
    (tmp_path / "train_green" / "green_b.png").unlink()
    with pytest.raises(DataError, match="band 3"):
        scan_scenes("cloud38", tmp_path, "train")


def test_missing_label_directory(tmp_path):
    write_cloud38(tmp_path, "train", ["a"], 8, with_gt=False)
    with pytest.raises(DataError, match="train_gt"):
        scan_scenes("cloud38", tmp_path, "train")
    write_cloud38(tmp_path, "test", ["a"], 8, with_gt=False)
    (scene,) = scan_scenes("cloud38", tmp_path, "test")
    assert scene.label_path is None


def test_tiling_large_scene():
    assert tile_origins(5000, 1024) == [0, 1024, 2048, 3072, 3976]
    tiles = tile_scene(_scene(5000, 5000), 1024)
    assert len(tiles) == 25
    assert {t.origin for t in tiles} == {(r, c) for r in tile_origins(5000, 1024) for c in tile_origins(5000, 1024)}


@pytest.mark.parametrize("size", [1024, 224])
def test_exact_fit_is_one_tile(size):
    tiles = tile_scene(_scene(size, size), size)
    assert [t.origin for t in tiles] == [(0, 0)]


def test_patch_larger_than_scene():
    with pytest.raises(DataError):
        tile_scene(_scene(100, 300), 200)


@given(st.integers(1, 3000), st.integers(1, 3000))
@settings(max_examples=200, deadline=None)
def test_tiles_cover_axis_without_gaps(length, patch):
    if patch > length:
        return
    origins = tile_origins(length, patch)
    covered = np.zeros(length, bool)
    for o in origins:
        assert 0 <= o <= length - patch
        covered[o : o + patch] = True
    assert covered.all()
    assert len(origins) == -(-length // patch)


def test_cloud38_prepare_counts_patches(tmp_path):
    write_cloud38(tmp_path, "train", ["a"], 40)
    manifest = prepare_manifest("cloud38", tmp_path, "train", 16)
    assert len(manifest) == 9
    image, label = load_patch("cloud38", manifest.records[-1])
    assert image.shape == (3, 16, 16) and label.shape == (16, 16)
    # origin (24, 24) sits in the lower half, which is background
    assert label.max() == 0


def test_normalize_endpoints():
    image = np.linspace(10, 30, 16, dtype=np.float32).reshape(1, 4, 4)
    out = normalize(image)
    assert out[0, 0, 0] == 0.0 and out[0, -1, -1] == 1.0


def test_normalize_constant_channel():
    out = normalize(np.full((3, 4, 4), 5.0))
    assert not out.any()


def test_normalize_random_patch():
    image = np.random.default_rng(0).uniform(-50, 900, (3, 16, 16))
    out = normalize(image)
    lo, hi = image.min(axis=(1, 2), keepdims=True), image.max(axis=(1, 2), keepdims=True)
    np.testing.assert_allclose(out, (image - lo) / (hi - lo), atol=1e-6)
    assert out.min() == 0.0 and out.max() == 1.0


def test_normalize_policies():
    image = np.arange(4.0).reshape(1, 2, 2)
    assert np.array_equal(normalize(image, "none"), image)
    with pytest.raises(ParameterError):
        normalize(image, "zscore")


def test_fewshot_full_fraction_is_canonical():
    manifest = _manifest(10)
    manifest.records.reverse()
    subset = fewshot_subset(manifest, 1.0, 3)
    assert subset.ids() == sorted(manifest.ids())


def test_fewshot_size_and_prefix():
    manifest = _manifest(660)
    small, large = fewshot_subset(manifest, 0.01, 0), fewshot_subset(manifest, 0.10, 0)
    assert len(small) == 6 and len(large) == 66
    assert large.ids()[:6] == small.ids()
    assert len(fewshot_subset(manifest, 0.7, 0)) == 462


@given(st.integers(1, 300), st.integers(0, 1000), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
@settings(max_examples=60, deadline=None)
def test_fewshot_nesting(n, seed, a, b):
    lo, hi = sorted((a, b))
    if int(lo * n + 1e-9) == 0 or hi == 1.0:
        return
    manifest = _manifest(n)
    small, large = fewshot_subset(manifest, lo, seed), fewshot_subset(manifest, hi, seed)
    assert large.ids()[: len(small)] == small.ids()


def test_fewshot_errors():
    with pytest.raises(ParameterError):
        fewshot_subset(_manifest(5), 0.0, 0)
    with pytest.raises(ParameterError):
        fewshot_subset(_manifest(5), 1.5, 0)
    with pytest.raises(DataError):
        fewshot_subset(_manifest(5), 0.1, 0)


def test_synthetic_fixture_self_check():
    manifest = synthetic_fixture(8, 64, 7)
    assert len(manifest) == 8
    for record in manifest.records:
        image, label = load_patch("synthetic", record)
        assert image.shape == (3, 64, 64)
        assert 0.05 < label.mean() < 0.6
        assert set(np.unique(label)) <= {0, 1}


def test_synthetic_fixture_is_repeatable():
    a, b = synthetic_fixture(3, 32, 5), synthetic_fixture(3, 32, 5)
    for ra, rb in zip(a.records, b.records):
        ia, la = load_patch("synthetic", ra)
        ib, lb = load_patch("synthetic", rb)
        assert np.array_equal(ia, ib) and np.array_equal(la, lb)


def test_synthetic_fixture_needs_records():
    with pytest.raises(DataError):
        synthetic_fixture(0, 64, 7)


def test_binarize_label():
    assert binarize_label(np.array([[0, 255]])).tolist() == [[0, 1]]
    assert binarize_label(np.array([[0, 1]])).tolist() == [[0, 1]]
    with pytest.raises(DataError):
        binarize_label(np.array([[0, 128]]))


def test_manifest_round_trip(tmp_path):
    write_cloud38(tmp_path / "raw", "train", ["a", "b"], 20)
    manifest = prepare_manifest("cloud38", tmp_path / "raw", "train", 16)
    manifest.save(tmp_path / "m.jsonl")
    again = DatasetManifest.load(tmp_path / "m.jsonl")
    assert again.ids() == manifest.ids() and again.records == manifest.records


def test_manifest_invariants():
    rec = PatchRecord("a", (0, 0), 8, "x")
    with pytest.raises(DataError):
        DatasetManifest("inria", "train", [rec, rec])
    with pytest.raises(DataError):
        DatasetManifest("inria", "train", [])
    with pytest.raises(ParameterError):
        DatasetManifest("modis", "train", [rec])
