"""
Scenes, window pairs, seeded sampling, synthetic dataset and raster I/O
"""
import numpy as np
import pytest
from PIL import Image

from src.data import (
    Rejected, Scene, augment, beacon_isolated, downsample_box, draw_pair, extract_pair,
    generate_scene_set, global_access_count, load_scene_set, local_only_bayes_cap, oob_fraction,
    read_manifest, read_pgm, read_ppm, reset_global_access_count, sample_batch, sample_pair,
    stack_pairs, synth_generate, write_pgm, write_ppm,
)
from src.errors import ConfigError, DimensionError, GeometryError, RasterError
from src.models.schemas import IGNORE, SamplerConfig, SynthSpec

from tests.conftest import TINY_CLASS_TABLE, random_scene


def tiny_spec(**overrides) -> SynthSpec:
    settings = dict(
        num_classes=3, scene_size=64, cell_size=32, texture_size=4, beacon_radius=10,
        beacon_width=2, class_table=dict(TINY_CLASS_TABLE),
        train_scenes=2, val_scenes=1, test_scenes=1,
    )
    settings.update(overrides)
    return SynthSpec(**settings)


# ============================================================================
# PAIR EXTRACTION
# ============================================================================

def test_scene_is_read_only_and_checked(rng):
    scene = random_scene(rng, 6, 6)
    assert not scene.image.flags.writeable
    assert scene.channel_means.shape == (3,)
    with pytest.raises(DimensionError):
        Scene(image=np.zeros((3, 4, 4)), labels=np.zeros((4, 5)))


def test_unaugmented_pair_is_a_plain_crop(scene):
    """center (24, 24), s=8: rows and columns 20..27"""
    pair = extract_pair(scene, (24, 24), 8, 4)
    np.testing.assert_array_equal(pair.x_loc, scene.image[:, 20:28, 20:28])
    np.testing.assert_array_equal(pair.y_loc, scene.labels[20:28, 20:28])
    assert not pair.pad_mask_loc.any()


def test_global_window_is_co_centered(scene):
    """the global window spans rows 8..39 before the 4x box downsample"""
    pair = extract_pair(scene, (24, 24), 8, 4)
    expected = downsample_box(scene.image[:, 8:40, 8:40], 4)
    assert pair.x_glob.shape == (3, 8, 8)
    np.testing.assert_allclose(pair.x_glob, expected, atol=1e-6)
    # the central 2x2 global cells cover exactly the local window
    np.testing.assert_allclose(pair.x_glob[:, 3:5, 3:5], downsample_box(pair.x_loc, 4), atol=1e-6)


def test_off_scene_pixels_take_channel_mean_and_ignore(scene):
    pair = extract_pair(scene, (0, 0), 8, 4)
    corner = pair.x_loc[:, :4, :4]
    np.testing.assert_allclose(corner, np.broadcast_to(scene.channel_means[:, None, None], corner.shape))
    assert (pair.y_loc[:4, :4] == IGNORE).all()
    assert pair.pad_mask_loc[:4, :4].all() and not pair.pad_mask_loc[4:, 4:].any()
    np.testing.assert_array_equal(pair.y_loc[4:, 4:], scene.labels[:4, :4])
    assert pair.pad_mask_glob[0, 0]


def test_rotation_by_quarter_turn(scene):
    """90 degrees about the shared center is a clockwise rot90 of the plain crop"""
    base = extract_pair(scene, (24, 24), 8, 4)
    turned = extract_pair(scene, (24, 24), 8, 4, angle_deg=90.0)
    np.testing.assert_array_equal(turned.y_loc, np.rot90(base.y_loc, k=-1))
    np.testing.assert_allclose(turned.x_loc, np.rot90(base.x_loc, k=-1, axes=(-2, -1)), atol=1e-4)


def test_geometry_errors(scene):
    with pytest.raises(GeometryError):
        extract_pair(scene, (24, 24), 7, 4)
    with pytest.raises(GeometryError):
        downsample_box(np.zeros((3, 6, 6)), 4)


# ============================================================================
# SAMPLING
# ============================================================================

def test_oob_fraction_around_threshold(make_scene):
    """s=20 window with 4x19 (81% off) or 6x14 (79% off) of 400 pixels inside"""
    big = make_scene(100, 100)
    assert oob_fraction(big, (-6, 9), 20) == pytest.approx(0.81)
    assert oob_fraction(big, (-4, 4), 20) == pytest.approx(0.79)
    assert oob_fraction(big, (50, 50), 20) == 0.0


def test_rejection_threshold(make_scene):
    """every center of a 4x4 scene leaves 75% of an 8x8 window off-scene"""
    small = make_scene(4, 4)
    lenient = SamplerConfig(s=8, g=2, oob_reject_fraction=0.8, augment=False)
    strict = SamplerConfig(s=8, g=2, oob_reject_fraction=0.7, augment=False, max_attempts=5)
    assert not isinstance(sample_pair(small, lenient, 0), Rejected)
    rejected = sample_pair(small, strict, 0)
    assert isinstance(rejected, Rejected) and rejected.oob_fraction == pytest.approx(0.75)
    with pytest.raises(GeometryError):
        draw_pair(small, strict, 0)


def test_augment_draws_within_ranges(scene):
    always = SamplerConfig(s=8, g=4, aug_prob=1.0)
    never = SamplerConfig(s=8, g=4, aug_prob=0.0)
    pair = extract_pair(scene, (24, 24), 8, 4)
    assert augment(pair, never, np.random.default_rng(0)) is pair
    for seed in range(5):
        out = augment(pair, always, np.random.default_rng(seed))
        assert 0.5 <= out.scale <= 2.0 and -90.0 <= out.angle_deg <= 90.0
        assert out.center == pair.center and out.x_loc.shape == pair.x_loc.shape


def test_sample_batch_is_seeded_and_thread_independent(make_scene):
    scenes = [make_scene(48, 48, name=f"s{i}") for i in range(3)]
    cfg = SamplerConfig(s=8, g=4, seed=5)
    serial = sample_batch(scenes, cfg, step=2, batch=6, threads=1)
    threaded = sample_batch(scenes, cfg, step=2, batch=6, threads=4)
    again = sample_batch(scenes, cfg, step=2, batch=6)
    assert [p.index for p in serial] == list(range(12, 18))
    for a, b, c in zip(serial, threaded, again):
        assert a.center == b.center == c.center
        np.testing.assert_array_equal(a.x_loc, b.x_loc)
        np.testing.assert_array_equal(a.x_loc, c.x_loc)
        np.testing.assert_array_equal(a.y_loc, b.y_loc)
    other = sample_batch(scenes, cfg.model_copy(update={"seed": 6}), step=2, batch=6)
    assert [p.center for p in other] != [p.center for p in serial]
    with pytest.raises(GeometryError):
        sample_batch([], cfg, 0, 1)


def test_global_window_is_read_only_on_demand(make_scene):
    scenes = [make_scene(48, 48)]
    cfg = SamplerConfig(s=8, g=4, augment=False)
    reset_global_access_count()
    pairs = sample_batch(scenes, cfg, 0, 3)
    x_loc, x_glob, y_loc = stack_pairs(pairs, with_global=False)
    assert x_glob is None and x_loc.shape == (3, 3, 8, 8) and y_loc.shape == (3, 8, 8)
    assert global_access_count() == 0
    _, x_glob, _ = stack_pairs(pairs, with_global=True)
    assert x_glob.shape == (3, 3, 8, 8)
    assert global_access_count() == 3
    reset_global_access_count()


# ============================================================================
# SYNTHETIC SCENES
# ============================================================================

def test_synth_generate_layout():
    spec = tiny_spec(noise=0.0)
    scene = synth_generate(spec, 7)
    assert scene.name == "synth-7"
    assert scene.image.shape == (3, 64, 64) and scene.labels.shape == (64, 64)
    assert 0.0 <= scene.image.min() and scene.image.max() <= 1.0
    assert set(np.unique(scene.labels)) <= {0, 1, 2}
    # one 4x4 texture square per 32x32 cell
    assert (scene.labels > 0).sum() == 4 * 16
    np.testing.assert_array_equal(synth_generate(spec, 7).image, scene.image)


def test_bayes_cap_and_isolation():
    assert local_only_bayes_cap(SynthSpec()) == pytest.approx(0.5)
    assert local_only_bayes_cap(SynthSpec(beacon_prior=0.8)) == pytest.approx(0.8)
    blind = {k: 1 for k in TINY_CLASS_TABLE}
    assert local_only_bayes_cap(tiny_spec(class_table=blind)) == 1.0
    assert beacon_isolated(SynthSpec(), 64)
    assert not beacon_isolated(SynthSpec(), 66)


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        tiny_spec(beacon_radius=20)
    with pytest.raises(ValueError):
        tiny_spec(class_table={**TINY_CLASS_TABLE, "stripes_h:warm": 0})
    with pytest.raises(ValueError):
        tiny_spec(class_table={"stripes_h:warm": 1})
    with pytest.raises(ValueError):
        tiny_spec(class_table={**TINY_CLASS_TABLE, "dots:warm": 1})


def test_scene_set_round_trip(tmp_path):
    spec = tiny_spec()
    entries = generate_scene_set(spec, tmp_path, seed=1)
    assert [e.split for e in entries] == ["train", "train", "val", "test"]
    assert (tmp_path / "train" / "train_0001.ppm").exists()
    assert [e.scene_id for e in read_manifest(tmp_path)] == [e.scene_id for e in entries]
    loaded = load_scene_set(tmp_path, "train")
    assert [s.name for s in loaded] == ["train_0000", "train_0001"]
    fresh = synth_generate(spec, entries[0].seed)
    np.testing.assert_array_equal(loaded[0].image, fresh.image)
    np.testing.assert_array_equal(loaded[0].labels, fresh.labels)


def test_scene_set_regenerates_identically(tmp_path):
    spec = tiny_spec()
    generate_scene_set(spec, tmp_path / "a", seed=4)
    generate_scene_set(spec, tmp_path / "b", seed=4)
    for name in ("train/train_0000.ppm", "val/val_0000.pgm", "manifest.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_scene_set_errors(tmp_path):
    with pytest.raises(ConfigError):
        read_manifest(tmp_path)
    with pytest.raises(ConfigError):
        load_scene_set(tmp_path, "holdout")


# ============================================================================
# RASTERS
# ============================================================================

def test_raster_round_trip(tmp_path, rng):
    rgb = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    grey = rng.integers(0, 256, size=(5, 7), dtype=np.uint8)
    write_ppm(tmp_path / "x.ppm", rgb)
    write_pgm(tmp_path / "sub" / "y.pgm", grey)
    np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), rgb)
    np.testing.assert_array_equal(read_pgm(tmp_path / "sub" / "y.pgm"), grey)


def test_raster_errors(tmp_path):
    write_pgm(tmp_path / "grey.pgm", np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(RasterError):
        read_ppm(tmp_path / "grey.pgm")
    Image.fromarray(np.zeros((2, 2, 3), dtype=np.uint8)).save(tmp_path / "x.png")
    with pytest.raises(RasterError):
        read_ppm(tmp_path / "x.png")
    (tmp_path / "junk.ppm").write_bytes(b"not a raster")
    with pytest.raises(RasterError):
        read_ppm(tmp_path / "junk.ppm")
    with pytest.raises(RasterError):
        write_ppm(tmp_path / "bad.ppm", np.zeros((2, 2)))
    with pytest.raises(RasterError):
        write_pgm(tmp_path / "bad.pgm", np.zeros((2, 2, 3)))
