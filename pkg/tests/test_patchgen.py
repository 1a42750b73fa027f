import numpy as np
import pytest
from scipy.stats import chisquare

from mrjigsaw.patchgen import (
    DEFAULT_GEOMETRY,
    AugmentationParams,
    Geometry,
    apply_augmentation,
    arrange,
    assemble_mosaic,
    augmentation_group,
    crop,
    make_eval_sample,
    make_jumbled_sample,
    partition_frame,
    random_crop,
    read_sample_record,
    tile_bounds,
    unarrange,
    write_sample_record,
)
from mrjigsaw.permset import PermutationSet


def identity_set(n=9):
    return PermutationSet(perms=np.arange(n, dtype=np.int8)[None], source_pool_hash="x", rng_seed=0)


def test_geometry_defaults():
    g = DEFAULT_GEOMETRY
    assert (g.tile_size, g.crop_range, g.center_ref, g.translation_px) == (85, 21, 10, 6)


def test_partition_shapes(frame256):
    tiles = partition_frame(frame256)
    assert tiles.shape == (9, 85, 85)


def test_tile_bounds():
    assert tile_bounds(0) == (0, 85, 0, 85)
    assert tile_bounds(5) == (85, 170, 170, 255)


def test_partition_ignores_last_row_and_column():
    frame = np.zeros((256, 256), np.float32)
    frame[255, :] = 1
    frame[:, 255] = 1
    assert partition_frame(frame).max() == 0


def test_partition_contents(frame256):
    tiles = partition_frame(frame256)
    np.testing.assert_array_equal(tiles[5], frame256[85:170, 170:255])


@pytest.mark.parametrize("shape", [(256, 200), (128, 128), (256,)])
def test_partition_rejects_bad_frames(shape):
    with pytest.raises(ValueError):
        partition_frame(np.zeros(shape, np.float32))


def test_group():
    g = augmentation_group()
    assert len(g) == 54
    assert {a.tx_px for a in g} == {-6.0, 0.0, 6.0}
    assert {a.rotation_deg for a in g} == {-15.0, 0.0, 15.0}
    assert {a.scale for a in g} == {1.0, 1.2}


def test_identity_augmentation_is_bitwise(frame256):
    tile = partition_frame(frame256)[0]
    out = apply_augmentation(tile, AugmentationParams())
    assert out.tobytes() == tile.tobytes()


def test_all_augmentations_keep_size_and_range(frame256):
    tile = partition_frame(frame256)[4]
    for g in augmentation_group():
        out = apply_augmentation(tile, g)
        assert out.shape == (85, 85)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_rotation_round_trip_on_constant_image():
    tile = np.ones((85, 85), np.float32)
    there = apply_augmentation(tile, AugmentationParams(15.0, 0.0, 0.0, 1.0))
    back = apply_augmentation(there, AugmentationParams(-15.0, 0.0, 0.0, 1.0))
    # corners fall outside the support; the inscribed disc keeps its value
    yy, xx = np.mgrid[0:85, 0:85] - 42
    interior = yy**2 + xx**2 < 36**2
    np.testing.assert_allclose(back[interior], 1.0, atol=1e-5)


def test_translation_moves_content():
    tile = np.zeros((85, 85), np.float32)
    tile[40:45, 30:40] = 1.0
    out = apply_augmentation(tile, AugmentationParams(0.0, 6.0, -6.0, 1.0))
    np.testing.assert_allclose(out[34:39, 36:46], 1.0)


def test_augmentation_outside_group():
    tile = np.zeros((85, 85), np.float32)
    with pytest.raises(ValueError):
        apply_augmentation(tile, AugmentationParams(10.0, 0.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        apply_augmentation(np.zeros((64, 64), np.float32), AugmentationParams())


def test_random_crop_range_and_determinism(frame256):
    tile = partition_frame(frame256)[0]
    rng = np.random.default_rng(0)
    refs = np.array([random_crop(tile, rng)[1] for _ in range(3000)])
    assert refs.min() == 0 and refs.max() == 21
    a, ra = random_crop(tile, np.random.default_rng(9))
    b, rb = random_crop(tile, np.random.default_rng(9))
    assert ra == rb and np.array_equal(a, b)
    assert a.shape == (64, 64)


def test_crop_origin(frame256):
    tile = partition_frame(frame256)[0]
    np.testing.assert_array_equal(crop(tile, 0, 0), frame256[:64, :64])


def test_jumbled_sample_contract(frame256, pset10):
    s = make_jumbled_sample(frame256, pset10, np.random.default_rng(0))
    assert s.patches.shape == (9, 64, 64)
    assert 0 <= s.label < 10
    assert s.patches.min() >= 0 and s.patches.max() <= 1


def test_identity_set_patch_k_comes_from_tile_k(frame256):
    s = make_jumbled_sample(frame256, identity_set(), np.random.default_rng(4))
    tiles = partition_frame(frame256)
    for k in range(9):
        g = AugmentationParams(**s.provenance["augmentations"][k])
        rx, ry = s.provenance["refs"][k]
        expected = crop(apply_augmentation(tiles[k], g), rx, ry)
        np.testing.assert_array_equal(s.patches[k], expected)


def test_labels_uniform(frame256, pset10):
    rng = np.random.default_rng(1)
    small = frame256[:]  # label draw does not depend on pixel content
    labels = [make_jumbled_sample(small, pset10, rng).label for _ in range(1000)]
    counts = np.bincount(labels, minlength=10)
    assert chisquare(counts).pvalue > 1e-3


def test_jumbled_deterministic(frame256, pset10):
    a = make_jumbled_sample(frame256, pset10, np.random.default_rng(7))
    b = make_jumbled_sample(frame256, pset10, np.random.default_rng(7))
    assert a.label == b.label
    np.testing.assert_allclose(a.patches, b.patches, atol=1e-6)


def test_reassembly(frame256):
    tiles = partition_frame(frame256)
    patches = arrange(np.stack([crop(t, 0, 0) for t in tiles]), np.arange(9))
    mosaic = assemble_mosaic(patches, gap=0)
    for k in range(9):
        r, c = divmod(k, 3)
        np.testing.assert_array_equal(
            mosaic[r * 64 : (r + 1) * 64, c * 64 : (c + 1) * 64],
            frame256[r * 85 : r * 85 + 64, c * 85 : c * 85 + 64],
        )


def test_permutation_consistency(frame256, pset10):
    ordered = make_eval_sample(frame256, pset10, 0).patches
    for label in range(len(pset10)):
        s = make_eval_sample(frame256, pset10, label)
        np.testing.assert_array_equal(unarrange(s.patches, pset10.perms[label]), ordered)


def test_eval_sample(frame256, pset10):
    s = make_eval_sample(frame256, pset10, 0)
    tiles = partition_frame(frame256)
    for k in range(9):
        np.testing.assert_array_equal(s.patches[k], tiles[k][10:74, 10:74])
    again = make_eval_sample(frame256, pset10, 0)
    np.testing.assert_array_equal(s.patches, again.patches)
    with pytest.raises(ValueError):
        make_eval_sample(frame256, pset10, 10)


def test_small_geometry(pset10):
    g = Geometry(frame_size=128, patch_size=32)
    assert (g.tile_size, g.crop_range, g.translation_px) == (42, 10, 3)
    frame = np.random.default_rng(0).random((128, 128)).astype(np.float32)
    s = make_jumbled_sample(frame, pset10, np.random.default_rng(0), g)
    assert s.patches.shape == (9, 32, 32)
    with pytest.raises(ValueError):
        Geometry(frame_size=128, patch_size=64)


def test_sample_record_round_trip(tmp_path, frame256, pset10):
    s = make_jumbled_sample(frame256, pset10, np.random.default_rng(0), provenance={"clip_id": "c1", "frame_index": 3})
    path = write_sample_record(tmp_path, "s0", s)
    assert path.stat().st_size == 9 * 64 * 64 * 4 + 2
    back = read_sample_record(path)
    assert back.label == s.label
    np.testing.assert_array_equal(back.patches, s.patches)
    assert back.provenance["clip_id"] == "c1"
