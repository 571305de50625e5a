"""Augmentation sampling bounds, geometric inverses, photometric formulas."""

import numpy as np
import pytest

from imseg import dataset_io as dio
from imseg.augment import (
    ALD_VARIANTS,
    IDENTITY,
    AugmentationSpec,
    ConcreteAugmentation,
    GenerationSchedule,
    PRESET_SCHEDULES,
    apply,
    apply_geometric,
    build_ald,
    invert_geometric,
    load_schedule,
    map_back,
    sample,
)
from imseg.errors import DataError

from conftest import make_dataset


FULL_SPEC = AugmentationSpec(
    max_blur=5, max_noise=12, alpha_dev=0.2, beta_dev=20.0, hflip=True, vflip=True, rot90=True
)


# --------------------------------------------------------------------------
# Sampling


def test_sample_is_pure_in_spec_and_seed():
    assert sample(FULL_SPEC, 99) == sample(FULL_SPEC, 99)
    assert sample(FULL_SPEC, 99) != sample(FULL_SPEC, 100)


def test_sample_respects_bounds_over_10000_draws():
    seen_turns, seen_flips = set(), set()
    for s in range(10000):
        aug = sample(FULL_SPEC, s)
        assert aug.blur_kernel in (1, 3, 5)
        assert 0 <= aug.noise_amp <= 12
        assert 0.8 <= aug.alpha <= 1.2
        assert -20.0 <= aug.beta <= 20.0
        seen_turns.add(aug.quarter_turns)
        seen_flips.add((aug.hflip, aug.vflip))
    assert seen_turns == {0, 1, 2, 3}
    assert seen_flips == {(a, b) for a in (False, True) for b in (False, True)}


def test_sample_of_identity_spec_is_identity():
    aug = sample(AugmentationSpec(), 5)
    assert aug.is_geometric_identity()
    assert aug.blur_kernel == 1 and aug.noise_amp == 0
    assert aug.alpha == 1.0 and aug.beta == 0.0


def test_spec_validation():
    for bad in (
        dict(max_blur=4),
        dict(max_blur=-1),
        dict(max_noise=300),
        dict(alpha_dev=1.0),
        dict(beta_dev=300.0),
    ):
        with pytest.raises(DataError):
            AugmentationSpec(**bad).validate()


def test_spec_from_dict_normalizes_even_blur():
    spec = AugmentationSpec.from_dict({"max_blur": 4})
    assert spec.max_blur == 5
    with pytest.raises(DataError):
        AugmentationSpec.from_dict({"max_blur": "soft"})


# --------------------------------------------------------------------------
# Geometry: the 16 sampled D4-with-flips ops all invert exactly


def geometric_cases():
    return [
        ConcreteAugmentation(hflip=h, vflip=v, quarter_turns=t)
        for h in (False, True)
        for v in (False, True)
        for t in range(4)
    ]


def test_map_back_inverts_apply_geometric_2d_and_3d():
    rng = np.random.default_rng(41)
    flat = rng.integers(0, 255, size=(6, 6), dtype=np.uint8)
    deep = rng.integers(0, 255, size=(6, 6, 3), dtype=np.uint8)
    for aug in geometric_cases():
        for arr in (flat, deep):
            np.testing.assert_array_equal(map_back(apply_geometric(arr, aug), aug), arr)


def test_invert_geometric_composes_to_identity():
    probe = np.arange(36, dtype=np.int32).reshape(6, 6)
    for aug in geometric_cases():
        inv = invert_geometric(aug)
        np.testing.assert_array_equal(apply_geometric(apply_geometric(probe, aug), inv), probe)


def test_quarter_turn_on_rectangles_is_rejected():
    rect = np.zeros((4, 6), dtype=np.uint8)
    with pytest.raises(DataError):
        apply_geometric(rect, ConcreteAugmentation(quarter_turns=1))
    # even turns keep the shape and are allowed
    out = apply_geometric(rect, ConcreteAugmentation(quarter_turns=2))
    assert out.shape == rect.shape


# --------------------------------------------------------------------------
# Photometrics


def test_apply_contrast_brightness_formula():
    img = np.array([[10, 100], [200, 250]], dtype=np.uint8)
    aug = ConcreteAugmentation(alpha=1.5, beta=-20.0)
    out, _ = apply(img, None, aug)
    expected = np.clip(np.rint(1.5 * img.astype(np.float64) - 20.0), 0, 255).astype(np.uint8)
    np.testing.assert_array_equal(out, expected)


def test_apply_blur_matches_mean_oracle_in_interior():
    rng = np.random.default_rng(42)
    img = rng.integers(0, 255, size=(9, 9), dtype=np.uint8)
    out, _ = apply(img, None, ConcreteAugmentation(blur_kernel=3))
    # interior pixels are the rounded mean of their 3x3 neighborhood
    for y in range(1, 8):
        for x in range(1, 8):
            window = img[y - 1 : y + 2, x - 1 : x + 2].astype(np.float64)
            assert out[y, x] == int(np.clip(np.rint(window.mean()), 0, 255))


def test_apply_noise_is_bounded_and_seeded():
    img = np.full((8, 8), 128, dtype=np.uint8)
    aug = ConcreteAugmentation(noise_amp=10, seed=77)
    out1, _ = apply(img, None, aug)
    out2, _ = apply(img, None, aug)
    np.testing.assert_array_equal(out1, out2)
    deltas = out1.astype(np.int64) - 128
    assert deltas.min() >= -10 and deltas.max() <= 10
    assert np.any(deltas != 0)
    out3, _ = apply(img, None, ConcreteAugmentation(noise_amp=10, seed=78))
    assert np.any(out1 != out3)


def test_apply_moves_mask_geometrically_without_interpolation():
    img = np.zeros((4, 4), dtype=np.uint8)
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[0, 0] = 3
    aug = ConcreteAugmentation(hflip=True, alpha=1.3, beta=5.0, noise_amp=20, seed=1)
    _, out_mask = apply(img, mask, aug)
    assert out_mask[0, 3] == 3
    assert set(np.unique(out_mask)) == {0, 3}  # photometrics never touch the mask


def test_apply_requires_uint8():
    with pytest.raises(DataError):
        apply(np.zeros((4, 4), dtype=np.float32), None, IDENTITY)


def test_identity_augmentation_is_noop():
    rng = np.random.default_rng(43)
    img = rng.integers(0, 255, size=(5, 5, 3), dtype=np.uint8)
    mask = rng.integers(0, 4, size=(5, 5), dtype=np.uint8)
    out_img, out_mask = apply(img, mask, IDENTITY)
    np.testing.assert_array_equal(out_img, img)
    np.testing.assert_array_equal(out_mask, mask)


# --------------------------------------------------------------------------
# Schedules


def test_preset_schedules_load_and_ramp():
    for name in PRESET_SCHEDULES:
        sched = load_schedule(name)
        assert sched.name == name
        assert len(sched.specs) >= 5
        sched.spec_for(1)
        assert sched.spec_for(2) == sched.specs[1]
        with pytest.raises(DataError):
            sched.spec_for(0)
        with pytest.raises(DataError):
            sched.spec_for(len(sched.specs) + 1)


def test_schedule_from_json_file(tmp_path):
    p = tmp_path / "sched.json"
    p.write_text(
        '{"name": "mine", "generations": [{"max_noise": 3}, {"max_noise": 9, "hflip": true}]}',
        encoding="utf-8",
    )
    sched = load_schedule(str(p))
    assert sched.name == "mine"
    assert sched.spec_for(1).max_noise == 3
    assert sched.spec_for(2).hflip is True
    assert sched.max_strength == sched.specs[-1]


def test_schedule_load_errors(tmp_path):
    with pytest.raises(DataError):
        load_schedule("not-a-preset-or-file")
    bad = tmp_path / "bad.json"
    bad.write_text("{", encoding="utf-8")
    with pytest.raises(DataError):
        load_schedule(str(bad))
    empty = tmp_path / "empty.json"
    empty.write_text("[]", encoding="utf-8")
    with pytest.raises(DataError):
        load_schedule(str(empty))


# --------------------------------------------------------------------------
# ALD materialization


def test_build_ald_counts_and_determinism(tmp_path):
    root = tmp_path / "d"
    make_dataset(root, num_classes=3, n_train=6, n_val=1, ld_count=2, size=(16, 16))
    spec = AugmentationSpec(max_noise=10, hflip=True, vflip=True, rot90=True)
    ald = build_ald(root, spec, seed=3, variants=4)
    manifest = dio.load_manifest(root)
    ld = manifest.split("LD")
    assert len(ald) == len(ld) * (4 + 1)
    assert manifest.splits["ALD"] == sorted(ald)
    for rid in ld:
        for j in range(1, 5):
            vid = f"{rid}_a{j}"
            assert vid in ald
            assert dio.image_path(root, vid).is_file()
            assert dio.mask_paths(root, vid, manifest.mask_mode, manifest.num_classes)[0].is_file()
    # default variant count gives the 10x published ALD sizing
    assert ALD_VARIANTS == 9
    # re-running writes byte-identical augmented copies
    vid = f"{ld[0]}_a1"
    before = dio.image_path(root, vid).read_bytes()
    build_ald(root, spec, seed=3, variants=4)
    assert dio.image_path(root, vid).read_bytes() == before


def test_build_ald_requires_ld(tmp_path):
    root = tmp_path / "d"
    spec = AugmentationSpec()
    manifest = dio.DatasetManifest(
        name="t", image_shape=(8, 8, 3), mask_mode=dio.MULTICLASS, num_classes=1, splits={}
    )
    dio.save_manifest(root, manifest)
    with pytest.raises(DataError):
        build_ald(root, spec, seed=0)
