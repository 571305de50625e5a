"""Training verb: separability, determinism, masking semantics, failure exits."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest
from conftest import held_out_scenes, make_cd, miou, pixlog_cli, scene, write_manifests, write_record
from PIL import Image

from pixlog import Model, PixlogError, fit, load_cd


def test_separable_cd_reaches_high_miou(tmp_path):
    cd = tmp_path / "cd"
    make_cd(cd, mode="multiclass", n=10, size=32, seed=0)
    out = tmp_path / "seg.model"
    proc = pixlog_cli(
        "train", "--cd", cd, "--out", out, "--epochs", "12", "--batch", "8", "--seed", "1"
    )
    assert proc.returncode == 0, proc.stderr
    model = Model.load(out)
    scores = [
        miou(model.hard_mask(model.predict_probs(img)), gt, 3)
        for img, gt in held_out_scenes(12, size=32)
    ]
    assert float(np.mean(scores)) > 0.8


def test_same_seed_identical_model_bytes(tmp_path):
    cd = tmp_path / "cd"
    make_cd(cd, n=6, seed=3)
    outs = [tmp_path / f"m{i}.model" for i in range(3)]
    for out, seed in zip(outs, ("7", "7", "8")):
        proc = pixlog_cli("train", "--cd", cd, "--out", out, "--epochs", "3", "--seed", seed)
        assert proc.returncode == 0, proc.stderr
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert outs[0].read_bytes() != outs[2].read_bytes()


def test_empty_cd_exits_2(tmp_path):
    cd = tmp_path / "cd"
    cd.mkdir()
    write_manifests(cd, [], "multiclass", 3, 24)
    proc = pixlog_cli("train", "--cd", cd, "--out", tmp_path / "m.model")
    assert proc.returncode == 2
    assert "no records" in proc.stderr


def test_malformed_cd_exits_2(tmp_path):
    cd = tmp_path / "cd"
    make_cd(cd, n=2)
    (cd / "cd_manifest.json").unlink()
    proc = pixlog_cli("train", "--cd", cd, "--out", tmp_path / "m.model")
    assert proc.returncode == 2
    assert "cd_manifest.json" in proc.stderr

    (cd / "manifest.json").unlink()
    proc = pixlog_cli("train", "--cd", cd, "--out", tmp_path / "m.model")
    assert proc.returncode == 2


def test_fully_masked_cd_exits_2(tmp_path):
    cd = tmp_path / "cd"
    rng = np.random.default_rng(0)
    ids = []
    for i in range(3):
        rid = f"r{i}"
        ids.append(rid)
        image, gt = scene(rng)
        write_record(cd, rid, image, gt, "multiclass", 3, im=np.ones(gt.shape, np.uint8))
    write_manifests(cd, ids, "multiclass", 3, 24)
    proc = pixlog_cli("train", "--cd", cd, "--out", tmp_path / "m.model")
    assert proc.returncode == 2
    assert "retained" in proc.stderr


def test_masked_regions_carry_zero_weight(tmp_path):
    """Changing image content strictly inside a masked block changes nothing.

    The block's one-pixel border stays black in both variants, so every
    retained pixel's 3x3 feature window reads identical values; only pixels
    with zero training weight differ. Identical model bytes prove the
    masked region truly contributes nothing.
    """
    blocks = [(6, 14), (4, 16)]
    models = []
    for variant, fill in enumerate((0, 255)):
        cd = tmp_path / f"cd{variant}"
        ids = []
        rng_v = np.random.default_rng(5)
        for i, (lo, hi) in enumerate(blocks):
            rid = f"r{i}"
            ids.append(rid)
            image, gt = scene(rng_v)
            im = np.zeros(gt.shape, np.uint8)
            im[lo:hi, lo:hi] = 1
            write_record(cd, rid, image, gt, "multiclass", 3, im=im)
            # Repaint the block interior after the fact; write_record blacked it.
            img_path = cd / "images" / f"{rid}.png"
            arr = np.asarray(Image.open(img_path)).copy()
            arr[lo + 1 : hi - 1, lo + 1 : hi - 1] = fill
            Image.fromarray(arr).save(img_path, format="PNG")
        write_manifests(cd, ids, "multiclass", 3, 24)
        out = tmp_path / f"m{variant}.model"
        proc = pixlog_cli("train", "--cd", cd, "--out", out, "--epochs", "4", "--seed", "2")
        assert proc.returncode == 0, proc.stderr
        models.append(out.read_bytes())
    assert models[0] == models[1]


def test_steps_per_epoch_floor(tmp_path):
    cd_dir = tmp_path / "cd"
    make_cd(cd_dir, n=8, seed=1)
    cd = load_cd(cd_dir)
    plain = fit(cd, epochs=2, batch=8, steps_min=0, seed=0)
    assert plain.training["steps_per_epoch"] == math.ceil(8 / 8)
    floored = fit(cd, epochs=2, batch=8, steps_min=5, seed=0)
    assert floored.training["steps_per_epoch"] == 5
    assert floored.training["total_steps"] == 10

    out = tmp_path / "m.model"
    proc = pixlog_cli(
        "train", "--cd", cd_dir, "--out", out, "--epochs", "2", "--batch", "8",
        "--steps-min", "5", "--seed", "0",
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(out.read_text())["training"]["steps_per_epoch"] == 5


def test_alpha_recorded_without_effect(tmp_path):
    make_cd(tmp_path / "cd", n=4, seed=2)
    cd = load_cd(tmp_path / "cd")
    narrow = fit(cd, alpha=1.0, epochs=2, seed=4)
    wide = fit(cd, alpha=2.0, epochs=2, seed=4)
    assert wide.alpha == 2.0
    np.testing.assert_array_equal(narrow.weights, wide.weights)


def test_binary_cd_trains_and_predicts_single_channel(tmp_path):
    cd_dir = tmp_path / "cd"
    make_cd(cd_dir, mode="binary", n=8, size=24, seed=6)
    model = fit(load_cd(cd_dir), epochs=10, seed=0)
    assert model.mode == "binary"
    assert model.num_classes == 1
    img, gt = held_out_scenes(1, size=24, fg_classes=1, seed=42)[0]
    probs = model.predict_probs(img)
    assert probs.shape == (24, 24, 1)
    assert probs.dtype == np.float32
    assert float(probs.min()) >= 0.0 and float(probs.max()) <= 1.0
    pred = model.hard_mask(probs)
    assert miou(pred, gt, 2) > 0.8


def test_multilabel_cd_trains_per_channel(tmp_path):
    cd_dir = tmp_path / "cd"
    make_cd(cd_dir, mode="multilabel", n=8, size=24, seed=7)
    model = fit(load_cd(cd_dir), epochs=10, seed=0)
    assert model.mode == "multilabel"
    img, gt = held_out_scenes(1, size=24, fg_classes=2, seed=43)[0]
    probs = model.predict_probs(img)
    assert probs.shape == (24, 24, 2)
    assert float(probs.min()) >= 0.0 and float(probs.max()) <= 1.0
    pred = model.hard_mask(probs)
    for k in range(2):
        target = (gt == k + 1).astype(np.uint8)
        assert miou(pred[:, :, k], target, 2) > 0.8


def test_fit_rejects_bad_hyperparameters(tmp_path):
    make_cd(tmp_path / "cd", n=2)
    cd = load_cd(tmp_path / "cd")
    with pytest.raises(PixlogError, match="epochs"):
        fit(cd, epochs=0)
    with pytest.raises(PixlogError, match="batch"):
        fit(cd, batch=0)
    with pytest.raises(PixlogError, match="steps_min"):
        fit(cd, steps_min=-1)
