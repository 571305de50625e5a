"""Backend parsing, the subprocess verb protocol, and builtin backends."""

import json
import os
import stat
import sys
from pathlib import Path

import numpy as np
import pytest

from imseg import dataset_io as dio
from imseg.backends import (
    TENSOR_EXT,
    CentroidBackend,
    CommandBackend,
    NoisyOracleBackend,
    list_input_images,
    parse_backend,
    read_prediction,
)
from imseg.errors import BackendError, DataError
from imseg.pseudo_label import Approach, build_cd
from imseg.seeding import derive_seed
from imseg.synth import NoiseModel, noisy_oracle_predict

from conftest import make_dataset


# --------------------------------------------------------------------------
# Helpers


def make_cd(tmp_path, num_classes=3):
    root = tmp_path / "data"
    manifest = make_dataset(root, num_classes=num_classes, n_train=8, n_val=2, ld_count=3)
    cd_dir = tmp_path / "cd"
    build_cd(cd_dir, root, manifest, Approach.LDT, 1, pairs=[], seed=0)
    return root, manifest, cd_dir


def script(tmp_path, name, body):
    path = tmp_path / name
    path.write_text(f"#!{sys.executable}\n{body}", encoding="utf-8")
    path.chmod(path.stat().st_mode | stat.S_IEXEC)
    return path


# --------------------------------------------------------------------------
# parse_backend


def test_parse_builtin_centroid_with_params():
    backend = parse_backend("builtin:centroid")
    assert isinstance(backend, CentroidBackend) and backend.bootstrap == 1.0
    assert parse_backend("builtin:centroid?bootstrap=0.5").bootstrap == 0.5


def test_parse_builtin_noisy_oracle(tmp_path):
    root = tmp_path / "data"
    make_dataset(root, num_classes=1, n_train=4, n_val=1, ld_count=2)
    backend = parse_backend("builtin:noisy_oracle?p=0.3&kind=pixel_flip", dataset_root=root)
    assert isinstance(backend, NoisyOracleBackend)
    assert backend.noise.p == 0.3
    with pytest.raises(DataError):
        parse_backend("builtin:noisy_oracle?p=0.3")  # needs the dataset root


def test_parse_backend_error_taxonomy(tmp_path):
    root = tmp_path / "data"
    make_dataset(root, num_classes=1, n_train=4, n_val=1, ld_count=2)
    with pytest.raises(DataError):
        parse_backend("builtin:unknown")
    with pytest.raises(DataError):
        parse_backend("not-a-spec")
    with pytest.raises(DataError):
        parse_backend(42)
    with pytest.raises(DataError):
        parse_backend("builtin:centroid?bootstrap=big")
    with pytest.raises(DataError):
        parse_backend("builtin:centroid?unknown=1")
    with pytest.raises(DataError):
        parse_backend("builtin:noisy_oracle?p=0.2&extra=x", dataset_root=root)


def test_parse_command_backend_dict():
    backend = parse_backend({"train": "tool train {cd_dir} {model_out}", "predict": "tool p"})
    assert isinstance(backend, CommandBackend)
    with pytest.raises(DataError):
        parse_backend({"train": "x", "deploy": "y"})
    with pytest.raises(DataError):
        parse_backend({})


# --------------------------------------------------------------------------
# CommandBackend subprocess protocol


def test_command_backend_train_substitutes_and_checks_model(tmp_path):
    trainer = script(
        tmp_path,
        "trainer.py",
        "import sys, pathlib\n"
        "cd, out, alpha, epochs, batch, steps, seed = sys.argv[1:8]\n"
        "pathlib.Path(out).write_text(' '.join([cd, alpha, epochs, batch, steps, seed]))\n",
    )
    backend = CommandBackend(
        {"train": f"{trainer} {{cd_dir}} {{model_out}} {{alpha}} {{epochs}} {{batch}} {{steps_min}} {{seed}}"}
    )
    model = tmp_path / "out" / "m.bin"
    got = backend.train(tmp_path / "cd", model, 1.5, 50, 32, 7, 99)
    assert got == model
    assert model.read_text().split() == [str(tmp_path / "cd"), "1.5", "50", "32", "7", "99"]


def test_command_backend_nonzero_exit_raises_backend_error(tmp_path):
    failing = script(tmp_path, "fail.py", "import sys\nsys.stderr.write('boom')\nsys.exit(5)\n")
    backend = CommandBackend({"predict": f"{failing} {{model_in}} {{input_dir}} {{output_dir}}"})
    with pytest.raises(BackendError, match="boom"):
        backend.predict(tmp_path / "m", tmp_path / "in", tmp_path / "out")


def test_command_backend_train_without_model_file_is_an_error(tmp_path):
    noop = script(tmp_path, "noop.py", "pass\n")
    backend = CommandBackend({"train": f"{noop} {{cd_dir}} {{model_out}}"})
    with pytest.raises(BackendError, match="no model"):
        backend.train(tmp_path / "cd", tmp_path / "m.bin", 1.0, 1, 1, 0, 0)


def test_command_backend_bad_template_placeholder(tmp_path):
    backend = CommandBackend({"train": "tool {nonexistent}"})
    with pytest.raises(DataError):
        backend.train(tmp_path / "cd", tmp_path / "m", 1.0, 1, 1, 0, 0)


def test_command_backend_missing_verb(tmp_path):
    backend = CommandBackend({"train": "tool {cd_dir} {model_out}"})
    with pytest.raises(BackendError):
        backend.predict(tmp_path / "m", tmp_path / "in", tmp_path / "out")


# --------------------------------------------------------------------------
# Builtin backends end-to-end


def test_centroid_backend_train_predict_roundtrip(tmp_path):
    root, manifest, cd_dir = make_cd(tmp_path)
    backend = CentroidBackend()
    model = backend.train(cd_dir, tmp_path / "m.json", 1.0, 50, 32, 0, 0)
    input_dir = root / "images"
    out_dir = tmp_path / "preds"
    backend.predict(model, input_dir, out_dir)
    h, w, _ = manifest.image_shape
    for path in list_input_images(input_dir):
        pred = read_prediction(out_dir, path.stem, (h, w, manifest.num_classes))
        np.testing.assert_allclose(pred.sum(axis=-1), 1.0, atol=1e-5)
    with pytest.raises(BackendError):
        backend.score(model, tmp_path, tmp_path)


def test_centroid_backend_validates_bootstrap():
    with pytest.raises(DataError):
        CentroidBackend(bootstrap=0.0)
    with pytest.raises(DataError):
        CentroidBackend(bootstrap=1.5)


def test_noisy_oracle_backend_reproduces_closed_form(tmp_path):
    root = tmp_path / "data"
    manifest = make_dataset(root, num_classes=3, n_train=6, n_val=1, ld_count=2)
    backend = NoisyOracleBackend(root, NoiseModel(p=0.25), jobs=1)
    model = backend.train(None, tmp_path / "oracle.json", 1.0, 1, 1, 0, seed=42)
    payload = json.loads(model.read_text())
    assert payload == {
        "kind": "noisy_oracle",
        "model_seed": 42,
        "noise": {"kind": "pixel_flip", "kernel": 3, "p": 0.25},
    }
    out_dir = tmp_path / "preds"
    backend.predict(model, root / "images", out_dir)
    rid = manifest.split("FD")[0]
    gt = dio.read_mask(root, rid, manifest.mask_mode, manifest.num_classes)
    expected = noisy_oracle_predict(gt, NoiseModel(p=0.25), derive_seed(42, rid), 3)
    got = read_prediction(out_dir, rid, expected.shape)
    np.testing.assert_array_equal(got, expected)


def test_noisy_oracle_backend_model_seed_changes_predictions(tmp_path):
    root = tmp_path / "data"
    make_dataset(root, num_classes=1, n_train=4, n_val=1, ld_count=2)
    backend = NoisyOracleBackend(root, NoiseModel(p=0.4))
    m1 = backend.train(None, tmp_path / "o1.json", 1.0, 1, 1, 0, seed=1)
    m2 = backend.train(None, tmp_path / "o2.json", 1.0, 1, 1, 0, seed=2)
    backend.predict(m1, root / "images", tmp_path / "p1")
    backend.predict(m2, root / "images", tmp_path / "p2")
    tensors1 = sorted((tmp_path / "p1").glob(f"*{TENSOR_EXT}"))
    assert tensors1
    assert any(
        (tmp_path / "p1" / t.name).read_bytes() != (tmp_path / "p2" / t.name).read_bytes()
        for t in tensors1
    )


def test_noisy_oracle_rejects_foreign_model(tmp_path):
    root = tmp_path / "data"
    make_dataset(root, num_classes=1, n_train=4, n_val=1, ld_count=2)
    backend = NoisyOracleBackend(root, NoiseModel())
    bad = tmp_path / "m.json"
    bad.write_text('{"kind": "other"}', encoding="utf-8")
    with pytest.raises(DataError):
        backend.predict(bad, root / "images", tmp_path / "out")


# --------------------------------------------------------------------------
# Prediction IO


def test_list_input_images_sorted_and_nonempty(tmp_path):
    with pytest.raises(DataError):
        list_input_images(tmp_path)
    for name in ("b.png", "a.png", "c.txt"):
        (tmp_path / name).write_bytes(b"x")
    assert [p.name for p in list_input_images(tmp_path)] == ["a.png", "b.png"]


def test_read_prediction_errors(tmp_path):
    with pytest.raises(BackendError):
        read_prediction(tmp_path, "r1", (2, 2, 1))
    dio.write_tensor(tmp_path / f"r1{TENSOR_EXT}", np.zeros((2, 2, 2), dtype=np.float32))
    with pytest.raises(BackendError):
        read_prediction(tmp_path, "r1", (2, 2, 1))
    dio.write_tensor(tmp_path / f"r2{TENSOR_EXT}", np.zeros((2, 2, 1), dtype=np.uint8))
    with pytest.raises(DataError):
        read_prediction(tmp_path, "r2", (2, 2, 1))  # wrong dtype
    dio.write_tensor(tmp_path / f"r3{TENSOR_EXT}", np.zeros((2, 2, 1), dtype=np.float32))
    out = read_prediction(tmp_path, "r3", (2, 2, 1))
    assert out.shape == (2, 2, 1)
