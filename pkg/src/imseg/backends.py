"""Training/prediction/scoring backends behind a uniform verb interface.

External backends are arbitrary executables addressed by command templates::

    train:   ... {cd_dir} {model_out} {alpha} {epochs} {batch} {steps_min} {seed}
    predict: ... {model_in} {input_dir} {output_dir}
    score:   ... {model_in} {pair_dir} {output_dir}

``predict`` must write one IMT1 float32 (H,W,C) tensor per input image into
{output_dir}, named ``<record-stem>.imt1``; ``score`` one scalar float32
tensor per pair. Builtin backends (``builtin:centroid``,
``builtin:noisy_oracle?p=0.2``) implement the same verbs in-process, without
subprocess spawning.
"""

from __future__ import annotations

import json
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from urllib.parse import parse_qsl

import numpy as np

from . import dataset_io
from .errors import BackendError, DataError
from .seeding import derive_seed
from .synth import (
    NoiseModel,
    corrupt_mask,
    load_centroid_model,
    noisy_oracle_predict,
    predict_centroid,
    train_centroid_model,
)

TENSOR_EXT = ".imt1"


def list_input_images(input_dir: Path | str) -> list[Path]:
    paths = sorted(Path(input_dir).glob("*.png"))
    if not paths:
        raise DataError(f"no PNG inputs under {input_dir}")
    return paths


def _pmap(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


class Backend:
    """Verb interface shared by builtin and subprocess backends."""

    def train(
        self,
        cd_dir: Path,
        model_out: Path,
        alpha: float,
        epochs: int,
        batch: int,
        steps_min: int,
        seed: int,
    ) -> Path:
        raise NotImplementedError

    def predict(self, model_in: Path, input_dir: Path, output_dir: Path) -> None:
        raise NotImplementedError

    def score(self, model_in: Path, pair_dir: Path, output_dir: Path) -> None:
        raise NotImplementedError


class CommandBackend(Backend):
    """Runs external commands from templates; nonzero exit raises BackendError."""

    def __init__(self, templates: dict[str, str]):
        unknown = set(templates) - {"train", "predict", "score"}
        if unknown:
            raise DataError(f"unknown backend verbs {sorted(unknown)}")
        if not templates:
            raise DataError("command backend needs at least one verb template")
        self.templates = dict(templates)

    def _run(self, verb: str, **subs) -> None:
        template = self.templates.get(verb)
        if not template:
            raise BackendError(f"backend defines no {verb!r} command")
        try:
            command = template.format(**subs)
        except (KeyError, IndexError) as exc:
            raise DataError(f"{verb} template {template!r}: bad placeholder {exc}") from exc
        proc = subprocess.run(
            shlex.split(command), capture_output=True, text=True, check=False
        )
        if proc.returncode != 0:
            tail = (proc.stderr or proc.stdout or "").strip()[-2000:]
            raise BackendError(
                f"{verb} command exited {proc.returncode}: {command}\n{tail}"
            )

    def train(self, cd_dir, model_out, alpha, epochs, batch, steps_min, seed):
        Path(model_out).parent.mkdir(parents=True, exist_ok=True)
        self._run(
            "train",
            cd_dir=cd_dir,
            model_out=model_out,
            alpha=alpha,
            epochs=epochs,
            batch=batch,
            steps_min=steps_min,
            seed=seed,
        )
        if not Path(model_out).is_file():
            raise BackendError(f"train finished but wrote no model at {model_out}")
        return Path(model_out)

    def predict(self, model_in, input_dir, output_dir):
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        self._run("predict", model_in=model_in, input_dir=input_dir, output_dir=output_dir)

    def score(self, model_in, pair_dir, output_dir):
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        self._run("score", model_in=model_in, pair_dir=pair_dir, output_dir=output_dir)


class CentroidBackend(Backend):
    """In-process mean-color learner (see synth.train_centroid_model)."""

    def __init__(self, bootstrap: float = 1.0, jobs: int = 1):
        if not 0.0 < bootstrap <= 1.0:
            raise DataError(f"bootstrap fraction must be in (0, 1], got {bootstrap}")
        self.bootstrap = bootstrap
        self.jobs = max(1, jobs)

    def train(self, cd_dir, model_out, alpha, epochs, batch, steps_min, seed):
        # alpha/epochs/batch/steps_min have no effect on a closed-form fit;
        # they are accepted to honor the verb signature.
        train_centroid_model(cd_dir, model_out, seed=seed, sample_frac=self.bootstrap)
        return Path(model_out)

    def predict(self, model_in, input_dir, output_dir):
        model = load_centroid_model(model_in)
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)

        def one(path: Path) -> None:
            probs = predict_centroid(model, dataset_io.read_image(path))
            dataset_io.write_tensor(output_dir / f"{path.stem}{TENSOR_EXT}", probs)

        _pmap(one, list_input_images(input_dir), self.jobs)

    def score(self, model_in, pair_dir, output_dir):
        raise BackendError("the centroid backend does not implement score")


class NoisyOracleBackend(Backend):
    """Ground-truth oracle corrupted by a noise model; a teacher with known error.

    Prediction looks the ground truth up in the source dataset by record stem,
    so it only works on datasets whose masks exist for the predicted split
    (synthetic fixtures provide them for every record).
    """

    def __init__(self, dataset_root: Path | str, noise: NoiseModel, jobs: int = 1):
        noise.validate()
        self.dataset_root = Path(dataset_root)
        self.manifest = dataset_io.load_manifest(self.dataset_root)
        self.noise = noise
        self.jobs = max(1, jobs)

    def train(self, cd_dir, model_out, alpha, epochs, batch, steps_min, seed):
        model_out = Path(model_out)
        model_out.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "kind": "noisy_oracle",
            "noise": {"kind": self.noise.kind, "p": self.noise.p, "kernel": self.noise.kernel},
            "model_seed": seed,
        }
        model_out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", "utf-8")
        return model_out

    def _load(self, model_in: Path) -> tuple[NoiseModel, int]:
        try:
            payload = json.loads(Path(model_in).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read oracle model {model_in}: {exc}") from exc
        if payload.get("kind") != "noisy_oracle":
            raise DataError(f"{model_in} is not a noisy_oracle model")
        n = payload["noise"]
        return NoiseModel(kind=n["kind"], p=n["p"], kernel=n["kernel"]), int(payload["model_seed"])

    def predict(self, model_in, input_dir, output_dir):
        noise, model_seed = self._load(model_in)
        manifest = self.manifest
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)

        def one(path: Path) -> None:
            rid = path.stem
            gt = dataset_io.read_mask(
                self.dataset_root, rid, manifest.mask_mode, manifest.num_classes
            )
            rec_seed = derive_seed(model_seed, rid)
            if manifest.mode == "multilabel":
                planes = [
                    np.where(
                        corrupt_mask(gt[:, :, c], noise, derive_seed(rec_seed, c), 1) > 0, 0.9, 0.1
                    )
                    for c in range(manifest.num_classes)
                ]
                probs = np.stack(planes, axis=-1).astype(np.float32)
            else:
                probs = noisy_oracle_predict(gt, noise, rec_seed, manifest.num_classes)
            dataset_io.write_tensor(output_dir / f"{rid}{TENSOR_EXT}", probs)

        _pmap(one, list_input_images(input_dir), self.jobs)

    def score(self, model_in, pair_dir, output_dir):
        raise BackendError("the noisy_oracle backend does not implement score")


def parse_backend(
    spec: str | dict, dataset_root: Path | str | None = None, jobs: int = 1
) -> Backend:
    """Instantiate a backend from a config value.

    Strings address builtins (``builtin:centroid[?bootstrap=f]``,
    ``builtin:noisy_oracle?p=0.2[&kind=...][&kernel=k]``); dicts are command
    templates for external processes.
    """
    if isinstance(spec, dict):
        return CommandBackend({k: str(v) for k, v in spec.items()})
    if not isinstance(spec, str) or not spec.startswith("builtin:"):
        raise DataError(f"backend spec must be builtin:<name> or a command dict, got {spec!r}")
    name, _, query = spec[len("builtin:") :].partition("?")
    params = dict(parse_qsl(query)) if query else {}

    def take(key: str, default, cast):
        raw = params.pop(key, None)
        if raw is None:
            return default
        try:
            return cast(raw)
        except ValueError as exc:
            raise DataError(f"bad backend parameter {key}={raw!r} in {spec!r}") from exc

    if name == "centroid":
        backend: Backend = CentroidBackend(bootstrap=take("bootstrap", 1.0, float), jobs=jobs)
    elif name == "noisy_oracle":
        if dataset_root is None:
            raise DataError("noisy_oracle backend needs the dataset root")
        noise = NoiseModel(
            kind=take("kind", "pixel_flip", str),
            p=take("p", 0.2, float),
            kernel=take("kernel", 3, int),
        )
        backend = NoisyOracleBackend(dataset_root, noise, jobs=jobs)
    else:
        raise DataError(f"unknown builtin backend {name!r}")
    if params:
        raise DataError(f"unknown backend parameters {sorted(params)} in {spec!r}")
    return backend


def read_prediction(
    output_dir: Path | str, rid: str, expected_shape: tuple[int, int, int]
) -> np.ndarray:
    """Read and validate one backend prediction tensor."""
    path = Path(output_dir) / f"{rid}{TENSOR_EXT}"
    if not path.is_file():
        raise BackendError(f"backend produced no prediction for {rid} at {path}")
    arr = dataset_io.read_tensor(path, expect_dtype=np.float32)
    if arr.shape != tuple(expected_shape):
        raise BackendError(
            f"{path}: prediction shape {arr.shape}, expected {tuple(expected_shape)}"
        )
    return arr
