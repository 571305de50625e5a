"""Synthetic fixtures: a deterministic scene generator, noisy oracle
predictors, and a minimal trainable learner.

The scene generator paints class-colored shapes on a dark background, so
classes are separable by color alone. The noisy oracle corrupts ground truth
with a configurable noise model and emits soft probabilities — a stand-in
teacher with a known error rate. The centroid learner fits per-class mean
colors from a combined dataset (IM pixels excluded) and predicts
softmax-of-distance probabilities — a real, if tiny, student.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import dataset_io
from .errors import DataError
from .pseudo_label import load_cd_descriptor
from .seeding import StableRng, derive_seed

# Well-separated palette: background first, then shape classes.
_PALETTE_RGB = [
    (25, 25, 28),
    (225, 70, 60),
    (65, 200, 80),
    (70, 100, 230),
    (235, 200, 60),
    (195, 75, 215),
    (65, 210, 210),
    (240, 145, 50),
    (150, 150, 150),
]
_PALETTE_GRAY = [20, 230, 120, 75, 180, 45, 205, 95, 150]


@dataclass(frozen=True)
class SceneSpec:
    """Geometry and label semantics of generated scenes.

    ``num_classes`` follows manifest semantics: 1 = binary (one shape class on
    background), C >= 2 = multiclass with classes 1..C-1 as shapes and 0 as
    background.
    """

    height: int = 64
    width: int = 64
    channels: int = 3
    num_classes: int = 1
    shapes_min: int = 1
    shapes_max: int = 3
    jitter: int = 6  # amplitude of per-pixel uniform texture noise

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise DataError("scenes must be at least 8x8")
        if self.channels not in (1, 3):
            raise DataError(f"channels must be 1 or 3, got {self.channels}")
        n_shape_classes = self.num_classes if self.num_classes == 1 else self.num_classes - 1
        palette = _PALETTE_RGB if self.channels == 3 else _PALETTE_GRAY
        if not 1 <= n_shape_classes <= len(palette) - 1:
            raise DataError(f"supports 1..{len(palette) - 1} shape classes, got {n_shape_classes}")
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise DataError("need 1 <= shapes_min <= shapes_max")
        if not 0 <= self.jitter <= 60:
            raise DataError(f"jitter must be in [0, 60], got {self.jitter}")

    def color(self, class_id: int) -> np.ndarray:
        palette = _PALETTE_RGB if self.channels == 3 else _PALETTE_GRAY
        return np.array(palette[class_id], dtype=np.float64)


def generate_scene(spec: SceneSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask): class-colored shapes over background, plus texture noise."""
    spec.validate()
    rng = StableRng(derive_seed("scene", seed))
    h, w = spec.height, spec.width
    n_shape_classes = 1 if spec.num_classes == 1 else spec.num_classes - 1
    mask = np.zeros((h, w), dtype=np.uint8)
    img_shape = (h, w, 3) if spec.channels == 3 else (h, w)
    image = np.broadcast_to(spec.color(0), img_shape).copy() if spec.channels == 3 else np.full(
        img_shape, spec.color(0), dtype=np.float64
    )
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.randint(spec.shapes_min, spec.shapes_max)):
        cls = rng.randint(1, n_shape_classes)
        cy, cx = rng.randint(0, h - 1), rng.randint(0, w - 1)
        ry = rng.randint(max(2, h // 8), max(3, h // 3))
        rx = rng.randint(max(2, w // 8), max(3, w // 3))
        if rng.coin():  # ellipse
            region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:  # rectangle
            region = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        mask[region] = cls
        image[region] = spec.color(cls)
    if spec.jitter:
        noise_rng = np.random.default_rng(derive_seed("scene-noise", seed))
        image = image + noise_rng.integers(-spec.jitter, spec.jitter + 1, size=img_shape)
    label = mask if spec.num_classes > 1 else (mask > 0).astype(np.uint8)
    return np.clip(image, 0, 255).astype(np.uint8), label


def generate_dataset(
    root: Path | str,
    spec: SceneSpec,
    n_train: int,
    n_val: int,
    n_test: int,
    seed: int,
    name: str = "synth",
) -> dataset_io.DatasetManifest:
    """Write a full synthetic dataset with FD/VAL/TEST splits and a manifest.

    Every record (including FD) gets a ground-truth mask, which lets oracle
    teachers and purity measurements work; LD/ULD are assigned later by
    ``split``.
    """
    spec.validate()
    if n_train < 1 or n_val < 0 or n_test < 0:
        raise DataError("need n_train >= 1 and non-negative n_val/n_test")
    root = Path(root)
    splits: dict[str, list[str]] = {"FD": [], "VAL": [], "TEST": []}
    total = n_train + n_val + n_test
    for idx in range(total):
        rid = f"img{idx:05d}"
        image, mask = generate_scene(spec, derive_seed(seed, "record", idx))
        dataset_io.write_image(dataset_io.image_path(root, rid), image)
        dataset_io.write_mask(root, rid, mask, dataset_io.MULTICLASS, max(spec.num_classes, 1))
        split = "FD" if idx < n_train else ("VAL" if idx < n_train + n_val else "TEST")
        splits[split].append(rid)
    manifest = dataset_io.DatasetManifest(
        name=name,
        image_shape=(spec.height, spec.width, spec.channels),
        mask_mode=dataset_io.MULTICLASS,
        num_classes=spec.num_classes,
        splits=splits,
    )
    dataset_io.save_manifest(root, manifest)
    return manifest


# --------------------------------------------------------------------------
# Noisy oracles


@dataclass(frozen=True)
class NoiseModel:
    """How an oracle corrupts ground truth before predicting."""

    kind: str = "pixel_flip"  # pixel_flip | class_confusion | boundary_jitter
    p: float = 0.2
    kernel: int = 3  # boundary_jitter window

    def validate(self) -> None:
        if self.kind not in ("pixel_flip", "class_confusion", "boundary_jitter"):
            raise DataError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise DataError(f"noise p must be in [0, 1], got {self.p}")
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise DataError(f"jitter kernel must be odd >= 3, got {self.kernel}")


def _soften(hard: np.ndarray, num_classes: int) -> np.ndarray:
    """Hard classes -> soft probabilities: winner 0.9, the rest share 0.1.

    Binary tasks (num_classes == 1) emit a single foreground channel of
    0.9/0.1; channels always sum to 1.
    """
    if num_classes == 1:
        return np.where(hard > 0, 0.9, 0.1).astype(np.float32)[..., None]
    loser = 0.1 / (num_classes - 1)
    probs = np.full(hard.shape + (num_classes,), loser, dtype=np.float32)
    np.put_along_axis(probs, hard[..., None].astype(np.int64), 0.9, axis=-1)
    return probs


def corrupt_mask(gt: np.ndarray, noise: NoiseModel, model_seed: int, num_classes: int) -> np.ndarray:
    """Apply a noise model to a ground-truth class mask (pure in its arguments)."""
    noise.validate()
    gt = np.asarray(gt)
    classes = max(num_classes, 2)  # binary masks live in {0,1}
    rng = np.random.default_rng(derive_seed("oracle", noise.kind, model_seed))
    flips = rng.random(gt.shape) < noise.p
    if noise.kind == "pixel_flip":
        # Uniform among the *other* classes; binary reduces to 0<->1.
        offset = rng.integers(1, classes, size=gt.shape)
        corrupted = (gt.astype(np.int64) + offset) % classes
    elif noise.kind == "class_confusion":
        corrupted = (gt.astype(np.int64) + 1) % classes
    else:  # boundary_jitter
        k = noise.kernel
        footprint = np.ones((k, k), dtype=bool)
        local_max = ndimage.maximum_filter(gt, footprint=footprint, mode="nearest")
        local_min = ndimage.minimum_filter(gt, footprint=footprint, mode="nearest")
        flips &= local_max != local_min
        h, w = gt.shape
        dy = rng.integers(-(k // 2), k // 2 + 1, size=gt.shape)
        dx = rng.integers(-(k // 2), k // 2 + 1, size=gt.shape)
        yy, xx = np.mgrid[0:h, 0:w]
        corrupted = gt[np.clip(yy + dy, 0, h - 1), np.clip(xx + dx, 0, w - 1)].astype(np.int64)
    return np.where(flips, corrupted, gt).astype(np.uint8)


def noisy_oracle_predict(
    gt: np.ndarray, noise: NoiseModel, model_seed: int, num_classes: int
) -> np.ndarray:
    """Corrupted soft prediction (H,W,C) float32 for a ground-truth mask."""
    return _soften(corrupt_mask(gt, noise, model_seed, num_classes), num_classes)


# --------------------------------------------------------------------------
# Centroid learner


_TAU = 20.0  # softmax temperature over color distances


def train_centroid_model(
    cd_dir: Path | str, model_out: Path | str, seed: int = 0, sample_frac: float = 1.0
) -> dict:
    """Fit per-class mean colors from a combined dataset and save as JSON.

    IM pixels never enter the statistics (multiclass CDs mark them as class 0,
    and every CD materializes im/ masks). A class with no retained pixels is
    recorded as unlearned and predicted as a uniform channel. ``sample_frac``
    < 1 fits on a seeded record subsample (used to diversify students);
    the default is deterministic in the data alone.
    """
    cd_dir = Path(cd_dir)
    desc = load_cd_descriptor(cd_dir)
    manifest = dataset_io.load_manifest(cd_dir)
    mode = manifest.mode
    ids = sorted(manifest.split("TRAIN"))
    if not ids:
        raise DataError(f"combined dataset {cd_dir} has no records")
    if not 0.0 < sample_frac <= 1.0:
        raise DataError(f"sample_frac must be in (0, 1], got {sample_frac}")
    if sample_frac < 1.0:
        keep = max(1, int(math.floor(sample_frac * len(ids))))
        ids = sorted(StableRng(derive_seed("centroid-sample", seed)).sample(ids, keep))

    channels = manifest.image_shape[2]
    if mode == "multilabel":
        n_groups, group_classes = manifest.num_classes, 2  # per-channel bg/fg
    elif mode == "binary":
        n_groups, group_classes = 1, 2
    else:
        n_groups, group_classes = 1, manifest.num_classes
    sums = np.zeros((n_groups, group_classes, channels), dtype=np.float64)
    counts = np.zeros((n_groups, group_classes), dtype=np.int64)

    for rid in ids:
        image = dataset_io.read_image(dataset_io.image_path(cd_dir, rid)).astype(np.float64)
        feats = image.reshape(image.shape[0], image.shape[1], channels)
        label = dataset_io.read_mask(
            cd_dir, rid, manifest.mask_mode, manifest.num_classes,
            remapped=bool(desc.get("im_remapped")),
        )
        im = dataset_io.read_im_mask(dataset_io.im_path(cd_dir, rid))
        retained = im == 0
        if mode == "multilabel":
            for ch in range(n_groups):
                for val in (0, 1):
                    sel = retained & ((label[:, :, ch] > 0) == bool(val))
                    sums[ch, val] += feats[sel].sum(axis=0)
                    counts[ch, val] += int(sel.sum())
        elif mode == "binary":
            for val in (0, 1):
                sel = retained & (label == val)
                sums[0, val] += feats[sel].sum(axis=0)
                counts[0, val] += int(sel.sum())
        else:
            for cls in range(group_classes):
                target = cls + 1 if desc.get("im_remapped") else cls
                sel = retained & (label == target)
                sums[0, cls] += feats[sel].sum(axis=0)
                counts[0, cls] += int(sel.sum())

    if counts.sum() == 0:
        raise DataError(f"no retained pixels in {cd_dir}; nothing to fit")
    centroids = [
        [
            (sums[g, c] / counts[g, c]).tolist() if counts[g, c] else None
            for c in range(group_classes)
        ]
        for g in range(n_groups)
    ]
    model = {
        "kind": "centroid",
        "mode": mode,
        "num_classes": manifest.num_classes,
        "channels": channels,
        "tau": _TAU,
        "centroids": centroids,
        "seed": seed,
        "sample_frac": sample_frac,
    }
    model_out = Path(model_out)
    model_out.parent.mkdir(parents=True, exist_ok=True)
    model_out.write_text(json.dumps(model, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return model


def load_centroid_model(path: Path | str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing model file {path}")
    try:
        model = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if model.get("kind") != "centroid":
        raise DataError(f"{path}: not a centroid model")
    return model


def _group_probs(feats: np.ndarray, centroids: list, tau: float) -> np.ndarray:
    """Softmax over negative color distances; unlearned classes get 1/n each."""
    n = len(centroids)
    h, w, _ = feats.shape
    learned = [i for i, c in enumerate(centroids) if c is not None]
    probs = np.full((h, w, n), 1.0 / n, dtype=np.float64)
    if not learned:
        return probs
    logits = np.stack(
        [
            -np.linalg.norm(feats - np.asarray(centroids[i], dtype=np.float64), axis=-1) / tau
            for i in learned
        ],
        axis=-1,
    )
    logits -= logits.max(axis=-1, keepdims=True)
    soft = np.exp(logits)
    soft /= soft.sum(axis=-1, keepdims=True)
    budget = 1.0 - (n - len(learned)) / n  # uniform share reserved per unlearned class
    for j, i in enumerate(learned):
        probs[:, :, i] = soft[:, :, j] * budget
    return probs


def predict_centroid(model: dict, image: np.ndarray) -> np.ndarray:
    """(H,W,C) float32 probabilities for one image under a centroid model."""
    channels = int(model["channels"])
    image = np.asarray(image).astype(np.float64)
    if (image.ndim == 2 and channels != 1) or (image.ndim == 3 and image.shape[2] != channels):
        raise DataError(f"image channels do not match model ({channels})")
    feats = image.reshape(image.shape[0], image.shape[1], channels)
    tau = float(model["tau"])
    mode = model["mode"]
    if mode == "multilabel":
        planes = [
            _group_probs(feats, group, tau)[:, :, 1] for group in model["centroids"]
        ]
        return np.stack(planes, axis=-1).astype(np.float32)
    probs = _group_probs(feats, model["centroids"][0], tau)
    if mode == "binary":
        return probs[:, :, 1:2].astype(np.float32)
    return probs.astype(np.float32)
