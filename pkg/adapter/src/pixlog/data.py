"""Readers for the file layouts the training pipeline exchanges.

A combined dataset (CD) directory holds::

    manifest.json        name, image_shape, mask_mode, num_classes, splits
    cd_manifest.json     composition descriptor (carries ``im_remapped``)
    images/<id>.png      uint8 grayscale or RGB
    masks/<id>.png       binary {0,1} or multiclass small ints
    masks/<id>.c<k>.png  multilabel: one {0,255} plane per channel
    im/<id>.png          {0,255} inconsistency mask

Records are the manifest's TRAIN split. Pixels whose im/ value is nonzero
carry no training signal; remapped multiclass masks additionally reserve
value 0 for those pixels and store class k as k+1. Binary masks stay {0,1},
so the im/ file is their only exclusion channel.

Score pairs are a bare ``images/`` + ``masks/`` tree in the raw label space
(no manifest, no shift, no im/ channel).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import PixlogError

MULTICLASS = "multiclass"
MULTILABEL = "multilabel"


def mode_of(mask_mode: str, num_classes: int) -> str:
    """Effective label mode: multiclass with one declared class is binary."""
    if mask_mode not in (MULTICLASS, MULTILABEL):
        raise PixlogError(f"unknown mask_mode {mask_mode!r}")
    if mask_mode == MULTICLASS and num_classes == 1:
        return "binary"
    return mask_mode


def read_json(path: Path) -> dict:
    if not path.is_file():
        raise PixlogError(f"missing {path}")
    try:
        payload = json.loads(path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PixlogError(f"cannot read {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise PixlogError(f"{path}: expected a JSON object")
    return payload


def read_image(path: Path) -> np.ndarray:
    if not path.is_file():
        raise PixlogError(f"missing image {path}")
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.dtype != np.uint8 or arr.ndim not in (2, 3):
        raise PixlogError(f"{path}: expected 8-bit grayscale or RGB")
    return arr


def _read_plane(path: Path) -> np.ndarray:
    if not path.is_file():
        raise PixlogError(f"missing mask {path}")
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise PixlogError(f"{path}: masks must be single-plane PNGs")
    return arr.astype(np.uint8)


def read_raw_mask(root: Path, rid: str, mode: str, num_classes: int) -> np.ndarray:
    """A record's mask in the raw label space: (H,W) ids or (H,W,C) {0,1}."""
    if mode == MULTILABEL:
        planes = [
            (_read_plane(root / "masks" / f"{rid}.c{k}.png") > 0).astype(np.uint8)
            for k in range(num_classes)
        ]
        return np.stack(planes, axis=-1)
    arr = _read_plane(root / "masks" / f"{rid}.png")
    limit = 2 if mode == "binary" else num_classes
    top = int(arr.max(initial=0))
    if top >= limit:
        raise PixlogError(f"{root / 'masks'}/{rid}.png: value {top} outside [0, {limit - 1}]")
    return arr


@dataclass(frozen=True)
class CdRecord:
    """One training record: image, raw-space target, and the retained pixels."""

    rid: str
    image: np.ndarray
    target: np.ndarray
    retained: np.ndarray


@dataclass(frozen=True)
class CombinedData:
    mode: str
    num_classes: int
    image_shape: tuple[int, int, int]
    records: list[CdRecord]


def load_cd(cd_dir: Path | str) -> CombinedData:
    """Load a combined dataset for training; raises on any malformation."""
    cd_dir = Path(cd_dir)
    manifest = read_json(cd_dir / "manifest.json")
    descriptor = read_json(cd_dir / "cd_manifest.json")
    try:
        mask_mode = str(manifest["mask_mode"])
        num_classes = int(manifest["num_classes"])
        image_shape = tuple(int(x) for x in manifest["image_shape"])
        ids = [str(i) for i in manifest["splits"]["TRAIN"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise PixlogError(f"malformed manifest in {cd_dir}: {exc}") from exc
    if num_classes < 1:
        raise PixlogError(f"{cd_dir}: num_classes must be >= 1, got {num_classes}")
    mode = mode_of(mask_mode, num_classes)
    if not ids:
        raise PixlogError(f"combined dataset {cd_dir} has no records")
    remapped = bool(descriptor.get("im_remapped"))

    records: list[CdRecord] = []
    for rid in sorted(ids):
        image = read_image(cd_dir / "images" / f"{rid}.png")
        im = _read_plane(cd_dir / "im" / f"{rid}.png")
        if im.shape != image.shape[:2]:
            raise PixlogError(f"{cd_dir}: {rid} image {image.shape} vs im {im.shape}")
        retained = im == 0
        if mode == MULTICLASS and remapped:
            label = _read_plane(cd_dir / "masks" / f"{rid}.png")
            top = int(label.max(initial=0))
            if top > num_classes:
                raise PixlogError(
                    f"{cd_dir}: {rid} remapped value {top} outside [0, {num_classes}]"
                )
            retained = retained & (label > 0)
            target = np.where(label > 0, label.astype(np.int64) - 1, 0)
        else:
            target = read_raw_mask(cd_dir, rid, mode, num_classes)
        if target.shape[:2] != image.shape[:2]:
            raise PixlogError(f"{cd_dir}: {rid} image {image.shape} vs mask {target.shape}")
        records.append(CdRecord(rid=rid, image=image, target=target, retained=retained))
    return CombinedData(
        mode=mode, num_classes=num_classes, image_shape=image_shape, records=records
    )


def list_images(directory: Path | str) -> list[Path]:
    """Sorted PNG inputs of a prediction or pair directory; empty is an error."""
    directory = Path(directory)
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise PixlogError(f"no PNG inputs under {directory}")
    return paths


def load_pairs(
    pair_dir: Path | str, mode: str, num_classes: int
) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """(rid, image, raw-space candidate mask) for every pair, sorted by rid."""
    pair_dir = Path(pair_dir)
    pairs = []
    for img_path in list_images(pair_dir / "images"):
        rid = img_path.stem
        image = read_image(img_path)
        mask = read_raw_mask(pair_dir, rid, mode, num_classes)
        if mask.shape[:2] != image.shape[:2]:
            raise PixlogError(f"pair {rid}: image {image.shape} vs mask {mask.shape}")
        pairs.append((rid, image, mask))
    return pairs
