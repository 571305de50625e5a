"""Shared helpers: hand-built combined datasets with separable class colors.

Everything here writes the CD layout directly (PNGs plus the two manifest
files), so the unit suite exercises this package's own readers and trainer
in isolation; only the protocol conformance module drives the real pipeline.
Class colors sit far apart per channel, making the data separable by
construction for a per-pixel color model.
"""

from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
from PIL import Image

PALETTE = {0: (25, 25, 28), 1: (220, 40, 40), 2: (40, 200, 60)}
NOISE = 8


def scene(rng: np.random.Generator, size: int = 24, fg_classes: int = 2):
    """One synthetic scene: colored rectangles on a dark background."""
    gt = np.zeros((size, size), np.uint8)
    for k in range(1, fg_classes + 1):
        h, w = rng.integers(size // 4, size // 2, 2)
        y, x = rng.integers(0, size - h), rng.integers(0, size - w)
        gt[y : y + h, x : x + w] = k
    img = np.zeros((size, size, 3), np.int16)
    for k, color in PALETTE.items():
        img[gt == k] = color
    img = img + rng.integers(-NOISE, NOISE + 1, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8), gt


def held_out_scenes(n: int, size: int = 24, fg_classes: int = 2, seed: int = 99):
    rng = np.random.default_rng(seed)
    return [scene(rng, size, fg_classes) for _ in range(n)]


def save_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path, format="PNG")


def write_manifests(
    root: Path, ids: list[str], mask_mode: str, num_classes: int, size: int
) -> None:
    (root / "manifest.json").write_text(
        json.dumps(
            {
                "format_version": 1,
                "name": "fixture",
                "image_shape": [size, size, 3],
                "mask_mode": mask_mode,
                "num_classes": num_classes,
                "class_names": None,
                "splits": {"TRAIN": ids},
            },
            indent=2,
        )
    )
    remapped = mask_mode == "multiclass" and num_classes > 1
    (root / "cd_manifest.json").write_text(
        json.dumps(
            {
                "format_version": 1,
                "im_remapped": remapped,
                "counts": {"base": len(ids), "pseudo": 0, "pseudo_augmented": 0},
            },
            indent=2,
        )
    )


def write_record(
    root: Path,
    rid: str,
    image: np.ndarray,
    gt: np.ndarray,
    mode: str,
    num_classes: int,
    im: np.ndarray | None = None,
) -> None:
    """Write one CD record from raw-space ground truth, applying the IM rules."""
    if im is None:
        im = np.zeros(gt.shape[:2], np.uint8)
    masked = im > 0
    img = image.copy()
    img[masked] = 0
    save_png(root / "images" / f"{rid}.png", img)
    save_png(root / "im" / f"{rid}.png", masked.astype(np.uint8) * 255)
    if mode == "multilabel":
        for k in range(num_classes):
            plane = np.where(masked, 0, (gt == k + 1).astype(np.uint8) * 255)
            save_png(root / "masks" / f"{rid}.c{k}.png", plane)
    elif mode == "binary":
        save_png(root / "masks" / f"{rid}.png", np.where(masked, 0, (gt > 0).astype(np.uint8)))
    else:
        save_png(root / "masks" / f"{rid}.png", np.where(masked, 0, gt.astype(np.uint16) + 1))


def make_cd(
    root: Path,
    mode: str = "multiclass",
    n: int = 10,
    size: int = 24,
    seed: int = 0,
) -> list[str]:
    """A complete separable CD; returns its record ids."""
    fg = 1 if mode == "binary" else 2
    num_classes = {"binary": 1, "multiclass": 3, "multilabel": 2}[mode]
    mask_mode = "multilabel" if mode == "multilabel" else "multiclass"
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(n):
        rid = f"r{i:03d}"
        ids.append(rid)
        image, gt = scene(rng, size, fg)
        write_record(root, rid, image, gt, mode, num_classes)
    write_manifests(root, ids, mask_mode, num_classes, size)
    return ids


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Counting mIoU over the classes present in the ground truth."""
    scores = []
    for c in range(num_classes):
        p, g = pred == c, gt == c
        union = np.count_nonzero(p | g)
        if np.count_nonzero(g) == 0:
            continue
        scores.append(np.count_nonzero(p & g) / union)
    return float(np.mean(scores)) if scores else 1.0


def pixlog_cli(*args: str) -> subprocess.CompletedProcess:
    return subprocess.run(
        [sys.executable, "-m", "pixlog", *[str(a) for a in args]],
        capture_output=True,
        text=True,
        check=False,
    )
