"""Shared fixtures: small synthetic datasets and random-mask generators."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from imseg import dataset_io, synth


def make_dataset(
    root: Path,
    *,
    num_classes: int = 3,
    size: tuple[int, int] = (24, 24),
    n_train: int = 12,
    n_val: int = 4,
    n_test: int = 0,
    ld_count: int = 4,
    seed: int = 11,
    channels: int = 3,
) -> dataset_io.DatasetManifest:
    """Generate a synthetic dataset on disk and carve FD into LD/ULD."""
    spec = synth.SceneSpec(
        height=size[0],
        width=size[1],
        channels=channels,
        num_classes=num_classes,
        shapes_min=1,
        shapes_max=3,
        jitter=4,
    )
    synth.generate_dataset(root, spec, n_train, n_val, n_test, seed=seed)
    return dataset_io.apply_split(root, ld_count, seed=seed)


@pytest.fixture
def multiclass_dataset(tmp_path):
    root = tmp_path / "data"
    manifest = make_dataset(root, num_classes=3)
    return root, manifest


@pytest.fixture
def binary_dataset(tmp_path):
    root = tmp_path / "data"
    manifest = make_dataset(root, num_classes=1)
    return root, manifest


def random_binary_masks(rng: np.random.Generator, n: int, h: int, w: int) -> list[np.ndarray]:
    return [(rng.random((h, w)) < rng.uniform(0.2, 0.8)).astype(np.uint8) for _ in range(n)]


def random_class_masks(
    rng: np.random.Generator, n: int, h: int, w: int, num_classes: int
) -> list[np.ndarray]:
    return [rng.integers(0, num_classes, size=(h, w)).astype(np.uint8) for _ in range(n)]
