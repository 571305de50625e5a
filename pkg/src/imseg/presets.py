"""Published per-dataset defaults: split sizes, label semantics, width-ramp
endpoints and tier benchmark scores.

Note the isic2018 row's published LD + ULD (259 + 2332 = 2591) does not add
up to its FD count (2594); the counts are kept as published. Runs always
derive ULD = FD minus LD, so per-run splits reconcile regardless.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DataError


@dataclass(frozen=True)
class DatasetPreset:
    name: str
    image_shape: tuple[int, int, int]
    mask_mode: str
    num_classes: int
    counts: dict[str, int]  # published FD/LD/ALD/ULD/VAL/TEST sizes
    alpha: tuple[float, float]  # width ramp endpoints (start, end)
    tier_bounds: tuple[float, float]  # (lower benchmark, upper benchmark)
    schedule: str  # augmentation schedule preset name

    @property
    def ld_count(self) -> int:
        return self.counts["LD"]


DATASET_PRESETS: dict[str, DatasetPreset] = {
    "isic2018": DatasetPreset(
        name="isic2018",
        image_shape=(256, 256, 3),
        mask_mode="multiclass",
        num_classes=1,
        counts={"FD": 2594, "LD": 259, "ALD": 2590, "ULD": 2332, "VAL": 100, "TEST": 1000},
        alpha=(0.5, 1.5),
        tier_bounds=(0.724, 0.751),
        schedule="isic2018",
    ),
    "hela": DatasetPreset(
        name="hela",
        image_shape=(256, 256, 1),
        mask_mode="multilabel",
        num_classes=3,
        counts={"FD": 2380, "LD": 238, "ALD": 2380, "ULD": 2142, "VAL": 420, "TEST": 420},
        alpha=(1.0, 2.0),
        tier_bounds=(0.659, 0.696),
        schedule="hela",
    ),
    "suim": DatasetPreset(
        name="suim",
        image_shape=(256, 256, 3),
        mask_mode="multiclass",
        num_classes=8,
        counts={"FD": 2744, "LD": 276, "ALD": 2760, "ULD": 2468, "VAL": 250, "TEST": 250},
        alpha=(1.0, 2.0),
        tier_bounds=(0.432, 0.517),
        schedule="suim",
    ),
    "cityscapes": DatasetPreset(
        name="cityscapes",
        image_shape=(208, 416, 3),
        mask_mode="multiclass",
        num_classes=34,
        counts={"FD": 2975, "LD": 297, "ALD": 2970, "ULD": 2678, "VAL": 250, "TEST": 250},
        alpha=(1.0, 2.0),
        tier_bounds=(0.374, 0.456),
        schedule="cityscapes",
    ),
}


def get_preset(name: str) -> DatasetPreset:
    try:
        return DATASET_PRESETS[name]
    except KeyError:
        raise DataError(f"unknown dataset preset {name!r}; have {sorted(DATASET_PRESETS)}") from None
