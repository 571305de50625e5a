"""Segmentation metrics: IoU/Dice, class-averaged IoU and pixel accuracy,
and a connected-component cell-count error for point-annotated data.

Conventions (pinned by tests): two empty masks have IoU = Dice = 1.0;
class-averaged metrics run over the classes present in the ground truth
(optionally intersected with an explicit subset), averaged per image first,
then across images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .morphology import label_components


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Binary intersection-over-union; empty vs empty counts as 1.0."""
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise DataError(f"shape mismatch {pred.shape} vs {gt.shape}")
    inter = int(np.count_nonzero(pred & gt))
    union = int(np.count_nonzero(pred | gt))
    if union == 0:
        return 1.0
    return inter / union


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Binary Dice coefficient; equals 2*IoU/(1+IoU); empty vs empty is 1.0."""
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise DataError(f"shape mismatch {pred.shape} vs {gt.shape}")
    inter = int(np.count_nonzero(pred & gt))
    total = int(np.count_nonzero(pred)) + int(np.count_nonzero(gt))
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def _present_classes(gt: np.ndarray, classes: list[int] | None) -> list[int]:
    if gt.ndim == 2:
        present = [int(c) for c in np.unique(gt)]
    elif gt.ndim == 3:
        present = [k for k in range(gt.shape[2]) if np.count_nonzero(gt[:, :, k])]
    else:
        raise DataError(f"masks must be (H,W) or (H,W,C), got {gt.shape}")
    if classes is not None:
        wanted = set(int(c) for c in classes)
        present = [c for c in present if c in wanted]
    if not present:
        raise DataError("no classes left to average after the presence/subset filter")
    return present


def _class_plane(mask: np.ndarray, c: int) -> np.ndarray:
    return mask[:, :, c] > 0 if mask.ndim == 3 else mask == c


def miou(pred: np.ndarray, gt: np.ndarray, classes: list[int] | None = None) -> float:
    """Mean per-class IoU over classes present in gt (optionally a subset).

    Accepts (H,W) class-ID masks or (H,W,C) {0,1} channel stacks; for stacks,
    a class is present when its channel has any positive pixel.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"shape mismatch {pred.shape} vs {gt.shape}")
    vals = [iou(_class_plane(pred, c), _class_plane(gt, c)) for c in _present_classes(gt, classes)]
    return float(np.mean(vals))


def mpa(pred: np.ndarray, gt: np.ndarray, classes: list[int] | None = None) -> float:
    """Mean per-class pixel accuracy (recall) over classes present in gt."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"shape mismatch {pred.shape} vs {gt.shape}")
    accs = []
    for c in _present_classes(gt, classes):
        gt_c = _class_plane(gt, c)
        correct = int(np.count_nonzero(_class_plane(pred, c) & gt_c))
        accs.append(correct / int(np.count_nonzero(gt_c)))
    return float(np.mean(accs))


# --------------------------------------------------------------------------
# Cell counting


def count_cells(
    position: np.ndarray,
    class_channels: list[np.ndarray],
    min_area: int = 1,
    connectivity: int = 8,
) -> list[int]:
    """Count position markers per class by majority overlap.

    Each connected component of the position channel is one cell; it is
    assigned to the class channel with the largest pixel overlap. Ties and
    zero-overlap components go to the lowest channel index (deterministic).
    """
    if not class_channels:
        raise DataError("count_cells needs at least one class channel")
    labels, n = label_components(position, connectivity=connectivity)
    counts = [0] * len(class_channels)
    for comp in range(1, n + 1):
        region = labels == comp
        if int(np.count_nonzero(region)) < min_area:
            continue
        overlaps = [int(np.count_nonzero(region & (ch > 0))) for ch in class_channels]
        counts[int(np.argmax(overlaps))] += 1
    return counts


def mcce(count_pairs: list[tuple[list[int], list[int]]]) -> float:
    """Mean cell count error: mean over images of sum_t |actual_t - predicted_t|."""
    if not count_pairs:
        raise DataError("mcce needs at least one image")
    errors = []
    for actual, predicted in count_pairs:
        if len(actual) != len(predicted):
            raise DataError(f"count length mismatch: {actual} vs {predicted}")
        errors.append(sum(abs(int(a) - int(p)) for a, p in zip(actual, predicted)))
    return float(np.mean(errors))


# --------------------------------------------------------------------------
# Dataset-level evaluation


@dataclass
class MetricReport:
    """Per-image metric rows plus their across-image means."""

    per_image: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_image": self.per_image, "aggregate": self.aggregate}


def score_mask(pred: np.ndarray, gt: np.ndarray, mode: str, subset: list[int] | None = None) -> float:
    """The selection metric for one mask: IoU (binary) or mean IoU otherwise."""
    if mode == "binary":
        return iou(pred, gt)
    return miou(pred, gt, classes=subset)


def evaluate_masks(
    preds: dict[str, np.ndarray],
    gts: dict[str, np.ndarray],
    mode: str,
    subset: list[int] | None = None,
) -> MetricReport:
    """Score predictions against ground truth, keyed by record id."""
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise DataError(f"predictions missing for {len(missing)} records, first {missing[:5]}")
    report = MetricReport()
    for rid in sorted(gts):
        pred, gt = preds[rid], gts[rid]
        row: dict = {"id": rid}
        if mode == "binary":
            row["iou"] = iou(pred, gt)
            row["dice"] = dice(pred, gt)
        else:
            row["miou"] = miou(pred, gt)
            row["mpa"] = mpa(pred, gt)
            if subset is not None:
                try:
                    row["miou_subset"] = miou(pred, gt, classes=subset)
                except DataError:
                    row["miou_subset"] = None  # no subset class present in this image
        report.per_image.append(row)
    keys = [k for k in report.per_image[0] if k != "id"]
    for k in keys:
        vals = [r[k] for r in report.per_image if r.get(k) is not None]
        report.aggregate[k] = float(np.mean(vals)) if vals else None
    return report
