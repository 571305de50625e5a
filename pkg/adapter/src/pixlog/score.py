"""Candidate-mask scoring: a calibrated agreement heuristic, not a regressor.

The scorer verb's role in the pipeline is to estimate a candidate mask's
IoU against the (unavailable) ground truth. This reference implementation
substitutes a documented heuristic on the same [0, 1] scale: the mean IoU
between the model's own hard prediction and the candidate, over the classes
present in either of them. When the model fits the data, this tracks the
candidate's true quality; blanking or corrupting candidate pixels the model
recognizes can only lower it.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import load_pairs
from .model import Model
from .tensor import TENSOR_EXT, write_tensor


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def score_pair(model: Model, image: np.ndarray, candidate: np.ndarray) -> float:
    """Agreement between the model's prediction and a candidate mask, in [0,1]."""
    pred = model.hard_mask(model.predict_probs(image))
    if model.mode == "multilabel":
        ious = [
            _iou(pred[:, :, k] > 0, candidate[:, :, k] > 0)
            for k in range(model.num_classes)
        ]
    elif model.mode == "binary":
        ious = [_iou(pred > 0, candidate > 0)]
    else:
        classes = np.union1d(np.unique(pred), np.unique(candidate))
        ious = [_iou(pred == c, candidate == c) for c in classes]
    return float(min(max(sum(ious) / len(ious), 0.0), 1.0))


def score_pairs(model: Model, pair_dir: Path | str, output_dir: Path | str) -> int:
    """Score every pair and write one (1,) float32 tensor per record."""
    output_dir = Path(output_dir)
    pairs = load_pairs(pair_dir, model.mode, model.num_classes)
    for rid, image, candidate in pairs:
        value = score_pair(model, image, candidate)
        write_tensor(output_dir / f"{rid}{TENSOR_EXT}", np.array([value], dtype=np.float32))
    return len(pairs)
