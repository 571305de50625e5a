"""Pseudo-label quality scoring and threshold filtering.

Scores come either from an oracle (true metric against ground truth, for
simulation studies) or from external scorer backends; ensembles of scorers
are averaged. Filtering is strict: a pair survives only when its score
exceeds the threshold.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DataError
from .metrics import score_mask
from .pseudo_label import PseudoPair


def oracle_score(
    pred: np.ndarray, gt: np.ndarray, mode: str, subset: list[int] | None = None
) -> float:
    """True quality of a mask: IoU (binary) or mean IoU (multiclass/multilabel)."""
    return score_mask(pred, gt, mode, subset=subset)


def ensemble_score(scores: Sequence[float]) -> float:
    """Mean of scorer outputs, clamped into [0, 1]."""
    if len(scores) == 0:
        raise DataError("ensemble_score needs at least one score")
    return float(np.clip(np.mean([float(s) for s in scores]), 0.0, 1.0))


def threshold_filter(
    pairs: Sequence[PseudoPair], scores: dict[str, float], min_threshold: float
) -> list[PseudoPair]:
    """Keep pairs whose score strictly exceeds the threshold."""
    missing = sorted({p.record_id for p in pairs} - set(scores))
    if missing:
        raise DataError(f"scores missing for pairs {missing[:5]}")
    return [p for p in pairs if scores[p.record_id] > min_threshold]
