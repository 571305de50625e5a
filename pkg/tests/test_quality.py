"""Quality scoring and strict threshold filtering."""

import numpy as np
import pytest

from imseg.errors import DataError
from imseg.metrics import iou, miou
from imseg.pseudo_label import PseudoPair
from imseg.quality import ensemble_score, oracle_score, threshold_filter


def make_pair(rid):
    shape = (2, 2)
    return PseudoPair(
        record_id=rid,
        image=np.zeros(shape + (3,), dtype=np.uint8),
        label=np.ones(shape, dtype=np.uint8),
        im=np.zeros(shape, dtype=np.uint8),
    )


def test_oracle_score_is_the_selection_metric():
    gt = np.array([[1, 0], [1, 1]], dtype=np.uint8)
    pred = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    assert oracle_score(pred, gt, "binary") == iou(pred, gt)
    assert oracle_score(pred, gt, "multiclass") == miou(pred, gt)


def test_ensemble_score_means_and_clamps():
    assert ensemble_score([0.2, 0.4]) == pytest.approx(0.3)
    assert ensemble_score([1.2, 1.4]) == 1.0
    assert ensemble_score([-0.5]) == 0.0
    with pytest.raises(DataError):
        ensemble_score([])


def test_threshold_filter_is_strict():
    pairs = [make_pair("a"), make_pair("b"), make_pair("c")]
    scores = {"a": 0.5, "b": 0.5000001, "c": 0.49}
    kept = threshold_filter(pairs, scores, 0.5)
    assert [p.record_id for p in kept] == ["b"]


def test_threshold_filter_requires_scores_for_all_pairs():
    with pytest.raises(DataError):
        threshold_filter([make_pair("a")], {}, 0.5)
