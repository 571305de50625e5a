"""Ensemble voting and inconsistency-mask construction.

An ensemble of n models votes per pixel. Where all n hard predictions agree
the consensus keeps the agreed value; every disagreeing pixel is flagged in a
binary inconsistency mask (IM). Binary tasks reduce to counting positive
votes: with S the pixelwise vote sum, the foreground consensus is S == n and
the IM is 0 < S < n.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class ConsensusOutput:
    """Result of an n-model vote.

    ``final`` is the agreed mask (binary {0,1} or class IDs) with 0 wherever
    ``im`` is set; ``im`` is the {0,1} inconsistency mask; ``vote_sum`` is the
    pixelwise positive-vote count S (binary voting only).
    """

    final: np.ndarray
    im: np.ndarray
    n_models: int
    vote_sum: np.ndarray | None = None


def _check_stack(masks: list[np.ndarray]) -> np.ndarray:
    if len(masks) < 2:
        raise DataError(f"consensus needs >= 2 masks, got {len(masks)}")
    shapes = {m.shape for m in masks}
    if len(shapes) > 1:
        raise DataError(f"mask shapes differ: {sorted(shapes)}")
    if masks[0].ndim != 2:
        raise DataError(f"masks must be 2-D, got {masks[0].ndim}-D")
    return np.stack([np.asarray(m) for m in masks])


def im_binary(masks: list[np.ndarray]) -> ConsensusOutput:
    """Vote n binary masks: unanimous foreground survives, splits become IM."""
    stack = _check_stack(masks)
    if stack.max(initial=0) > 1:
        raise DataError("binary voting expects {0,1} masks")
    n = len(masks)
    vote_sum = stack.sum(axis=0, dtype=np.int32)
    final = (vote_sum == n).astype(np.uint8)
    im = ((vote_sum > 0) & (vote_sum < n)).astype(np.uint8)
    return ConsensusOutput(final=final, im=im, n_models=n, vote_sum=vote_sum)


def im_multiclass(masks: list[np.ndarray]) -> ConsensusOutput:
    """Vote n class-ID masks: unanimous class survives, any split becomes IM.

    ``final`` is 0 on IM pixels; a unanimous background (class 0) pixel is
    distinguished from IM by ``im`` being 0 there. No vote sum is defined for
    the multiclass rule.
    """
    stack = _check_stack(masks)
    agree = np.all(stack == stack[0], axis=0)
    final = np.where(agree, stack[0], 0).astype(np.uint8)
    im = (~agree).astype(np.uint8)
    return ConsensusOutput(final=final, im=im, n_models=len(masks), vote_sum=None)


def soft_vote(prob_maps: list[np.ndarray]) -> np.ndarray:
    """Average (H,W,C) probability maps and take the per-pixel argmax.

    Ties resolve to the lowest class index.
    """
    if not prob_maps:
        raise DataError("soft_vote needs at least one probability map")
    shapes = {p.shape for p in prob_maps}
    if len(shapes) > 1:
        raise DataError(f"probability map shapes differ: {sorted(shapes)}")
    if prob_maps[0].ndim != 3:
        raise DataError(f"probability maps must be (H,W,C), got {prob_maps[0].shape}")
    mean = np.mean(np.stack([p.astype(np.float64) for p in prob_maps]), axis=0)
    return np.argmax(mean, axis=-1).astype(np.uint8)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a single-channel probability map to a {0,1} mask (>= threshold)."""
    if not 0.0 < threshold < 1.0:
        raise DataError(f"threshold must be in (0,1), got {threshold}")
    prob = np.asarray(prob)
    if prob.ndim == 3:
        if prob.shape[2] != 1:
            raise DataError(f"binarize expects one channel, got {prob.shape}")
        prob = prob[:, :, 0]
    if prob.ndim != 2:
        raise DataError(f"binarize expects (H,W) or (H,W,1), got {prob.shape}")
    return (prob >= threshold).astype(np.uint8)
