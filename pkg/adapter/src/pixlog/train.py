"""Minibatch SGD fit of the logistic model on a combined dataset.

Inconsistency-masked pixels carry exactly zero weight: they are dropped
before the optimizer ever sees them, so blacked-out image regions cannot
influence the fit. The step budget follows the pipeline's floor semantics —
steps per epoch is ``max(ceil(records / batch), steps_min, 1)`` — and each
epoch is one seeded shuffle of the retained pixels, so the resulting model
file is a deterministic function of (CD bytes, hyperparameters, seed).

``alpha`` is the pipeline's model-width multiplier; a linear model has no
width to scale, so it is recorded in the model file without effect.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .data import CombinedData, load_cd
from .errors import PixlogError
from .model import N_FEATURES, Model, featurize, sigmoid

LEARNING_RATE = 10.0
FINAL_LR_FRACTION = 0.1
L2_PENALTY = 1e-4
MAX_PIXEL_BATCH = 65536


def _collect_pixels(cd: CombinedData) -> tuple[np.ndarray, np.ndarray]:
    """Stack every retained pixel: features (N,7) and targets (N,) or (N,C)."""
    xs, ys = [], []
    for rec in cd.records:
        keep = rec.retained
        if not keep.any():
            continue
        xs.append(featurize(rec.image)[keep])
        if cd.mode == "multilabel":
            ys.append(rec.target[keep].astype(np.float64))
        else:
            ys.append(rec.target[keep].astype(np.int64))
    if not xs:
        raise PixlogError("no retained pixels in the combined dataset; nothing to fit")
    return np.concatenate(xs), np.concatenate(ys)


def _gradient(
    weights: np.ndarray, xb: np.ndarray, yb: np.ndarray, multilabel: bool
) -> np.ndarray:
    logits = xb @ weights.T
    if multilabel:
        delta = sigmoid(logits) - yb
    else:
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(len(yb)), yb] -= 1.0
        delta = probs
    return delta.T @ xb / len(xb)


def fit(
    cd: CombinedData,
    *,
    alpha: float = 1.0,
    epochs: int = 10,
    batch: int = 8,
    steps_min: int = 0,
    seed: int = 0,
) -> Model:
    """Fit per-class weights on a loaded CD; deterministic given the seed."""
    if epochs < 1:
        raise PixlogError(f"epochs must be >= 1, got {epochs}")
    if batch < 1:
        raise PixlogError(f"batch must be >= 1, got {batch}")
    if steps_min < 0:
        raise PixlogError(f"steps_min must be >= 0, got {steps_min}")
    x, y = _collect_pixels(cd)
    n_pixels = len(x)
    multilabel = cd.mode == "multilabel"
    n_heads = 2 if cd.mode == "binary" else cd.num_classes
    weights = np.zeros((n_heads, N_FEATURES), dtype=np.float64)

    steps_per_epoch = max(math.ceil(len(cd.records) / batch), steps_min, 1)
    total_steps = epochs * steps_per_epoch
    pixel_batch = min(max(math.ceil(n_pixels / steps_per_epoch), 1), MAX_PIXEL_BATCH)

    rng = np.random.default_rng(seed)
    t = 0
    for _ in range(epochs):
        perm = rng.permutation(n_pixels)
        for step in range(steps_per_epoch):
            lo = step * pixel_batch
            idx = perm[lo : lo + pixel_batch]
            if idx.size == 0:
                idx = perm[:pixel_batch]
            frac = t / max(total_steps - 1, 1)
            lr = LEARNING_RATE * (1.0 - (1.0 - FINAL_LR_FRACTION) * frac)
            grad = _gradient(weights, x[idx], y[idx], multilabel)
            weights -= lr * (grad + L2_PENALTY * weights)
            t += 1

    return Model(
        mode=cd.mode,
        num_classes=cd.num_classes,
        weights=weights,
        alpha=alpha,
        seed=seed,
        training={
            "records": len(cd.records),
            "pixels": n_pixels,
            "epochs": epochs,
            "batch": batch,
            "steps_min": steps_min,
            "steps_per_epoch": steps_per_epoch,
            "total_steps": total_steps,
        },
    )


def train_model(
    cd_dir: Path | str,
    model_out: Path | str,
    *,
    alpha: float = 1.0,
    epochs: int = 10,
    batch: int = 8,
    steps_min: int = 0,
    seed: int = 0,
) -> Model:
    """Load a CD, fit, and write the model file."""
    model = fit(
        load_cd(cd_dir), alpha=alpha, epochs=epochs, batch=batch, steps_min=steps_min, seed=seed
    )
    model.save(model_out)
    return model
