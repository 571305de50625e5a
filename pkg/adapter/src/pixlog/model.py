"""Per-pixel logistic segmentation model: features, inference, serialization.

The model is one weight matrix over seven per-pixel features — the RGB
color, the 3x3 neighborhood mean of each channel (both scaled to [0, 1]),
and a constant bias. Binary and multiclass heads share a softmax, so the
emitted probabilities sum to 1 per pixel; multilabel heads are independent
sigmoids, one per channel. A model serializes to a single JSON file whose
bytes are a pure function of its values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PixlogError

MODEL_FORMAT = "pixlog-model-v1"
FEATURE_NAME = "rgb+mean3+bias"
N_FEATURES = 7
MODES = ("binary", "multiclass", "multilabel")


def _mean3(plane: np.ndarray) -> np.ndarray:
    """3x3 neighborhood mean with edge replication.

    Nine shifted adds in a fixed order, so every output value is a
    bitwise-pure function of its own window. Running-sum filters are not:
    their rounding noise propagates along the scan line, which would leak
    traces of masked image regions into retained pixels' features.
    """
    padded = np.pad(plane, 1, mode="edge")
    h, w = plane.shape
    acc = np.zeros_like(plane)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy : dy + h, dx : dx + w]
    return acc / 9.0


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


def featurize(image: np.ndarray) -> np.ndarray:
    """Per-pixel feature planes, (H, W, 7) float64.

    Grayscale images are replicated to three channels so every model shares
    one feature definition.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise PixlogError(f"images must be (H,W) or (H,W,3), got {image.shape}")
    color = image.astype(np.float64) / 255.0
    local = np.stack([_mean3(color[:, :, c]) for c in range(3)], axis=-1)
    bias = np.ones(color.shape[:2] + (1,), dtype=np.float64)
    return np.concatenate([color, local, bias], axis=-1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


@dataclass
class Model:
    """Weights plus the label semantics needed to decode them.

    ``num_classes`` is the declared output channel count (1 for binary
    tasks); ``weights`` has one row per head — two softmax heads for binary,
    ``num_classes`` softmax heads for multiclass, ``num_classes`` sigmoid
    heads for multilabel.
    """

    mode: str
    num_classes: int
    weights: np.ndarray
    alpha: float = 1.0
    seed: int = 0
    training: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise PixlogError(f"unknown mode {self.mode!r}")
        if self.num_classes < 1:
            raise PixlogError(f"num_classes must be >= 1, got {self.num_classes}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.n_heads, N_FEATURES):
            raise PixlogError(
                f"{self.mode} weights must be {(self.n_heads, N_FEATURES)}, "
                f"got {self.weights.shape}"
            )

    @property
    def n_heads(self) -> int:
        return 2 if self.mode == "binary" else self.num_classes

    @property
    def out_channels(self) -> int:
        return 1 if self.mode == "binary" else self.num_classes

    def predict_probs(self, image: np.ndarray) -> np.ndarray:
        """Per-pixel probabilities, (H, W, out_channels) float32."""
        logits = featurize(image) @ self.weights.T
        if self.mode == "multilabel":
            probs = sigmoid(logits)
        else:
            probs = _softmax(logits)
            if self.mode == "binary":
                probs = probs[:, :, 1:2]
        return probs.astype(np.float32)

    def hard_mask(self, probs: np.ndarray) -> np.ndarray:
        """Decode probabilities: (H,W) class ids, or (H,W,C) {0,1} multilabel."""
        probs = np.asarray(probs)
        if self.mode == "multilabel":
            return (probs >= 0.5).astype(np.uint8)
        if self.mode == "binary":
            return (probs[:, :, 0] >= 0.5).astype(np.uint8)
        return probs.argmax(axis=-1).astype(np.uint8)

    def save(self, path: Path | str) -> Path:
        payload = {
            "format": MODEL_FORMAT,
            "feature": FEATURE_NAME,
            "mode": self.mode,
            "num_classes": self.num_classes,
            "weights": [[float(w) for w in row] for row in self.weights],
            "alpha": float(self.alpha),
            "seed": int(self.seed),
            "training": self.training,
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", "utf-8")
        return path

    @classmethod
    def load(cls, path: Path | str) -> "Model":
        path = Path(path)
        if not path.is_file():
            raise PixlogError(f"missing model file {path}")
        try:
            payload = json.loads(path.read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise PixlogError(f"cannot read model {path}: {exc}") from exc
        if not isinstance(payload, dict) or payload.get("format") != MODEL_FORMAT:
            raise PixlogError(f"{path} is not a {MODEL_FORMAT} file")
        try:
            return cls(
                mode=str(payload["mode"]),
                num_classes=int(payload["num_classes"]),
                weights=np.asarray(payload["weights"], dtype=np.float64),
                alpha=float(payload.get("alpha", 1.0)),
                seed=int(payload.get("seed", 0)),
                training=dict(payload.get("training", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PixlogError(f"malformed model {path}: {exc}") from exc
