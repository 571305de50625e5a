"""pixlog: a per-pixel logistic segmentation backend speaking a file protocol.

The package trains softmax/sigmoid weights over seven local color features,
predicts per-pixel probability tensors (IMT1 files), and scores candidate
masks with a calibrated agreement heuristic — everything exchanged with the
driving pipeline through directories of PNGs, tensor files, and a JSON model.
"""

from .data import CombinedData, load_cd, mode_of
from .errors import PixlogError
from .model import FEATURE_NAME, MODEL_FORMAT, N_FEATURES, Model, featurize
from .score import score_pair, score_pairs
from .tensor import TENSOR_EXT, read_tensor, write_tensor
from .train import fit, train_model

__version__ = "0.1.0"

__all__ = [
    "CombinedData",
    "FEATURE_NAME",
    "MODEL_FORMAT",
    "Model",
    "N_FEATURES",
    "PixlogError",
    "TENSOR_EXT",
    "__version__",
    "featurize",
    "fit",
    "load_cd",
    "mode_of",
    "read_tensor",
    "score_pair",
    "score_pairs",
    "train_model",
    "write_tensor",
]
