"""Ensemble-consensus pseudo-labeling for semi-supervised segmentation.

The package covers the full self-training loop: dataset split management,
ensemble voting with inconsistency masks, morphological mask refinement,
deterministic augmentation, combined-dataset assembly, quality scoring,
a training-cost model, synthetic fixtures, and a resumable orchestrator
that drives pluggable training backends over a file-based protocol.
"""

__version__ = "0.1.0"

# Format versions for on-disk artifacts, surfaced by `imseg --version`.
MANIFEST_FORMAT_VERSION = 1
TENSOR_FORMAT_VERSION = 1

from .errors import BackendError, DataError  # noqa: F401
