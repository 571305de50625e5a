"""IMT1 tensor file IO — this package's own reading and writing.

The exchange format, implemented here independently of any consumer::

    magic "IMT1" | uint32 rank | rank x uint32 dims | uint32 dtype | payload

Little-endian throughout. dtype codes: 1 = float32, 2 = uint8. The payload
is row-major (C order). Rank is at most 4; a payload longer or shorter than
the dims imply is an error. Round trips are bit-exact.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .errors import PixlogError

MAGIC = b"IMT1"
MAX_RANK = 4
TENSOR_EXT = ".imt1"

_DTYPE_BY_CODE = {1: np.dtype("<f4"), 2: np.dtype("uint8")}
_CODE_BY_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.uint8): 2}


def write_tensor(path: Path | str, arr: np.ndarray) -> Path:
    """Write a float32 or uint8 array; returns the path written."""
    arr = np.asarray(arr)
    code = _CODE_BY_DTYPE.get(arr.dtype)
    if code is None:
        raise PixlogError(f"tensor dtype must be float32 or uint8, got {arr.dtype}")
    if not 1 <= arr.ndim <= MAX_RANK:
        raise PixlogError(f"tensor rank must be 1..{MAX_RANK}, got {arr.ndim}")
    header = MAGIC + struct.pack(f"<I{arr.ndim}II", arr.ndim, *arr.shape, code)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_BY_CODE[code]).tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload)
    return path


def read_tensor(path: Path | str) -> np.ndarray:
    """Read and fully validate a tensor file."""
    path = Path(path)
    if not path.is_file():
        raise PixlogError(f"missing tensor file {path}")
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 4:
        raise PixlogError(f"{path}: truncated header")
    if blob[: len(MAGIC)] != MAGIC:
        raise PixlogError(f"{path}: bad magic {blob[:4]!r}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if not 1 <= rank <= MAX_RANK:
        raise PixlogError(f"{path}: rank {rank} outside 1..{MAX_RANK}")
    fixed = 8 + 4 * rank + 4
    if len(blob) < fixed:
        raise PixlogError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    (code,) = struct.unpack_from("<I", blob, 8 + 4 * rank)
    dtype = _DTYPE_BY_CODE.get(code)
    if dtype is None:
        raise PixlogError(f"{path}: unknown dtype code {code}")
    expected = math.prod(dims) * dtype.itemsize
    payload = blob[fixed:]
    if len(payload) != expected:
        raise PixlogError(
            f"{path}: payload is {len(payload)} bytes, dims {dims} imply {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims)
