"""Dataset layout, manifests, PNG mask/image IO, and the IMT1 tensor format.

On-disk dataset layout::

    <root>/manifest.json
    <root>/images/<id>.png            uint8, (H,W) or (H,W,3)
    <root>/masks/<id>.png             multiclass: 8-bit class IDs
    <root>/masks/<id>.c<k>.png        multilabel: one {0,255} file per channel

IMT1 tensor files (little-endian throughout)::

    magic "IMT1" | uint32 rank | rank x uint32 dims | uint32 dtype | payload

dtype codes: 1 = float32, 2 = uint8. Payload is row-major. Round trips are
bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    BadMagicError,
    DataError,
    DtypeCodeError,
    TensorFormatError,
    TruncatedPayloadError,
)
from .seeding import StableRng, derive_seed

MANIFEST_NAME = "manifest.json"
SPLIT_NAMES = ("FD", "LD", "ULD", "ALD", "VAL", "TEST")

# Splits whose records must have mask files; ULD is unlabeled by definition
# (mask files may still exist, e.g. in synthetic fixtures, and are ignored).
_MASKED_SPLITS = ("FD", "LD", "ALD", "VAL", "TEST")

MULTICLASS = "multiclass"
MULTILABEL = "multilabel"


# --------------------------------------------------------------------------
# Manifest


@dataclass
class DatasetManifest:
    """Declares a dataset's shape, label semantics and split membership.

    ``num_classes`` counts output channels: 1 for binary foreground/background
    tasks, the total class count (background included) for multiclass, and the
    channel count for multilabel.
    """

    name: str
    image_shape: tuple[int, int, int]
    mask_mode: str
    num_classes: int
    splits: dict[str, list[str]] = field(default_factory=dict)
    class_names: list[str] | None = None

    @property
    def mode(self) -> str:
        """Effective label mode: 'binary', 'multiclass' or 'multilabel'."""
        if self.mask_mode == MULTICLASS and self.num_classes == 1:
            return "binary"
        return self.mask_mode

    def split(self, name: str) -> list[str]:
        return list(self.splits.get(name, []))

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "name": self.name,
            "image_shape": list(self.image_shape),
            "mask_mode": self.mask_mode,
            "num_classes": self.num_classes,
            "class_names": self.class_names,
            "splits": {k: list(v) for k, v in sorted(self.splits.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        try:
            manifest = cls(
                name=str(d["name"]),
                image_shape=tuple(int(x) for x in d["image_shape"]),
                mask_mode=str(d["mask_mode"]),
                num_classes=int(d["num_classes"]),
                splits={k: [str(i) for i in v] for k, v in d.get("splits", {}).items()},
                class_names=list(d["class_names"]) if d.get("class_names") else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed manifest: {exc}") from exc
        manifest.validate()
        return manifest

    def validate(self) -> None:
        if len(self.image_shape) != 3 or any(int(x) <= 0 for x in self.image_shape):
            raise DataError(f"image_shape must be 3 positive ints, got {self.image_shape}")
        if self.image_shape[2] not in (1, 3):
            raise DataError(f"image channels must be 1 or 3, got {self.image_shape[2]}")
        if self.mask_mode not in (MULTICLASS, MULTILABEL):
            raise DataError(f"unknown mask_mode {self.mask_mode!r}")
        if not 1 <= self.num_classes <= 255:
            raise DataError(f"num_classes must be in [1, 255], got {self.num_classes}")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise DataError(
                f"{len(self.class_names)} class_names for {self.num_classes} classes"
            )
        for split, ids in self.splits.items():
            dupes = _duplicates(ids)
            if dupes:
                raise DataError(f"split {split} has duplicate ids: {sorted(dupes)[:5]}")
        ld, uld = set(self.split("LD")), set(self.split("ULD"))
        if ld or uld:
            overlap = ld & uld
            if overlap:
                raise DataError(f"LD and ULD overlap: {sorted(overlap)[:5]}")
            fd = set(self.split("FD"))
            if fd and ld | uld != fd:
                missing = sorted(fd - (ld | uld))[:5]
                extra = sorted((ld | uld) - fd)[:5]
                raise DataError(
                    f"LD union ULD must equal FD (missing from LD/ULD: {missing}, "
                    f"not in FD: {extra})"
                )


def _duplicates(ids: list[str]) -> set[str]:
    seen: set[str] = set()
    dupes: set[str] = set()
    for i in ids:
        if i in seen:
            dupes.add(i)
        seen.add(i)
    return dupes


def save_manifest(root: Path | str, manifest: DatasetManifest) -> Path:
    manifest.validate()
    path = Path(root) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    write_json(path, manifest.to_dict())
    return path


def load_manifest(root: Path | str) -> DatasetManifest:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"no {MANIFEST_NAME} under {root}")
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path} is not valid JSON: {exc}") from exc
    return DatasetManifest.from_dict(payload)


def write_json(path: Path | str, payload: dict) -> None:
    """Canonical JSON writer: sorted keys, fixed separators, trailing newline."""
    text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def validate_dataset(root: Path | str, manifest: DatasetManifest | None = None) -> DatasetManifest:
    """Check that every split id resolves to files; returns the manifest."""
    root = Path(root)
    manifest = manifest or load_manifest(root)
    manifest.validate()
    missing: list[str] = []
    for split, ids in manifest.splits.items():
        for rid in ids:
            if not image_path(root, rid).is_file():
                missing.append(f"{split}:{rid} (image)")
            if split in _MASKED_SPLITS:
                for p in mask_paths(root, rid, manifest.mask_mode, manifest.num_classes):
                    if not p.is_file():
                        missing.append(f"{split}:{rid} (mask {p.name})")
    if missing:
        raise DataError(f"{len(missing)} unresolved records, first: {missing[:5]}")
    return manifest


# --------------------------------------------------------------------------
# Record paths and PNG IO


def image_path(root: Path | str, rid: str) -> Path:
    return Path(root) / "images" / f"{rid}.png"


def mask_paths(root: Path | str, rid: str, mask_mode: str, num_classes: int) -> list[Path]:
    base = Path(root) / "masks"
    if mask_mode == MULTILABEL:
        return [base / f"{rid}.c{k}.png" for k in range(num_classes)]
    return [base / f"{rid}.png"]


def im_path(root: Path | str, rid: str) -> Path:
    """Per-record inconsistency mask, materialized in combined datasets."""
    return Path(root) / "im" / f"{rid}.png"


def read_image(path: Path | str) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing image {path}")
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.dtype != np.uint8 or arr.ndim not in (2, 3):
        raise DataError(f"{path}: expected 8-bit grayscale or RGB, got {arr.dtype}/{arr.ndim}d")
    if arr.ndim == 3 and arr.shape[2] != 3:
        raise DataError(f"{path}: expected 3 channels, got {arr.shape[2]}")
    return arr


def write_image(path: Path | str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8 or arr.ndim not in (2, 3):
        raise DataError(f"images must be uint8 (H,W) or (H,W,3), got {arr.dtype}/{arr.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def mask_value_limit(mask_mode: str, num_classes: int, remapped: bool = False) -> int:
    """Exclusive upper bound for stored mask values.

    Binary tasks (multiclass with one declared class) use {0,1}; multiclass
    values are class IDs < num_classes, or <= num_classes after the IM remap
    that reserves 0 and shifts classes up by one.
    """
    if mask_mode == MULTILABEL:
        return 2
    if num_classes == 1:
        return 2
    return num_classes + (1 if remapped else 0)


def read_mask(
    root: Path | str, rid: str, mask_mode: str, num_classes: int, remapped: bool = False
) -> np.ndarray:
    """Read a record's mask: (H,W) small ints, or (H,W,C) {0,1} for multilabel."""
    paths = mask_paths(root, rid, mask_mode, num_classes)
    if mask_mode == MULTILABEL:
        channels = []
        for p in paths:
            if not p.is_file():
                raise DataError(f"missing mask channel {p}")
            with Image.open(p) as img:
                ch = np.asarray(img)
            if ch.ndim != 2:
                raise DataError(f"{p}: multilabel channels must be single-plane")
            channels.append((ch > 0).astype(np.uint8))
        return np.stack(channels, axis=-1)
    p = paths[0]
    if not p.is_file():
        raise DataError(f"missing mask {p}")
    with Image.open(p) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise DataError(f"{p}: class masks must be single-plane PNGs")
    limit = mask_value_limit(mask_mode, num_classes, remapped)
    top = int(arr.max(initial=0))
    if top >= limit:
        raise DataError(f"{p}: mask value {top} outside [0, {limit - 1}]")
    return arr.astype(np.uint8)


def write_mask(
    root: Path | str,
    rid: str,
    mask: np.ndarray,
    mask_mode: str,
    num_classes: int,
    remapped: bool = False,
) -> None:
    mask = np.asarray(mask)
    paths = mask_paths(root, rid, mask_mode, num_classes)
    if mask_mode == MULTILABEL:
        if mask.ndim != 3 or mask.shape[2] != num_classes:
            raise DataError(f"multilabel mask must be (H,W,{num_classes}), got {mask.shape}")
        for k, p in enumerate(paths):
            p.parent.mkdir(parents=True, exist_ok=True)
            plane = (mask[:, :, k] > 0).astype(np.uint8) * 255
            Image.fromarray(plane).save(p, format="PNG")
        return
    if mask.ndim != 2:
        raise DataError(f"class mask must be (H,W), got {mask.shape}")
    limit = mask_value_limit(mask_mode, num_classes, remapped)
    top = int(mask.max(initial=0))
    if top >= limit:
        raise DataError(f"mask value {top} outside [0, {limit - 1}] for {rid}")
    p = paths[0]
    p.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8)).save(p, format="PNG")


def read_im_mask(path: Path | str) -> np.ndarray:
    """Read a {0,255}-encoded binary IM mask file as {0,1} uint8."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing IM mask {path}")
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise DataError(f"{path}: IM masks must be single-plane")
    return (arr > 0).astype(np.uint8)


def write_im_mask(path: Path | str, im: np.ndarray) -> None:
    im = np.asarray(im)
    if im.ndim != 2:
        raise DataError(f"IM mask must be (H,W), got {im.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(((im > 0) * 255).astype(np.uint8)).save(path, format="PNG")


# --------------------------------------------------------------------------
# IMT1 tensors

_MAGIC = b"IMT1"
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODES_BY_KIND = {np.dtype(np.float32): 1, np.dtype(np.uint8): 2}
_MAX_RANK = 4


def write_tensor(path: Path | str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES_BY_KIND:
        raise DataError(f"IMT1 supports float32/uint8, got {arr.dtype}")
    if not 1 <= arr.ndim <= _MAX_RANK:
        raise DataError(f"IMT1 rank must be 1..{_MAX_RANK}, got {arr.ndim}")
    code = _CODES_BY_KIND[arr.dtype]
    header = _MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<I", code)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload)


def read_tensor(path: Path | str, expect_dtype: np.dtype | type | None = None) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing tensor {path}")
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != _MAGIC:
        raise BadMagicError(f"{path}: not an IMT1 file")
    off = 4
    if len(blob) < off + 4:
        raise TruncatedPayloadError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", blob, off)
    off += 4
    if not 1 <= rank <= _MAX_RANK:
        raise TensorFormatError(f"{path}: rank {rank} outside 1..{_MAX_RANK}")
    if len(blob) < off + 4 * rank + 4:
        raise TruncatedPayloadError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", blob, off)
    off += 4 * rank
    (code,) = struct.unpack_from("<I", blob, off)
    off += 4
    dtype = _DTYPE_CODES.get(code)
    if dtype is None:
        raise DtypeCodeError(f"{path}: unknown dtype code {code}")
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dtype.itemsize
    if len(blob) - off < nbytes:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(blob) - off} bytes, expected {nbytes}"
        )
    if len(blob) - off > nbytes:
        raise TensorFormatError(f"{path}: {len(blob) - off - nbytes} trailing bytes")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(dims)
    if expect_dtype is not None and arr.dtype != np.dtype(expect_dtype):
        raise DtypeCodeError(f"{path}: dtype {arr.dtype}, required {np.dtype(expect_dtype)}")
    return arr.copy()  # detach from the read-only buffer


# --------------------------------------------------------------------------
# Splitting


def split_dataset(fd_ids: list[str], ld_count: int, seed: int) -> tuple[list[str], list[str]]:
    """Partition the full training pool into labeled (LD) and unlabeled (ULD) ids.

    The selection is a uniform sample determined solely by the id *set*,
    ``ld_count`` and ``seed`` — input order, platform and library versions do
    not affect it. Both returned lists are sorted.
    """
    dupes = _duplicates(list(fd_ids))
    if dupes:
        raise DataError(f"duplicate ids in FD: {sorted(dupes)[:5]}")
    n = len(fd_ids)
    if not 0 < ld_count < n:
        raise DataError(f"ld_count must be in (0, {n}), got {ld_count}")
    canon = sorted(fd_ids)
    rng = StableRng(derive_seed("split", seed))
    ld = sorted(rng.sample(canon, ld_count))
    picked = set(ld)
    uld = [i for i in canon if i not in picked]
    return ld, uld


def apply_split(root: Path | str, ld_count: int, seed: int) -> DatasetManifest:
    """Split the manifest's FD into LD/ULD in place and persist it."""
    root = Path(root)
    manifest = load_manifest(root)
    fd = manifest.split("FD")
    if not fd:
        raise DataError("manifest has no FD split to partition")
    ld, uld = split_dataset(fd, ld_count, seed)
    manifest.splits["LD"] = ld
    manifest.splits["ULD"] = uld
    save_manifest(root, manifest)
    return manifest
