"""Deterministic image/mask augmentation with per-generation strength schedules.

A spec bounds the sampling space (maximum blur kernel, noise amplitude,
brightness/contrast deviations, allowed geometric ops); ``sample`` draws a
concrete augmentation from a spec and a seed; ``apply`` executes one.
Photometric ops touch the image only; geometric ops (hflip, vflip, 90-degree
turns) move image and mask identically and invert exactly.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from . import dataset_io
from .seeding import StableRng, derive_seed

log = logging.getLogger(__name__)

ALD_VARIANTS = 9  # augmented copies per labeled record; |ALD| = 10 * |LD|


@dataclass(frozen=True)
class AugmentationSpec:
    """Upper bounds for sampled augmentation strength.

    ``max_blur`` is a box-blur kernel size (0 or 1 disable blurring; even
    values are not representable — schedules normalize them up at load).
    ``alpha_dev``/``beta_dev`` bound the contrast factor (1 +- dev) and
    brightness shift (+- dev). Noise is additive integer uniform in
    [-amp, amp] with amp drawn from [0, max_noise].
    """

    max_blur: int = 0
    max_noise: int = 0
    alpha_dev: float = 0.0
    beta_dev: float = 0.0
    hflip: bool = False
    vflip: bool = False
    rot90: bool = False

    def validate(self) -> None:
        if self.max_blur < 0 or (self.max_blur > 1 and self.max_blur % 2 == 0):
            raise DataError(f"max_blur must be 0 or odd, got {self.max_blur}")
        if not 0 <= self.max_noise <= 255:
            raise DataError(f"max_noise must be in [0, 255], got {self.max_noise}")
        if not 0.0 <= self.alpha_dev < 1.0:
            raise DataError(f"alpha_dev must be in [0, 1), got {self.alpha_dev}")
        if not 0.0 <= self.beta_dev <= 255.0:
            raise DataError(f"beta_dev must be in [0, 255], got {self.beta_dev}")

    def is_identity(self) -> bool:
        return (
            self.max_blur <= 1
            and self.max_noise == 0
            and self.alpha_dev == 0.0
            and self.beta_dev == 0.0
            and not (self.hflip or self.vflip or self.rot90)
        )

    def to_dict(self) -> dict:
        return {
            "max_blur": self.max_blur,
            "max_noise": self.max_noise,
            "alpha_dev": self.alpha_dev,
            "beta_dev": self.beta_dev,
            "hflip": self.hflip,
            "vflip": self.vflip,
            "rot90": self.rot90,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        try:
            spec = cls(
                max_blur=int(d.get("max_blur", 0)),
                max_noise=int(d.get("max_noise", 0)),
                alpha_dev=float(d.get("alpha_dev", 0.0)),
                beta_dev=float(d.get("beta_dev", 0.0)),
                hflip=bool(d.get("hflip", False)),
                vflip=bool(d.get("vflip", False)),
                rot90=bool(d.get("rot90", False)),
            )
        except (TypeError, ValueError) as exc:
            raise DataError(f"malformed augmentation spec: {exc}") from exc
        if spec.max_blur > 1 and spec.max_blur % 2 == 0:
            # Even box kernels have no center pixel; round up to the next odd.
            log.info("normalizing even blur kernel %d up to %d", spec.max_blur, spec.max_blur + 1)
            spec = replace(spec, max_blur=spec.max_blur + 1)
        spec.validate()
        return spec


@dataclass(frozen=True)
class ConcreteAugmentation:
    """One fully-determined augmentation. ``seed`` fixes the noise field."""

    blur_kernel: int = 1
    noise_amp: int = 0
    alpha: float = 1.0
    beta: float = 0.0
    hflip: bool = False
    vflip: bool = False
    quarter_turns: int = 0
    seed: int = 0

    def is_geometric_identity(self) -> bool:
        return not (self.hflip or self.vflip or self.quarter_turns % 4)


IDENTITY = ConcreteAugmentation()


def sample(spec: AugmentationSpec, seed: int) -> ConcreteAugmentation:
    """Draw a concrete augmentation; a pure function of (spec, seed)."""
    spec.validate()
    rng = StableRng(derive_seed("augment", seed))
    kernels = [1] if spec.max_blur <= 1 else list(range(1, spec.max_blur + 1, 2))
    blur = kernels[rng.randbelow(len(kernels))]
    noise = rng.randint(0, spec.max_noise) if spec.max_noise else 0
    alpha = rng.uniform(1.0 - spec.alpha_dev, 1.0 + spec.alpha_dev) if spec.alpha_dev else 1.0
    beta = rng.uniform(-spec.beta_dev, spec.beta_dev) if spec.beta_dev else 0.0
    hflip = spec.hflip and rng.coin()
    vflip = spec.vflip and rng.coin()
    turns = rng.randbelow(4) if spec.rot90 else 0
    return ConcreteAugmentation(
        blur_kernel=blur,
        noise_amp=noise,
        alpha=alpha,
        beta=beta,
        hflip=hflip,
        vflip=vflip,
        quarter_turns=turns,
        seed=derive_seed("noise-field", seed),
    )


def _box_blur(img: np.ndarray, k: int) -> np.ndarray:
    if k <= 1:
        return img
    size = (k, k) if img.ndim == 2 else (k, k, 1)
    return ndimage.uniform_filter(img, size=size, mode="nearest")


def apply_geometric(arr: np.ndarray, aug: ConcreteAugmentation) -> np.ndarray:
    """Apply hflip, then vflip, then counter-clockwise quarter turns."""
    out = np.asarray(arr)
    turns = aug.quarter_turns % 4
    if turns % 2 and out.shape[0] != out.shape[1]:
        raise DataError(
            f"90-degree turns change the shape of non-square inputs {out.shape[:2]}; "
            "disable rot90 for this dataset"
        )
    if aug.hflip:
        out = np.flip(out, axis=1)
    if aug.vflip:
        out = np.flip(out, axis=0)
    if turns:
        out = np.rot90(out, turns, axes=(0, 1))
    return np.ascontiguousarray(out)


def map_back(arr: np.ndarray, aug: ConcreteAugmentation) -> np.ndarray:
    """Exactly undo ``apply_geometric`` (used to realign ensemble predictions)."""
    out = np.asarray(arr)
    turns = aug.quarter_turns % 4
    if turns:
        out = np.rot90(out, -turns, axes=(0, 1))
    if aug.vflip:
        out = np.flip(out, axis=0)
    if aug.hflip:
        out = np.flip(out, axis=1)
    return np.ascontiguousarray(out)


def invert_geometric(aug: ConcreteAugmentation) -> ConcreteAugmentation:
    """The augmentation whose geometric part undoes ``aug``'s (photometrics neutral)."""
    probe = np.arange(16, dtype=np.int32).reshape(4, 4)
    forward = apply_geometric(probe, aug)
    for h, v, t in itertools.product((False, True), (False, True), range(4)):
        cand = ConcreteAugmentation(hflip=h, vflip=v, quarter_turns=t, seed=aug.seed)
        if np.array_equal(apply_geometric(forward, cand), probe):
            return cand
    raise AssertionError("unreachable: D4 is closed under inversion")


def apply(
    image: np.ndarray,
    mask: np.ndarray | None,
    aug: ConcreteAugmentation,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Run one augmentation: photometrics on the image, then geometry on both.

    Photometric order: contrast/brightness (clamp(round(alpha*px + beta))),
    box blur, additive integer noise in [-amp, amp] from ``aug.seed``. Masks
    are moved by the geometric ops only and are never interpolated.
    """
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise DataError(f"augmentation expects uint8 images, got {img.dtype}")
    out = img.astype(np.float64)
    if aug.alpha != 1.0 or aug.beta != 0.0:
        out = np.clip(np.rint(aug.alpha * out + aug.beta), 0, 255)
    if aug.blur_kernel > 1:
        out = np.clip(np.rint(_box_blur(out, aug.blur_kernel)), 0, 255)
    if aug.noise_amp > 0:
        rng = np.random.default_rng(aug.seed)
        noise = rng.integers(-aug.noise_amp, aug.noise_amp + 1, size=out.shape)
        out = np.clip(out + noise, 0, 255)
    out_img = apply_geometric(out.astype(np.uint8), aug)
    out_mask = apply_geometric(mask, aug) if mask is not None else None
    return out_img, out_mask


# --------------------------------------------------------------------------
# Per-generation schedules


@dataclass
class GenerationSchedule:
    """Augmentation strength per self-training generation (1-based rows)."""

    name: str
    specs: list[AugmentationSpec]

    def spec_for(self, generation: int) -> AugmentationSpec:
        if not 1 <= generation <= len(self.specs):
            raise DataError(
                f"generation {generation} outside schedule of length {len(self.specs)}"
            )
        return self.specs[generation - 1]

    @property
    def max_strength(self) -> AugmentationSpec:
        return self.specs[-1]


PRESET_SCHEDULES = ("isic2018", "hela", "suim", "cityscapes")


def load_schedule(source: str | Path) -> GenerationSchedule:
    """Load a schedule from a preset name or a JSON file path."""
    if isinstance(source, str) and source in PRESET_SCHEDULES:
        text = resources.files("imseg.schedules").joinpath(f"{source}.json").read_text("utf-8")
        name = source
    else:
        path = Path(source)
        if not path.is_file():
            raise DataError(f"schedule {source!r} is neither a preset {PRESET_SCHEDULES} nor a file")
        text = path.read_text("utf-8")
        name = path.stem
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"schedule {source}: invalid JSON: {exc}") from exc
    rows = payload["generations"] if isinstance(payload, dict) else payload
    if not isinstance(rows, list) or not rows:
        raise DataError(f"schedule {source}: expected a non-empty array of spec objects")
    specs = [AugmentationSpec.from_dict(row) for row in rows]
    if isinstance(payload, dict) and payload.get("name"):
        name = str(payload["name"])
    return GenerationSchedule(name=name, specs=specs)


def build_ald(
    root: Path | str,
    spec: AugmentationSpec,
    seed: int,
    variants: int = ALD_VARIANTS,
) -> list[str]:
    """Materialize the augmented labeled dataset: LD plus ``variants`` copies each.

    Writes images/masks for ids ``<rid>_a<j>``, sets the manifest's ALD split
    (sorted originals + copies) and persists it. Augmentations are sampled at
    the given spec (normally the schedule's max strength), deterministically
    per (seed, record, variant).
    """
    root = Path(root)
    manifest = dataset_io.load_manifest(root)
    ld = manifest.split("LD")
    if not ld:
        raise DataError("cannot build ALD: manifest has no LD split")
    if variants < 1:
        raise DataError(f"variants must be >= 1, got {variants}")
    ids = list(ld)
    for rid in sorted(ld):
        image = dataset_io.read_image(dataset_io.image_path(root, rid))
        mask = dataset_io.read_mask(root, rid, manifest.mask_mode, manifest.num_classes)
        for j in range(1, variants + 1):
            aug = sample(spec, derive_seed("ald", seed, rid, j))
            img_a, mask_a = apply(image, mask, aug)
            vid = f"{rid}_a{j}"
            dataset_io.write_image(dataset_io.image_path(root, vid), img_a)
            dataset_io.write_mask(root, vid, mask_a, manifest.mask_mode, manifest.num_classes)
            ids.append(vid)
    manifest.splits["ALD"] = sorted(ids)
    dataset_io.save_manifest(root, manifest)
    return manifest.splits["ALD"]
