"""Pseudo-label pairs and combined-dataset (CD) assembly.

A pseudo pair is an unlabeled image plus the ensemble-consensus mask, with
inconsistent pixels blacked out of the image. Binary pairs are kept only when
the foreground outweighs the inconsistency mask; multiclass pairs are always
kept, with IM as a dedicated class 0 and every real class shifted up by one.

A combined dataset merges the labeled base split with pseudo pairs according
to an approach's composition rule and materializes as a dataset directory
(images/, masks/, im/) plus ``cd_manifest.json``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import augment as aug_mod
from . import dataset_io
from .consensus import ConsensusOutput
from .errors import DataError
from .metrics import iou
from .seeding import derive_seed


class Approach(str, Enum):
    """Training strategies; the value string is the CLI/config spelling."""

    FDT = "FDT"  # full-data baseline
    LDT = "LDT"  # labeled-only baseline
    ALDT = "ALDT"  # augmented-labeled baseline
    ME = "ME"  # model ensemble voting, no masking
    IE = "IE"  # input ensemble (augmented variants of one model)
    NS = "NS"  # noisy student: single teacher + ramps
    EVALNET = "EVALNET"  # per-mask quality filtering
    IM = "IM"  # inconsistency masking
    IM_PLUS = "IM_PLUS"  # IM + noisy-student ramps
    IM_PLUSPLUS = "IM_PLUSPLUS"  # IM+ with score-tiered copies
    AIM_PLUS = "AIM_PLUS"  # IM+ on the augmented labeled base
    AIM_PLUSPLUS = "AIM_PLUSPLUS"  # IM++ on the augmented labeled base

    @property
    def uses_im(self) -> bool:
        return self in (
            Approach.IM,
            Approach.IM_PLUS,
            Approach.IM_PLUSPLUS,
            Approach.AIM_PLUS,
            Approach.AIM_PLUSPLUS,
        )

    @property
    def ald_base(self) -> bool:
        return self in (Approach.ALDT, Approach.AIM_PLUS, Approach.AIM_PLUSPLUS)

    @property
    def is_baseline(self) -> bool:
        return self in (Approach.FDT, Approach.LDT, Approach.ALDT)

    @property
    def ramps(self) -> bool:
        """Approaches that ramp augmentation strength and model size per generation."""
        return self in (
            Approach.NS,
            Approach.IM_PLUS,
            Approach.IM_PLUSPLUS,
            Approach.AIM_PLUS,
            Approach.AIM_PLUSPLUS,
        )

    @property
    def tiered(self) -> bool:
        return self in (Approach.IM_PLUSPLUS, Approach.AIM_PLUSPLUS)

    @property
    def single_teacher(self) -> bool:
        return self in (Approach.NS, Approach.IE)


@dataclass
class PseudoPair:
    """One pseudo-labeled training record."""

    record_id: str
    image: np.ndarray
    label: np.ndarray
    im: np.ndarray
    source: str = "pseudo"
    tier_copies: int = 1


def blackout(image: np.ndarray, im: np.ndarray) -> np.ndarray:
    """Zero image pixels (all channels) wherever the inconsistency mask is set."""
    image = np.asarray(image)
    im = np.asarray(im) > 0
    if image.shape[:2] != im.shape:
        raise DataError(f"image {image.shape} and im {im.shape} disagree")
    out = image.copy()
    out[im] = 0
    return out


def make_pair_binary(rid: str, image: np.ndarray, consensus: ConsensusOutput) -> PseudoPair | None:
    """Build a binary pair, or None when foreground_px <= im_px (rejected).

    The strict filter drops pairs whose inconsistent area outweighs the
    agreed foreground — including fully-empty consensus masks.
    """
    fg = int(np.count_nonzero(consensus.final))
    im_px = int(np.count_nonzero(consensus.im))
    if fg <= im_px:
        return None
    return PseudoPair(
        record_id=rid,
        image=blackout(image, consensus.im),
        label=(np.asarray(consensus.final) > 0).astype(np.uint8),
        im=(np.asarray(consensus.im) > 0).astype(np.uint8),
    )


def make_pair_multiclass(
    rid: str, image: np.ndarray, consensus: ConsensusOutput, num_classes: int
) -> PseudoPair:
    """Build a multiclass pair: IM becomes class 0, real classes shift up by 1."""
    final = np.asarray(consensus.final)
    im = np.asarray(consensus.im) > 0
    top = int(final.max(initial=0))
    if top >= num_classes:
        raise DataError(f"{rid}: class id {top} overflows declared count {num_classes}")
    label = np.where(im, 0, final.astype(np.uint16) + 1).astype(np.uint8)
    return PseudoPair(
        record_id=rid,
        image=blackout(image, im),
        label=label,
        im=im.astype(np.uint8),
    )


def make_pair_plain(
    rid: str, image: np.ndarray, final: np.ndarray, mode: str, num_classes: int
) -> PseudoPair:
    """Build an unmasked pair (ensemble/noisy-student approaches): no blackout,
    empty IM, never rejected.

    Multiclass labels still live in the CD label space (class k -> k+1) so all
    CDs of a dataset share one space; a hard-vote disagreement that fell to
    class 0 stays conflated with background, which is exactly what the
    masked approaches avoid.
    """
    final = np.asarray(final)
    label_shape = final.shape[:2]
    if mode == "multiclass":
        top = int(final.max(initial=0))
        if top >= num_classes:
            raise DataError(f"{rid}: class id {top} overflows declared count {num_classes}")
        label = (final.astype(np.uint16) + 1).astype(np.uint8)
    else:
        label = (final > 0).astype(np.uint8)
    return PseudoPair(
        record_id=rid,
        image=np.asarray(image).copy(),
        label=label,
        im=np.zeros(label_shape, dtype=np.uint8),
    )


def make_pair_multilabel(
    rid: str, image: np.ndarray, channel_consensus: list[ConsensusOutput]
) -> PseudoPair:
    """Build a multilabel pair: per-channel votes, blackout under the IM union.

    Channel labels are zeroed under the union so no channel asserts foreground
    on a hidden pixel.
    """
    if not channel_consensus:
        raise DataError("multilabel pair needs at least one channel consensus")
    im_union = np.zeros_like(np.asarray(channel_consensus[0].im), dtype=bool)
    for c in channel_consensus:
        im_union |= np.asarray(c.im) > 0
    label = np.stack(
        [np.where(im_union, 0, np.asarray(c.final)).astype(np.uint8) for c in channel_consensus],
        axis=-1,
    )
    return PseudoPair(
        record_id=rid,
        image=blackout(image, im_union),
        label=label,
        im=im_union.astype(np.uint8),
    )


# --------------------------------------------------------------------------
# Score tiering


@dataclass(frozen=True)
class TierBounds:
    """Benchmark scores spanning the tier range (lower/upper reference models)."""

    min_bench: float
    max_bench: float

    def __post_init__(self) -> None:
        if not self.min_bench < self.max_bench:
            raise DataError(
                f"tier bounds need min < max, got ({self.min_bench}, {self.max_bench})"
            )


def tier_copies(score: float, bounds: TierBounds) -> int:
    """Map a quality score to 1..5 augmented copies.

    [min_bench, max_bench) splits into five equal left-inclusive intervals;
    scores below min_bench get 1 copy, scores at or above max_bench clamp to 5.
    Tier edges land on decimal fractions of the published benchmark scores, so
    the arithmetic runs on decimal-string Fractions: a score exactly on an
    edge always falls into the upper tier, with no binary-float drift.
    """
    s, lo, hi = (Fraction(str(float(v))) for v in (score, bounds.min_bench, bounds.max_bench))
    if s < lo:
        return 1
    width = (hi - lo) / 5
    idx = int((s - lo) / width)
    return min(idx, 4) + 1


# --------------------------------------------------------------------------
# Combined datasets


@dataclass(frozen=True)
class CdEntry:
    """One record of a combined dataset (the composition plan, no pixels)."""

    out_id: str
    kind: str  # "base" | "pseudo" | "pseudo_augmented"
    origin: str
    copy_index: int = 0


def compose_cd(
    approach: Approach,
    base_ids: list[str],
    pair_ids: list[str],
    scores: dict[str, float] | None = None,
    bounds: TierBounds | None = None,
) -> list[CdEntry]:
    """Plan a CD's record list for an approach (deterministic, sorted ids).

    Composition rules: IM/ME/IE/EVALNET add each pair once, unaugmented.
    NS/IM_PLUS replace each pair with one augmented copy. Tiered approaches
    (IM_PLUSPLUS/AIM_PLUSPLUS) emit ``tier_copies(score)`` augmented copies;
    the AIM variants additionally keep the unaugmented pair for balance.
    """
    entries = [CdEntry(rid, "base", rid) for rid in sorted(base_ids)]
    if approach.is_baseline:
        if pair_ids:
            raise DataError(f"{approach.value} takes no pseudo pairs")
        return entries
    if approach.tiered and pair_ids:
        if bounds is None:
            raise DataError(f"{approach.value} requires tier bounds")
        if scores is None:
            raise DataError(f"{approach.value} requires per-pair scores")
        missing = sorted(set(pair_ids) - set(scores))
        if missing:
            raise DataError(f"missing scores for {missing[:5]}")
    for rid in sorted(pair_ids):
        if approach in (Approach.ME, Approach.IE, Approach.EVALNET, Approach.IM):
            entries.append(CdEntry(rid, "pseudo", rid))
        elif approach in (Approach.NS, Approach.IM_PLUS):
            entries.append(CdEntry(f"{rid}_x1", "pseudo_augmented", rid, copy_index=1))
        elif approach is Approach.AIM_PLUS:
            entries.append(CdEntry(rid, "pseudo", rid))
            entries.append(CdEntry(f"{rid}_x1", "pseudo_augmented", rid, copy_index=1))
        elif approach.tiered:
            if approach is Approach.AIM_PLUSPLUS:
                entries.append(CdEntry(rid, "pseudo", rid))
            copies = tier_copies(scores[rid], bounds)
            for j in range(1, copies + 1):
                entries.append(CdEntry(f"{rid}_x{j}", "pseudo_augmented", rid, copy_index=j))
        else:  # pragma: no cover - enum is exhaustive
            raise DataError(f"no composition rule for {approach}")
    return entries


@dataclass
class CombinedDataset:
    """A materialized CD: its directory plus the composition descriptor."""

    root: Path
    descriptor: dict


def build_cd(
    out_dir: Path | str,
    dataset_root: Path | str,
    manifest: dataset_io.DatasetManifest,
    approach: Approach,
    generation: int,
    pairs: list[PseudoPair],
    seed: int,
    schedule: aug_mod.GenerationSchedule | None = None,
    scores: dict[str, float] | None = None,
    bounds: TierBounds | None = None,
    base_split: str | None = None,
    rejected: int = 0,
) -> CombinedDataset:
    """Materialize a combined dataset for one generation.

    Base records come from the manifest's LD split (ALD for the augmented-base
    approaches); multiclass base masks are remapped into the CD label space
    (class k -> k+1, no IM pixels). Augmented pseudo copies draw their
    augmentation from the generation's schedule row, move image/label/im
    identically through the geometric ops, and re-apply the blackout so image
    pixels stay 0 exactly where im=1.
    """
    out_dir = Path(out_dir)
    dataset_root = Path(dataset_root)
    mode = manifest.mode
    split_name = base_split or ("ALD" if approach.ald_base else "LD")
    base_ids = manifest.split(split_name)
    if not base_ids:
        raise DataError(f"manifest split {split_name} is empty; cannot build a CD")
    by_id = {p.record_id: p for p in pairs}
    if len(by_id) != len(pairs):
        raise DataError("duplicate pseudo pair record ids")
    entries = compose_cd(approach, base_ids, sorted(by_id), scores=scores, bounds=bounds)

    needs_aug = any(e.kind == "pseudo_augmented" for e in entries)
    if needs_aug and schedule is None:
        raise DataError(f"{approach.value} augments pairs and needs a schedule")
    spec = schedule.spec_for(generation) if needs_aug else None
    remap = mode == "multiclass"

    counts = {"base": 0, "pseudo": 0, "pseudo_augmented": 0}
    for entry in entries:
        counts[entry.kind] += 1
        if entry.kind == "base":
            image = dataset_io.read_image(dataset_io.image_path(dataset_root, entry.origin))
            label = dataset_io.read_mask(
                dataset_root, entry.origin, manifest.mask_mode, manifest.num_classes
            )
            if remap:
                label = (label.astype(np.uint16) + 1).astype(np.uint8)
            im = np.zeros(image.shape[:2], dtype=np.uint8)
        else:
            pair = by_id[entry.origin]
            image, label, im = pair.image, pair.label, pair.im
            if entry.kind == "pseudo_augmented":
                a = aug_mod.sample(
                    spec, derive_seed("cd", seed, generation, entry.origin, entry.copy_index)
                )
                image, label = aug_mod.apply(image, label, a)
                im = aug_mod.apply_geometric(im, a)
                image = blackout(image, im)  # photometrics repaint zeros; restore
        dataset_io.write_image(dataset_io.image_path(out_dir, entry.out_id), image)
        dataset_io.write_mask(
            out_dir, entry.out_id, label, manifest.mask_mode, manifest.num_classes, remapped=remap
        )
        dataset_io.write_im_mask(dataset_io.im_path(out_dir, entry.out_id), im)

    descriptor = {
        "format_version": 1,
        "approach": approach.value,
        "generation": generation,
        "base_split": split_name,
        "mask_mode": manifest.mask_mode,
        "num_classes": manifest.num_classes,
        "im_remapped": remap,
        "image_shape": list(manifest.image_shape),
        "counts": {**counts, "total": len(entries), "rejected_pairs": rejected},
        "entries": [
            {"id": e.out_id, "kind": e.kind, "origin": e.origin, "copy": e.copy_index}
            for e in entries
        ],
    }
    dataset_io.write_json(out_dir / "cd_manifest.json", descriptor)
    cd_manifest = dataset_io.DatasetManifest(
        name=f"cd-{approach.value.lower()}-gen{generation}",
        image_shape=manifest.image_shape,
        mask_mode=manifest.mask_mode,
        num_classes=manifest.num_classes,
        splits={"TRAIN": [e.out_id for e in entries]},
    )
    dataset_io.save_manifest(out_dir, cd_manifest)
    if sum(counts.values()) != len(entries):
        raise AssertionError("descriptor counts must reconcile with entries")
    return CombinedDataset(root=out_dir, descriptor=descriptor)


def load_cd_descriptor(cd_dir: Path | str) -> dict:
    path = Path(cd_dir) / "cd_manifest.json"
    if not path.is_file():
        raise DataError(f"{cd_dir} has no cd_manifest.json")
    import json

    try:
        return json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc


# --------------------------------------------------------------------------
# Quality-network training records


@dataclass
class EvalRecord:
    """One (mask, quality-target) training record for a mask-scoring model."""

    record_id: str
    model_id: str
    mask: np.ndarray
    target: float | list[float]
    presence: list[int] | None = None


def build_evalnet_records(
    predictions: dict[str, dict[str, np.ndarray]],
    gts: dict[str, np.ndarray],
    mode: str,
    num_classes: int = 1,
) -> list[EvalRecord]:
    """Assemble scorer training records from model predictions on labeled data.

    One record per (model, image) with the prediction's true quality as
    target, plus one gt-vs-gt exemplar per image with target 1.0. Multiclass
    targets are per-class IoU vectors with gt presence bits.
    """
    records: list[EvalRecord] = []
    model_ids = sorted(predictions)
    for model_id in model_ids:
        preds = predictions[model_id]
        missing = sorted(set(gts) - set(preds))
        if missing:
            raise DataError(f"model {model_id} lacks predictions for {missing[:5]}")
        for rid in sorted(gts):
            records.append(_eval_record(rid, model_id, preds[rid], gts[rid], mode, num_classes))
    for rid in sorted(gts):
        records.append(_eval_record(rid, "gt", gts[rid], gts[rid], mode, num_classes))
    return records


def _eval_record(
    rid: str, model_id: str, pred: np.ndarray, gt: np.ndarray, mode: str, num_classes: int
) -> EvalRecord:
    if mode == "binary":
        return EvalRecord(rid, model_id, pred, target=iou(pred, gt))
    per_class = [iou(np.asarray(pred) == c, np.asarray(gt) == c) for c in range(num_classes)]
    presence = [int(bool(np.count_nonzero(np.asarray(gt) == c))) for c in range(num_classes)]
    return EvalRecord(rid, model_id, pred, target=per_class, presence=presence)
