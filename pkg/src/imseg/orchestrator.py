"""Self-training generation loop with resumable on-disk state.

A run executes phases in order (predict -> consensus [-> score] -> cd ->
train -> evaluate -> promote per generation), persisting every artifact under
``runs/<name>/``. Completed phases are recorded in ``state.json`` together
with a digest of their artifacts, so re-invoking the run never repeats a
finished phase and detects corrupted run directories.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import augment as aug_mod
from . import dataset_io, pseudo_label
from .archspec import alpha_schedule, steps_per_epoch
from .backends import Backend, parse_backend, read_prediction
from .consensus import ConsensusOutput, binarize, im_binary, im_multiclass, soft_vote
from .errors import DataError
from .metrics import evaluate_masks, score_mask
from .morphology import refine_im
from .pseudo_label import Approach, PseudoPair, TierBounds
from .seeding import derive_seed

log = logging.getLogger(__name__)

STATE_NAME = "state.json"
RUN_CONFIG_NAME = "run.json"
REPORT_NAME = "report.json"

_BASELINE_SPLIT = {Approach.FDT: "FD", Approach.LDT: "LD", Approach.ALDT: "ALD"}
_VOTING_MODES = ("auto", "hard", "soft")
_METRIC_KEYS = {"binary": ("iou", "dice"), "multiclass": ("miou", "mpa"), "multilabel": ("miou", "mpa")}


# --------------------------------------------------------------------------
# Run configuration


@dataclass
class RunConfig:
    """Everything one self-training run needs; JSON round-trippable."""

    name: str
    dataset_root: str
    approach: str
    generations: int = 5
    n_students: int = 5
    k_top: int = 2
    n_teachers: int = 2
    voting: str = "auto"
    erode: int = 0
    dilate: int = 0
    schedule: str | list | None = None
    alpha: list = field(default_factory=lambda: [1.0, 2.0])
    tier_bounds: list | None = None
    score_threshold: float | None = None
    epochs: int = 50
    batch: int = 32
    steps_min: int | None = None
    selection_metric: str = "auto"
    seed: int = 0
    student_backend: str | dict = "builtin:centroid"
    teacher_backend: str | dict | None = None
    scorer_backend: str | dict | None = None
    scorer_model: str | None = None
    ie_variants: int = 3
    out_root: str = "runs"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown run config keys {sorted(unknown)}")
        missing = {"name", "dataset_root", "approach"} - set(d)
        if missing:
            raise DataError(f"run config is missing {sorted(missing)}")
        return cls(**d)

    @classmethod
    def load(cls, path: Path | str) -> "RunConfig":
        try:
            payload = json.loads(Path(path).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read run config {path}: {exc}") from exc
        return cls.from_dict(payload)

    @property
    def approach_enum(self) -> Approach:
        try:
            return Approach(str(self.approach).upper())
        except ValueError:
            valid = ", ".join(a.value for a in Approach)
            raise DataError(f"unknown approach {self.approach!r}; one of: {valid}") from None

    def validate(self) -> None:
        approach = self.approach_enum
        if not self.name or "/" in self.name:
            raise DataError(f"run name must be a nonempty path-free token, got {self.name!r}")
        if self.generations < 1:
            raise DataError("generations must be >= 1")
        if not 1 <= self.k_top <= self.n_students:
            raise DataError(f"need 1 <= k_top <= n_students, got {self.k_top}/{self.n_students}")
        if self.n_teachers < 1:
            raise DataError("n_teachers must be >= 1")
        if self.teacher_backend is None and self.n_teachers > self.k_top:
            raise DataError(
                f"promoted teachers come from the top-k pool: n_teachers ({self.n_teachers}) "
                f"must be <= k_top ({self.k_top})"
            )
        if self.voting not in _VOTING_MODES:
            raise DataError(f"voting must be one of {_VOTING_MODES}, got {self.voting!r}")
        for k, label in ((self.erode, "erode"), (self.dilate, "dilate")):
            if k != 0 and (k < 3 or k % 2 == 0):
                raise DataError(f"{label} kernel must be 0 or an odd integer >= 3, got {k}")
        if not (isinstance(self.alpha, (list, tuple)) and len(self.alpha) == 2):
            raise DataError(f"alpha must be [start, end], got {self.alpha!r}")
        if min(self.alpha) <= 0:
            raise DataError(f"alpha values must be positive, got {self.alpha!r}")
        if self.tier_bounds is not None:
            if not (isinstance(self.tier_bounds, (list, tuple)) and len(self.tier_bounds) == 2):
                raise DataError(f"tier_bounds must be [min, max], got {self.tier_bounds!r}")
            TierBounds(float(self.tier_bounds[0]), float(self.tier_bounds[1]))
        if approach.tiered and self.tier_bounds is None:
            raise DataError(f"{approach.value} needs tier_bounds")
        if approach.tiered and self.scorer_backend is None:
            raise DataError(f"{approach.value} scores pairs and needs a scorer_backend")
        if approach is Approach.EVALNET:
            if self.score_threshold is None:
                raise DataError("evalnet needs a score_threshold")
            if self.scorer_backend is None:
                raise DataError("evalnet needs a scorer_backend")
        if self.epochs < 1 or self.batch < 1:
            raise DataError("epochs and batch must be >= 1")
        if self.steps_min is not None and self.steps_min < 0:
            raise DataError("steps_min must be >= 0")
        if self.selection_metric != "auto" and self.selection_metric not in (
            "iou",
            "dice",
            "miou",
            "mpa",
        ):
            raise DataError(f"unknown selection_metric {self.selection_metric!r}")
        if self.ie_variants < 2:
            raise DataError("ie_variants must be >= 2")
        if self.teacher_backend is not None:
            spec = self.teacher_backend
            if not (isinstance(spec, str) and spec.startswith("builtin:noisy_oracle")):
                raise DataError(
                    "teacher_backend supports builtin:noisy_oracle only; leave it null to "
                    "bootstrap generation-1 teachers by training students on the labeled base"
                )


def select_top_k(metric_values: list[float], k: int) -> list[int]:
    """Indices of the k highest metrics; ties go to the lower index."""
    if k > len(metric_values):
        raise DataError(f"cannot select top {k} of {len(metric_values)} students")
    order = sorted(range(len(metric_values)), key=lambda i: (-metric_values[i], i))
    return order[:k]


# --------------------------------------------------------------------------
# Voting over probability tensors


def hard_mask(probs: np.ndarray, mode: str) -> np.ndarray:
    """Collapse one probability tensor (H,W,C) to a hard mask."""
    probs = np.asarray(probs)
    if mode == "binary":
        return binarize(probs)
    if mode == "multiclass":
        return soft_vote([probs])
    return (probs >= 0.5).astype(np.uint8)


def resolve_voting(voting: str, mode: str) -> str:
    """'auto' -> soft voting for multiclass (argmax ties are acute in hard
    votes there), unanimity hard voting for binary/multilabel."""
    if voting == "auto":
        return "soft" if mode == "multiclass" else "hard"
    return voting


def vote_ensemble(prob_maps: list[np.ndarray], mode: str, voting: str) -> np.ndarray:
    """Combine per-model probability tensors into one final mask (no IM)."""
    voting = resolve_voting(voting, mode)
    if voting == "soft":
        if mode == "binary":
            return binarize(np.mean([np.asarray(p, dtype=np.float64) for p in prob_maps], axis=0))
        if mode == "multiclass":
            return soft_vote(prob_maps)
        return (np.mean([np.asarray(p, dtype=np.float64) for p in prob_maps], axis=0) >= 0.5).astype(
            np.uint8
        )
    hards = [hard_mask(p, mode) for p in prob_maps]
    if mode == "binary":
        return im_binary(hards).final
    if mode == "multiclass":
        return im_multiclass(hards).final
    planes = [
        im_binary([h[:, :, c] for h in hards]).final for c in range(hards[0].shape[2])
    ]
    return np.stack(planes, axis=-1)


def consensus_with_im(
    hard_masks: list[np.ndarray], mode: str, erode: int, dilate: int
) -> list[ConsensusOutput]:
    """Unanimity consensus + IM, refined; one output per channel (1 unless multilabel)."""
    if mode == "binary":
        outs = [im_binary(hard_masks)]
    elif mode == "multiclass":
        outs = [im_multiclass(hard_masks)]
    else:
        outs = [
            im_binary([h[:, :, c] for h in hard_masks]) for c in range(hard_masks[0].shape[2])
        ]
    if erode or dilate:
        outs = [refine_im(o, erode, dilate) for o in outs]
    return outs


def plain_outputs(final: np.ndarray, mode: str, n_models: int) -> list[ConsensusOutput]:
    """Wrap a voted final mask in ConsensusOutput(s) with empty IM."""
    final = np.asarray(final)
    zeros = np.zeros(final.shape[:2], dtype=np.uint8)
    if mode == "multilabel":
        return [
            ConsensusOutput(final=final[:, :, c], im=zeros, n_models=n_models)
            for c in range(final.shape[2])
        ]
    return [ConsensusOutput(final=final, im=zeros, n_models=n_models)]


def input_ensemble_predict(
    backend: Backend,
    model_path: Path | str,
    image: np.ndarray,
    k_variants: int,
    spec: aug_mod.AugmentationSpec,
    seed: int,
    mode: str = "binary",
    voting: str = "hard",
    erode: int = 0,
    dilate: int = 0,
    workdir: Path | str | None = None,
    rid: str = "record",
) -> list[ConsensusOutput]:
    """Predict k transformed variants of one image, realign, and vote.

    Variant 0 is always the untransformed image; variants 1..k-1 draw from
    ``spec``. Each prediction's geometry is inverted via map_back, then the
    realigned tensors are voted exactly as a model ensemble would be: hard
    voting yields a unanimity consensus with its disagreement mask, soft
    voting an averaged final with an empty one.
    """
    if k_variants < 2:
        raise DataError("input ensembling needs k >= 2 variants")
    spec.validate()
    workdir = Path(workdir) if workdir is not None else Path("ie_work")
    identity = aug_mod.ConcreteAugmentation(seed=derive_seed(seed, "ie", 0))
    augs = [identity] + [
        aug_mod.sample(spec, derive_seed(seed, "ie", v)) for v in range(1, k_variants)
    ]
    aligned: list[np.ndarray] = []
    for v, aug in enumerate(augs):
        vdir = workdir / f"v{v}"
        in_dir, out_dir = vdir / "in", vdir / "out"
        in_dir.mkdir(parents=True, exist_ok=True)
        variant, _ = aug_mod.apply(image, None, aug)
        dataset_io.write_image(in_dir / f"{rid}.png", variant)
        backend.predict(model_path, in_dir, out_dir)
        probs = _read_any_prediction(out_dir, rid)
        realigned = aug_mod.map_back(probs, aug)
        if realigned.shape[:2] != image.shape[:2]:
            raise DataError(
                f"variant {v} of {rid}: realigned prediction {realigned.shape[:2]} does "
                f"not match the input {image.shape[:2]}"
            )
        aligned.append(realigned)
    if resolve_voting(voting, mode) == "soft":
        return plain_outputs(vote_ensemble(aligned, mode, "soft"), mode, len(aligned))
    return consensus_with_im([hard_mask(p, mode) for p in aligned], mode, erode, dilate)


def _read_any_prediction(out_dir: Path, rid: str) -> np.ndarray:
    # Shape-agnostic read: the variant may be rotated, so only rank is checked.
    path = Path(out_dir) / f"{rid}.imt1"
    if not path.is_file():
        raise DataError(f"backend produced no prediction for {rid} at {path}")
    arr = dataset_io.read_tensor(path, expect_dtype=np.float32)
    if arr.ndim != 3:
        raise DataError(f"prediction for {rid} must be (H,W,C), got shape {arr.shape}")
    return arr


# --------------------------------------------------------------------------
# Consensus artifact layout (shared by the runner and the build-cd CLI step)
#
# <dir>/<rid>.f.png + <rid>.im.png               binary ({0,255}) / multiclass (ids)
# <dir>/<rid>.f.c<k>.png + <rid>.im.c<k>.png     multilabel, one pair per channel


def write_consensus_artifacts(
    cdir: Path, rid: str, outs: list[ConsensusOutput], mode: str
) -> None:
    cdir = Path(cdir)
    if mode == "multilabel":
        for c, out in enumerate(outs):
            dataset_io.write_im_mask(cdir / f"{rid}.f.c{c}.png", out.final)
            dataset_io.write_im_mask(cdir / f"{rid}.im.c{c}.png", out.im)
        return
    (out,) = outs
    if mode == "binary":
        dataset_io.write_im_mask(cdir / f"{rid}.f.png", out.final)
    else:
        dataset_io.write_image(cdir / f"{rid}.f.png", np.asarray(out.final, dtype=np.uint8))
    dataset_io.write_im_mask(cdir / f"{rid}.im.png", out.im)


def read_consensus_artifacts(
    cdir: Path, rid: str, mode: str, num_classes: int, n_models: int
) -> list[ConsensusOutput] | None:
    """None when the record has no consensus (e.g. dropped by a score filter)."""
    cdir = Path(cdir)
    if mode == "multilabel":
        if not (cdir / f"{rid}.f.c0.png").is_file():
            return None
        outs = []
        for c in range(num_classes):
            f = dataset_io.read_im_mask(cdir / f"{rid}.f.c{c}.png")
            im = dataset_io.read_im_mask(cdir / f"{rid}.im.c{c}.png")
            outs.append(ConsensusOutput(final=f, im=im, n_models=n_models))
        return outs
    fpath = cdir / f"{rid}.f.png"
    if not fpath.is_file():
        return None
    final = dataset_io.read_im_mask(fpath) if mode == "binary" else dataset_io.read_image(fpath)
    im = dataset_io.read_im_mask(cdir / f"{rid}.im.png")
    return [ConsensusOutput(final=final, im=im, n_models=n_models)]


def pairs_from_consensus(
    dataset_root: Path,
    manifest: dataset_io.DatasetManifest,
    cdir: Path,
    approach: Approach,
    n_models: int,
) -> tuple[list[PseudoPair], int]:
    """Build pseudo pairs for every ULD record with consensus artifacts.

    Returns (pairs, rejected) where rejected counts binary pairs dropped by
    the foreground-vs-IM filter. Records without artifacts are skipped.
    """
    mode = manifest.mode
    pairs: list[PseudoPair] = []
    rejected = 0
    for rid in manifest.split("ULD"):
        outs = read_consensus_artifacts(cdir, rid, mode, manifest.num_classes, n_models)
        if outs is None:
            continue
        image = dataset_io.read_image(dataset_io.image_path(dataset_root, rid))
        if approach.uses_im:
            if mode == "binary":
                pair = pseudo_label.make_pair_binary(rid, image, outs[0])
                if pair is None:
                    rejected += 1
                    continue
            elif mode == "multiclass":
                pair = pseudo_label.make_pair_multiclass(rid, image, outs[0], manifest.num_classes)
            else:
                pair = pseudo_label.make_pair_multilabel(rid, image, outs)
        else:
            final = (
                np.stack([o.final for o in outs], axis=-1)
                if mode == "multilabel"
                else outs[0].final
            )
            pair = pseudo_label.make_pair_plain(rid, image, final, mode, manifest.num_classes)
        pairs.append(pair)
    return pairs, rejected


def masked_final(outs: list[ConsensusOutput], mode: str) -> np.ndarray:
    """The pair label viewed in the dataset's own label space (IM -> 0)."""
    if mode == "multilabel":
        union = np.zeros_like(np.asarray(outs[0].im), dtype=bool)
        for o in outs:
            union |= np.asarray(o.im) > 0
        return np.stack([np.where(union, 0, o.final).astype(np.uint8) for o in outs], axis=-1)
    (out,) = outs
    return np.where(np.asarray(out.im) > 0, 0, out.final).astype(np.uint8)


# --------------------------------------------------------------------------
# Runner


def _sha256_paths(paths: list[Path], base: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(paths, key=lambda q: q.as_posix()):
        h.update(p.relative_to(base).as_posix().encode())
        h.update(b"\x00")
        h.update(p.read_bytes())
        h.update(b"\x00")
    return h.hexdigest()


def _atomic_json(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", "utf-8")
    os.replace(tmp, path)


class Runner:
    """Executes one RunConfig against one dataset, phase by phase."""

    def __init__(self, config: RunConfig, jobs: int = 1, stop_after: str | None = None):
        config.validate()
        self.cfg = config
        self.jobs = max(1, jobs)
        self.stop_after = stop_after
        self.approach = config.approach_enum
        self.dataset_root = Path(config.dataset_root)
        self.manifest = dataset_io.load_manifest(self.dataset_root)
        self.mode = self.manifest.mode
        self.run_dir = Path(config.out_root) / config.name
        if config.schedule is None:
            self.schedule = None
        elif isinstance(config.schedule, str):
            self.schedule = aug_mod.load_schedule(config.schedule)
        else:
            self.schedule = aug_mod.GenerationSchedule(
                name="inline",
                specs=[aug_mod.AugmentationSpec.from_dict(r) for r in config.schedule],
            )
        self.generations = 1 if self.approach.is_baseline else config.generations
        self.state: dict = {"format_version": 1, "completed": {}, "teachers": {}}
        self._validate_against_dataset()

    # -------------------------------------------------- config/dataset checks

    def _validate_against_dataset(self) -> None:
        cfg, approach, manifest = self.cfg, self.approach, self.manifest
        if not approach.is_baseline:
            if not manifest.split("ULD"):
                raise DataError("this approach pseudo-labels ULD, but the manifest has no ULD split")
            if not manifest.split("LD"):
                raise DataError("this approach needs an LD split (run the split step first)")
        if approach.ald_base and not manifest.split("ALD"):
            raise DataError(
                f"{approach.value} trains on the augmented labeled base; build the ALD split first"
            )
        needs_schedule = (
            approach in (Approach.NS, Approach.IE)
            or approach.tiered
            or approach in (Approach.IM_PLUS, Approach.AIM_PLUS)
        )
        if needs_schedule and self.schedule is None:
            raise DataError(f"{approach.value} augments pseudo pairs and needs a schedule")
        if self.schedule is not None and len(self.schedule.specs) < self.generations:
            raise DataError(
                f"schedule has {len(self.schedule.specs)} rows but the run spans "
                f"{self.generations} generations"
            )
        metric = cfg.selection_metric
        if metric != "auto" and metric not in _METRIC_KEYS[self.mode]:
            raise DataError(
                f"selection_metric {metric!r} does not apply to {self.mode} masks; "
                f"valid: {_METRIC_KEYS[self.mode]}"
            )

    # -------------------------------------------------- small helpers

    @property
    def metric_name(self) -> str:
        if self.cfg.selection_metric != "auto":
            return self.cfg.selection_metric
        return "iou" if self.mode == "binary" else "miou"

    @property
    def n_teachers_effective(self) -> int:
        return 1 if self.approach.single_teacher else self.cfg.n_teachers

    @property
    def prediction_channels(self) -> int:
        return 1 if self.mode == "binary" else self.manifest.num_classes

    def _alpha(self, generation: int) -> float:
        return alpha_schedule(
            tuple(self.cfg.alpha), generation, self.generations, ramp=self.approach.ramps
        )

    def _steps_min(self) -> int:
        if self.cfg.steps_min is not None:
            return self.cfg.steps_min
        if self.approach is Approach.EVALNET:
            fd_steps = steps_per_epoch(len(self.manifest.split("FD")), self.cfg.batch)
            return math.ceil(fd_steps / 3)
        return 0

    def _student_backend(self) -> Backend:
        return parse_backend(self.cfg.student_backend, self.dataset_root, jobs=self.jobs)

    def _teacher_backend(self) -> Backend:
        return parse_backend(self.cfg.teacher_backend, self.dataset_root, jobs=self.jobs)

    def _backend_for(self, kind: str) -> Backend:
        return self._teacher_backend() if kind == "teacher" else self._student_backend()

    def _teachers(self, generation: int) -> list[tuple[str, Path]]:
        entries = self.state["teachers"].get(str(generation))
        if not entries:
            raise DataError(f"no teachers recorded for generation {generation}; state is corrupt")
        picked = entries[: self.n_teachers_effective]
        return [(e["backend"], self.run_dir / e["path"]) for e in picked]

    def _gen_dir(self, generation: int) -> Path:
        return self.run_dir / f"gen{generation}"

    def _expected_shape(self) -> tuple[int, int, int]:
        h, w, _ = self.manifest.image_shape
        return (h, w, self.prediction_channels)

    def _load_gts(self, split: str) -> dict[str, np.ndarray]:
        return {
            rid: dataset_io.read_mask(
                self.dataset_root, rid, self.manifest.mask_mode, self.manifest.num_classes
            )
            for rid in self.manifest.split(split)
        }

    # -------------------------------------------------- consensus artifact IO

    def _write_consensus(self, cdir: Path, rid: str, outs: list[ConsensusOutput]) -> None:
        write_consensus_artifacts(cdir, rid, outs, self.mode)

    def _read_consensus(self, cdir: Path, rid: str) -> list[ConsensusOutput] | None:
        return read_consensus_artifacts(
            cdir, rid, self.mode, self.manifest.num_classes, self.n_teachers_effective
        )

    # -------------------------------------------------- phase plan

    def phase_plan(self) -> list[tuple[str, str]]:
        plan: list[tuple[str, str]] = [("setup", "inputs")]
        if self.approach.is_baseline:
            plan += [("gen1", p) for p in ("cd", "train", "evaluate")]
            plan.append(("final", "report"))
            return plan
        if self.cfg.teacher_backend is not None:
            plan.append(("setup", "teachers"))
        else:
            plan += [("bootstrap", p) for p in ("cd", "train", "evaluate", "promote")]
        for g in range(1, self.generations + 1):
            stage = f"gen{g}"
            if self.approach is Approach.IE:
                plan.append((stage, "consensus"))
            else:
                plan += [(stage, "predict"), (stage, "consensus")]
            if self.approach.tiered:
                plan.append((stage, "score"))
            plan += [(stage, p) for p in ("cd", "train", "evaluate", "promote")]
        plan.append(("final", "report"))
        return plan

    # -------------------------------------------------- state persistence

    def _state_path(self) -> Path:
        return self.run_dir / STATE_NAME

    def _load_state(self) -> None:
        path = self._state_path()
        if path.is_file():
            try:
                self.state = json.loads(path.read_text("utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise DataError(f"cannot read run state {path}: {exc}") from exc

    def _save_state(self) -> None:
        _atomic_json(self._state_path(), self.state)

    def _mark_complete(self, key: str, artifacts: list[Path]) -> None:
        digest = _sha256_paths(artifacts, self.run_dir) if artifacts else ""
        self.state["completed"][key] = digest
        self._save_state()

    def _verify_complete(self, key: str, artifacts: list[Path]) -> None:
        recorded = self.state["completed"][key]
        if not recorded:
            return
        missing = [p for p in artifacts if not p.is_file()]
        if missing or _sha256_paths(artifacts, self.run_dir) != recorded:
            raise DataError(
                f"phase {key} is marked complete but its artifacts changed or vanished; "
                f"the run directory {self.run_dir} is corrupt — delete it to start over"
            )

    # -------------------------------------------------- entry point

    def run(self) -> dict:
        cfg_dict = self.cfg.to_dict()
        run_json = self.run_dir / RUN_CONFIG_NAME
        if run_json.is_file():
            existing = json.loads(run_json.read_text("utf-8"))
            if existing != cfg_dict:
                raise DataError(
                    f"{self.run_dir} was created from a different config; "
                    "use a new run name or restore the original run.json"
                )
            self._load_state()
        else:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            dataset_io.write_json(run_json, cfg_dict)
        dispatch = {
            "inputs": self._phase_inputs,
            "teachers": self._phase_teachers,
            "predict": self._phase_predict,
            "consensus": self._phase_consensus,
            "score": self._phase_score,
            "cd": self._phase_cd,
            "train": self._phase_train,
            "evaluate": self._phase_evaluate,
            "promote": self._phase_promote,
            "report": self._phase_report,
        }
        for stage, phase in self.phase_plan():
            key = f"{stage}/{phase}"
            if key in self.state["completed"]:
                self._verify_complete(key, self._expected_artifacts(stage, phase))
                log.info("skip %s (already complete)", key)
            else:
                log.info("run %s", key)
                artifacts = dispatch[phase](stage)
                self._mark_complete(key, artifacts)
            if self.stop_after is not None and key == self.stop_after:
                return {"stopped_after": key, "run_dir": str(self.run_dir)}
        return json.loads((self.run_dir / REPORT_NAME).read_text("utf-8"))

    def _expected_artifacts(self, stage: str, phase: str) -> list[Path]:
        # The digest set per phase, mirrored by each phase's return value.
        base = self.run_dir if stage in ("setup", "final") else self.run_dir / stage
        if phase == "inputs":
            out = [self.run_dir / "inputs" / "val" / f"{r}.png" for r in self.manifest.split("VAL")]
            if not self.approach.is_baseline:
                out += [
                    self.run_dir / "inputs" / "uld" / f"{r}.png"
                    for r in self.manifest.split("ULD")
                ]
            return out
        if phase == "teachers":
            return sorted((self.run_dir / "teachers").glob("t*.model"))
        if phase == "predict":
            return sorted((base / "predictions").rglob("*.imt1"))
        if phase == "consensus":
            out = sorted((base / "consensus").glob("*.png"))
            scores = base / "scores.json"
            return out + ([scores] if scores.is_file() else [])
        if phase == "score":
            return [base / "scores.json"]
        if phase == "cd":
            return [base / "cd" / "cd_manifest.json"]
        if phase == "train":
            return sorted((base / "students").glob("student*.model"))
        if phase == "evaluate":
            return [base / REPORT_NAME]
        if phase == "promote":
            return []
        return [self.run_dir / REPORT_NAME]

    # -------------------------------------------------- phases

    def _phase_inputs(self, stage: str) -> list[Path]:
        out = []
        splits = [("val", "VAL")] + ([] if self.approach.is_baseline else [("uld", "ULD")])
        for sub, split in splits:
            dest = self.run_dir / "inputs" / sub
            dest.mkdir(parents=True, exist_ok=True)
            for rid in self.manifest.split(split):
                src = dataset_io.image_path(self.dataset_root, rid)
                if not src.is_file():
                    raise DataError(f"dataset image missing: {src}")
                target = dest / f"{rid}.png"
                shutil.copyfile(src, target)
                out.append(target)
        return out

    def _phase_teachers(self, stage: str) -> list[Path]:
        backend = self._teacher_backend()
        tdir = self.run_dir / "teachers"
        tdir.mkdir(parents=True, exist_ok=True)
        entries, out = [], []
        for j in range(self.n_teachers_effective):
            model = tdir / f"t{j}.model"
            backend.train(
                cd_dir=self.dataset_root,
                model_out=model,
                alpha=self._alpha(1),
                epochs=self.cfg.epochs,
                batch=self.cfg.batch,
                steps_min=self._steps_min(),
                seed=derive_seed(self.cfg.seed, "teacher", j),
            )
            entries.append({"backend": "teacher", "path": model.relative_to(self.run_dir).as_posix()})
            out.append(model)
        self.state["teachers"]["1"] = entries
        return out

    def _bootstrap_cd(self) -> Path:
        return self.run_dir / "bootstrap" / "cd"

    def _phase_predict(self, stage: str) -> list[Path]:
        g = int(stage[3:])
        teachers = self._teachers(g)
        uld_inputs = self.run_dir / "inputs" / "uld"
        pred_root = self._gen_dir(g) / "predictions"

        def one(item: tuple[int, tuple[str, Path]]) -> None:
            j, (kind, model) = item
            self._backend_for(kind).predict(model, uld_inputs, pred_root / f"t{j}")

        items = list(enumerate(teachers))
        if self.jobs > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                list(pool.map(one, items))
        else:
            for item in items:
                one(item)
        out = []
        shape = self._expected_shape()
        for j in range(len(teachers)):
            for rid in self.manifest.split("ULD"):
                read_prediction(pred_root / f"t{j}", rid, shape)
                out.append(pred_root / f"t{j}" / f"{rid}.imt1")
        return out

    def _phase_consensus(self, stage: str) -> list[Path]:
        g = int(stage[3:])
        gen_dir = self._gen_dir(g)
        cdir = gen_dir / "consensus"
        cdir.mkdir(parents=True, exist_ok=True)
        uld = self.manifest.split("ULD")
        shape = self._expected_shape()

        if self.approach is Approach.IE:
            return self._consensus_input_ensemble(g, cdir, uld)
        if self.approach is Approach.EVALNET:
            return self._consensus_evalnet(g, cdir, uld, shape)
        teachers = self._teachers(g)
        pred_root = gen_dir / "predictions"
        for rid in uld:
            probs = [
                read_prediction(pred_root / f"t{j}", rid, shape) for j in range(len(teachers))
            ]
            if self.approach.uses_im:
                outs = consensus_with_im(
                    [hard_mask(p, self.mode) for p in probs],
                    self.mode,
                    self.cfg.erode,
                    self.cfg.dilate,
                )
            else:  # ME / NS: vote without keeping the IM
                final = vote_ensemble(probs, self.mode, self.cfg.voting)
                outs = plain_outputs(final, self.mode, len(teachers))
            self._write_consensus(cdir, rid, outs)
        return sorted(cdir.glob("*.png"))

    def _consensus_input_ensemble(self, g: int, cdir: Path, uld: list[str]) -> list[Path]:
        (kind, model) = self._teachers(g)[0]
        backend = self._backend_for(kind)
        # "Moderate" transforms: the second schedule row, or the first for
        # single-row schedules.
        spec = self.schedule.spec_for(min(2, len(self.schedule.specs)))
        work = self._gen_dir(g) / "ie_work"
        if work.exists():
            shutil.rmtree(work)
        for rid in uld:
            image = dataset_io.read_image(dataset_io.image_path(self.dataset_root, rid))
            outs = input_ensemble_predict(
                backend,
                model,
                image,
                self.cfg.ie_variants,
                spec,
                derive_seed(self.cfg.seed, "ie", g, rid),
                mode=self.mode,
                voting=self.cfg.voting,
                workdir=work / rid,
                rid=rid,
            )
            # IE trains on the voted mask only: keep F, drop any vote IM.
            final = (
                np.stack([o.final for o in outs], axis=-1)
                if self.mode == "multilabel"
                else outs[0].final
            )
            self._write_consensus(cdir, rid, plain_outputs(final, self.mode, self.cfg.ie_variants))
            shutil.rmtree(work / rid)
        if work.exists():
            shutil.rmtree(work)
        return sorted(cdir.glob("*.png"))

    def _consensus_evalnet(
        self, g: int, cdir: Path, uld: list[str], shape: tuple[int, int, int]
    ) -> list[Path]:
        teachers = self._teachers(g)
        gen_dir = self._gen_dir(g)
        pred_root = gen_dir / "predictions"
        candidates: dict[str, list[np.ndarray]] = {}
        for rid in uld:
            candidates[rid] = [
                hard_mask(read_prediction(pred_root / f"t{j}", rid, shape), self.mode)
                for j in range(len(teachers))
            ]
        scores = self._score_candidates(g, candidates)
        chosen, rejected = {}, []
        for rid in uld:
            per_teacher = scores[rid]
            best = max(range(len(per_teacher)), key=lambda j: (per_teacher[j], -j))
            # A record survives only when its best candidate strictly exceeds
            # the threshold.
            if per_teacher[best] > self.cfg.score_threshold:
                chosen[rid] = best
                self._write_consensus(
                    cdir, rid, plain_outputs(candidates[rid][best], self.mode, len(teachers))
                )
            else:
                rejected.append(rid)
        payload = {
            "candidates": {rid: scores[rid] for rid in uld},
            "chosen": chosen,
            "rejected": rejected,
            "threshold": self.cfg.score_threshold,
        }
        dataset_io.write_json(gen_dir / "scores.json", payload)
        return sorted(cdir.glob("*.png")) + [gen_dir / "scores.json"]

    def _score_candidates(
        self, g: int, candidates: dict[str, list[np.ndarray]]
    ) -> dict[str, list[float]]:
        """Score every (record, teacher) candidate mask in [0,1]."""
        if self.cfg.scorer_backend == "builtin:oracle":
            gts = self._load_gts("ULD")
            return {
                rid: [score_mask(c, gts[rid], self.mode) for c in cands]
                for rid, cands in candidates.items()
            }
        backend = parse_backend(self.cfg.scorer_backend, self.dataset_root, jobs=self.jobs)
        if self.cfg.scorer_model is None:
            raise DataError("an external scorer_backend needs scorer_model")
        gen_dir = self._gen_dir(g)
        n_teachers = len(next(iter(candidates.values())))
        out: dict[str, list[float]] = {rid: [0.0] * n_teachers for rid in candidates}
        for j in range(n_teachers):
            pair_dir = gen_dir / "candidates" / f"t{j}"
            for rid, cands in candidates.items():
                img_src = dataset_io.image_path(self.dataset_root, rid)
                dest = pair_dir / "images" / f"{rid}.png"
                dest.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(img_src, dest)
                dataset_io.write_mask(
                    pair_dir, rid, cands[j], self.manifest.mask_mode, self.manifest.num_classes
                )
            score_dir = gen_dir / "candidate_scores" / f"t{j}"
            backend.score(self.cfg.scorer_model, pair_dir, score_dir)
            for rid in candidates:
                arr = dataset_io.read_tensor(
                    score_dir / f"{rid}.imt1", expect_dtype=np.float32
                )
                out[rid][j] = float(np.mean(arr))
        return out

    def _masked_final(self, outs: list[ConsensusOutput]) -> np.ndarray:
        return masked_final(outs, self.mode)

    def _phase_score(self, stage: str) -> list[Path]:
        g = int(stage[3:])
        gen_dir = self._gen_dir(g)
        cdir = gen_dir / "consensus"
        scores: dict[str, float] = {}
        if self.cfg.scorer_backend == "builtin:oracle":
            gts = self._load_gts("ULD")
            for rid in self.manifest.split("ULD"):
                outs = self._read_consensus(cdir, rid)
                if outs is not None:
                    scores[rid] = score_mask(self._masked_final(outs), gts[rid], self.mode)
        else:
            backend = parse_backend(self.cfg.scorer_backend, self.dataset_root, jobs=self.jobs)
            if self.cfg.scorer_model is None:
                raise DataError("an external scorer_backend needs scorer_model")
            pair_dir = gen_dir / "score_pairs"
            rids = []
            for rid in self.manifest.split("ULD"):
                outs = self._read_consensus(cdir, rid)
                if outs is None:
                    continue
                rids.append(rid)
                dest = pair_dir / "images" / f"{rid}.png"
                dest.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(dataset_io.image_path(self.dataset_root, rid), dest)
                dataset_io.write_mask(
                    pair_dir,
                    rid,
                    self._masked_final(outs),
                    self.manifest.mask_mode,
                    self.manifest.num_classes,
                )
            out_dir = gen_dir / "pair_scores"
            backend.score(self.cfg.scorer_model, pair_dir, out_dir)
            for rid in rids:
                arr = dataset_io.read_tensor(out_dir / f"{rid}.imt1", expect_dtype=np.float32)
                scores[rid] = float(np.mean(arr))
        path = gen_dir / "scores.json"
        dataset_io.write_json(path, {"scores": scores})
        return [path]

    def _phase_cd(self, stage: str) -> list[Path]:
        g = int(stage[3:]) if stage.startswith("gen") else 0
        if stage == "bootstrap" or self.approach.is_baseline:
            cd_dir = self._bootstrap_cd() if stage == "bootstrap" else self._gen_dir(1) / "cd"
            base_split = _BASELINE_SPLIT.get(self.approach)
            pseudo_label.build_cd(
                cd_dir,
                self.dataset_root,
                self.manifest,
                self.approach,
                generation=max(g, 1),
                pairs=[],
                seed=self.cfg.seed,
                schedule=self.schedule,
                base_split=base_split,
            )
            return [cd_dir / "cd_manifest.json"]

        gen_dir = self._gen_dir(g)
        cdir = gen_dir / "consensus"
        pairs, rejected = pairs_from_consensus(
            self.dataset_root, self.manifest, cdir, self.approach, self.n_teachers_effective
        )
        if self.approach is Approach.EVALNET:
            ev = json.loads((gen_dir / "scores.json").read_text("utf-8"))
            rejected = len(ev["rejected"])
        scores = None
        if self.approach.tiered:
            scores = json.loads((gen_dir / "scores.json").read_text("utf-8"))["scores"]
        bounds = (
            TierBounds(float(self.cfg.tier_bounds[0]), float(self.cfg.tier_bounds[1]))
            if self.cfg.tier_bounds is not None
            else None
        )
        if not pairs:
            log.warning("generation %d accepted no pseudo pairs; CD is base-only", g)
        pseudo_label.build_cd(
            gen_dir / "cd",
            self.dataset_root,
            self.manifest,
            self.approach,
            generation=g,
            pairs=pairs,
            seed=self.cfg.seed,
            schedule=self.schedule,
            scores=scores,
            bounds=bounds,
            rejected=rejected,
        )
        return [gen_dir / "cd" / "cd_manifest.json"]

    def _phase_train(self, stage: str) -> list[Path]:
        g = int(stage[3:]) if stage.startswith("gen") else 0
        base = self.run_dir / stage
        cd_dir = base / "cd"
        students = base / "students"
        students.mkdir(parents=True, exist_ok=True)
        backend = self._student_backend()
        alpha = self._alpha(max(g, 1))
        seeds = [derive_seed(self.cfg.seed, "train", stage, j) for j in range(self.cfg.n_students)]

        def one(j: int) -> Path:
            model = students / f"student{j}.model"
            backend.train(
                cd_dir=cd_dir,
                model_out=model,
                alpha=alpha,
                epochs=self.cfg.epochs,
                batch=self.cfg.batch,
                steps_min=self._steps_min(),
                seed=seeds[j],
            )
            return model

        idx = list(range(self.cfg.n_students))
        if self.jobs > 1 and len(idx) > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                out = list(pool.map(one, idx))
        else:
            out = [one(j) for j in idx]
        return out

    def _phase_evaluate(self, stage: str) -> list[Path]:
        g = int(stage[3:]) if stage.startswith("gen") else 0
        base = self.run_dir / stage
        students = sorted((base / "students").glob("student*.model"))
        if len(students) != self.cfg.n_students:
            raise DataError(f"expected {self.cfg.n_students} student models under {base}")
        backend = self._student_backend()
        val_inputs = self.run_dir / "inputs" / "val"
        gts = self._load_gts("VAL")
        shape = self._expected_shape()
        metric_name = self.metric_name

        def one(j: int) -> dict:
            model = base / "students" / f"student{j}.model"
            pred_dir = base / "val_pred" / f"s{j}"
            backend.predict(model, val_inputs, pred_dir)
            preds = {
                rid: hard_mask(read_prediction(pred_dir, rid, shape), self.mode) for rid in gts
            }
            report = evaluate_masks(preds, gts, self.mode)
            return {
                "index": j,
                "model": model.relative_to(self.run_dir).as_posix(),
                "metric": report.aggregate[metric_name],
                "aggregate": report.aggregate,
            }

        idx = list(range(self.cfg.n_students))
        if self.jobs > 1 and len(idx) > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                rows = list(pool.map(one, idx))
        else:
            rows = [one(j) for j in idx]
        rows.sort(key=lambda r: r["index"])
        selected = select_top_k([r["metric"] for r in rows], self.cfg.k_top)
        cd_desc = pseudo_label.load_cd_descriptor(base / "cd")
        report = {
            "stage": stage,
            "generation": g,
            "alpha": self._alpha(max(g, 1)),
            "metric_name": metric_name,
            "students": [
                {k: r[k] for k in ("index", "model", "metric")} for r in rows
            ],
            "selected": selected,
            "best": {"index": selected[0], "aggregate": rows[selected[0]]["aggregate"]},
            "cd_counts": cd_desc["counts"],
            "hashes": {
                "cd_manifest": _sha256_paths([base / "cd" / "cd_manifest.json"], self.run_dir),
                "students": _sha256_paths(students, self.run_dir),
            },
        }
        path = base / REPORT_NAME
        dataset_io.write_json(path, report)
        return [path]

    def _phase_promote(self, stage: str) -> list[Path]:
        base = self.run_dir / stage
        report = json.loads((base / REPORT_NAME).read_text("utf-8"))
        next_gen = 1 if stage == "bootstrap" else int(stage[3:]) + 1
        entries = [
            {"backend": "student", "path": report["students"][j]["model"]}
            for j in report["selected"]
        ]
        self.state["teachers"][str(next_gen)] = entries
        return []

    def _phase_report(self, stage: str) -> list[Path]:
        gen_reports = []
        stages = (["bootstrap"] if (self.run_dir / "bootstrap").is_dir() else []) + [
            f"gen{g}" for g in range(1, self.generations + 1)
        ]
        for s in stages:
            path = self.run_dir / s / REPORT_NAME
            if not path.is_file():
                raise DataError(f"missing generation report {path}")
            r = json.loads(path.read_text("utf-8"))
            gen_reports.append(
                {
                    k: r[k]
                    for k in (
                        "stage",
                        "generation",
                        "alpha",
                        "metric_name",
                        "students",
                        "selected",
                        "best",
                        "cd_counts",
                    )
                }
            )
        scored = [r for r in gen_reports if r["generation"] >= 1]
        best = max(scored, key=lambda r: (r["best"]["aggregate"][r["metric_name"]], -r["generation"]))
        report = {
            "format_version": 1,
            "name": self.cfg.name,
            "approach": self.approach.value,
            "dataset": self.manifest.name,
            "mask_mode": self.manifest.mask_mode,
            "num_classes": self.manifest.num_classes,
            "metric_name": self.metric_name,
            "generations": gen_reports,
            "best_generation": best["generation"],
            "best_metric": best["best"]["aggregate"][best["metric_name"]],
            "config": self.cfg.to_dict(),
        }
        path = self.run_dir / REPORT_NAME
        dataset_io.write_json(path, report)
        return [path]


def run(config: RunConfig, jobs: int = 1, resume: bool = False, stop_after: str | None = None) -> dict:
    """Execute (or resume) a run; returns the final report dict."""
    runner = Runner(config, jobs=jobs, stop_after=stop_after)
    state_file = runner.run_dir / STATE_NAME
    if state_file.is_file() and not resume:
        raise DataError(
            f"{runner.run_dir} already holds a run; pass resume to continue it "
            "or choose a fresh run name"
        )
    return runner.run()
