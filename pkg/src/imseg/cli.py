"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 backend
error. Every subcommand accepts --seed and --jobs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import MANIFEST_FORMAT_VERSION, TENSOR_FORMAT_VERSION, __version__
from . import analysis, augment, dataset_io, orchestrator, pseudo_label, synth
from .archspec import (
    ArchConfig,
    count_params,
    estimate_flops,
    format_layer_table,
    steps_per_epoch,
    total_training_flops,
    unet_layers,
)
from .backends import parse_backend
from .consensus import ConsensusOutput, im_binary, im_multiclass
from .errors import BackendError, DataError
from .metrics import evaluate_masks, score_mask
from .morphology import refine_im
from .pseudo_label import Approach, TierBounds

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse with the usage-error exit code pinned to 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected INTxINT[...], got {text!r}") from None
    if not dims or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError(f"dimensions must be positive, got {text!r}")
    return dims


def build_parser() -> _Parser:
    parser = _Parser(prog="imseg", description=__doc__)
    parser.add_argument(
        "--version",
        action="version",
        version=(
            f"imseg {__version__} "
            f"(manifest format {MANIFEST_FORMAT_VERSION}, tensor format IMT1 v{TENSOR_FORMAT_VERSION})"
        ),
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="deterministic seed (default 0)")
    common.add_argument(
        "--jobs",
        type=int,
        default=0,
        help="worker pool size; 0 = logical cores (default)",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("split", parents=[common], help="carve LD/ULD out of FD")
    p.add_argument("--root", required=True, help="dataset directory")
    p.add_argument("--ld-count", required=True, type=int, help="number of labeled records")

    p = sub.add_parser("augment", parents=[common], help="build the augmented labeled base (ALD)")
    p.add_argument("--root", required=True)
    p.add_argument("--schedule", required=True, help="preset name or schedule JSON path")
    p.add_argument("--row", type=int, default=0, help="schedule row to sample from (default: last)")
    p.add_argument("--variants", type=int, default=augment.ALD_VARIANTS)

    p = sub.add_parser("vote", parents=[common], help="combine probability tensors into one mask")
    p.add_argument("--preds", nargs="+", required=True, help="IMT1 probability tensors")
    p.add_argument("--mode", required=True, choices=["binary", "multiclass"])
    p.add_argument("--voting", default="auto", choices=["auto", "hard", "soft"])
    p.add_argument("--out", required=True, help="final mask PNG")

    p = sub.add_parser("im", parents=[common], help="unanimity consensus + inconsistency mask")
    p.add_argument("--preds", nargs="+", required=True, help="hard-mask PNGs (2+)")
    p.add_argument("--mode", required=True, choices=["binary", "multiclass"])
    p.add_argument("--out-f", required=True, help="agreed final mask PNG")
    p.add_argument("--out-im", required=True, help="inconsistency mask PNG")
    p.add_argument("--out-votes", help="optional vote-sum IMT1 tensor (binary mode only)")

    p = sub.add_parser("refine", parents=[common], help="morphological IM refinement")
    p.add_argument("--f", dest="final", required=True, help="final mask PNG")
    p.add_argument("--im", required=True, help="inconsistency mask PNG")
    p.add_argument("--mode", required=True, choices=["binary", "multiclass"])
    p.add_argument("--erode", type=int, default=0)
    p.add_argument("--dilate", type=int, default=0)
    p.add_argument("--out-f", required=True)
    p.add_argument("--out-im", required=True)

    p = sub.add_parser("build-cd", parents=[common], help="compose a combined dataset")
    p.add_argument("--root", required=True, help="source dataset directory")
    p.add_argument("--consensus", required=True, help="consensus artifact directory")
    p.add_argument("--approach", required=True, choices=[a.value for a in Approach])
    p.add_argument("--generation", type=int, default=1)
    p.add_argument("--out", required=True, help="combined dataset directory")
    p.add_argument("--schedule", help="preset name or schedule JSON path")
    p.add_argument("--scores", help="scores JSON ({'scores': {rid: value}}) for tiered copies")
    p.add_argument("--tier-min", type=float)
    p.add_argument("--tier-max", type=float)
    p.add_argument("--n-models", type=int, default=2, help="ensemble size recorded on pairs")

    p = sub.add_parser("metrics", parents=[common], help="score predictions against a split")
    p.add_argument("--root", required=True, help="dataset directory (ground truth)")
    p.add_argument("--split", default="VAL", choices=list(dataset_io.SPLIT_NAMES))
    p.add_argument("--pred-dir", required=True, help="<rid>.png / <rid>.c<k>.png / <rid>.imt1")
    p.add_argument("--subset", type=int, nargs="+", help="classes for an additional subset mIoU")
    p.add_argument("--out", help="write the full per-image report JSON here")

    p = sub.add_parser("score", parents=[common], help="score (image, mask) pairs")
    p.add_argument("--root", required=True, help="dataset directory")
    p.add_argument("--pairs", required=True, help="pair directory (images/ + masks/)")
    p.add_argument("--scorer", default="builtin:oracle", help="builtin:oracle or backend spec")
    p.add_argument("--scorer-model", help="model path for external scorers")
    p.add_argument("--out", required=True, help="scores JSON")

    p = sub.add_parser("archspec", parents=[common], help="cost model of the width-scaled U-Net")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--base", type=int, default=16, help="base filter count (default 16)")
    p.add_argument("--input-shape", type=_shape, default=(256, 256, 3), metavar="HxWxC")
    p.add_argument("--outputs", type=int, default=1)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--samples", type=int, help="training samples (enables budget line)")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--csv", help="write the per-layer cost table CSV here")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, required=True)
    p.add_argument("--n-val", type=int, default=0)
    p.add_argument("--n-test", type=int, default=0)
    p.add_argument("--size", type=_shape, default=(64, 64), metavar="HxW")
    p.add_argument("--channels", type=int, default=3, choices=[1, 3])
    p.add_argument("--classes", type=int, default=1, help="1 = binary dataset")
    p.add_argument("--shapes-min", type=int, default=1)
    p.add_argument("--shapes-max", type=int, default=3)
    p.add_argument("--jitter", type=int, default=6)
    p.add_argument("--name", default="synth")

    p = sub.add_parser("run", parents=[common], help="execute a self-training run")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--resume", action="store_true", help="continue an interrupted run")
    p.add_argument("--stop-after", help="stage/phase to halt after (debugging aid)")

    p = sub.add_parser("analyze", parents=[common], help="emit CSV + SVG metric curves")
    p.add_argument("--runs", nargs="+", required=True, help="finished run directories")
    p.add_argument("--out", help="output directory (default: <first run>/analysis)")

    return parser


# --------------------------------------------------------------------------
# Subcommand bodies


def _read_hard_mask(path: Path, mode: str) -> np.ndarray:
    arr = dataset_io.read_image(path)
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-plane mask PNG")
    return (arr > 0).astype(np.uint8) if mode == "binary" else arr


def _cmd_split(args) -> None:
    manifest = dataset_io.apply_split(args.root, args.ld_count, args.seed)
    print(f"LD={len(manifest.split('LD'))} ULD={len(manifest.split('ULD'))}")


def _cmd_augment(args) -> None:
    schedule = augment.load_schedule(args.schedule)
    row = args.row or len(schedule.specs)
    spec = schedule.spec_for(row)
    ald = augment.build_ald(args.root, spec, args.seed, variants=args.variants)
    print(f"ALD={len(ald)} (schedule {schedule.name!r}, row {row})")


def _cmd_vote(args) -> None:
    if len(args.preds) < 2:
        raise DataError("vote needs at least two prediction tensors")
    probs = [dataset_io.read_tensor(p, expect_dtype=np.float32) for p in args.preds]
    final = orchestrator.vote_ensemble(probs, args.mode, args.voting)
    if args.mode == "binary":
        dataset_io.write_im_mask(args.out, final)
    else:
        dataset_io.write_image(args.out, final.astype(np.uint8))
    print(f"wrote {args.out}")


def _cmd_im(args) -> None:
    if len(args.preds) < 2:
        raise DataError("consensus needs at least two masks")
    masks = [_read_hard_mask(Path(p), args.mode) for p in args.preds]
    if args.mode == "binary":
        out = im_binary(masks)
        dataset_io.write_im_mask(args.out_f, out.final)
    else:
        out = im_multiclass(masks)
        dataset_io.write_image(args.out_f, out.final.astype(np.uint8))
    dataset_io.write_im_mask(args.out_im, out.im)
    if args.out_votes:
        if out.vote_sum is None:
            raise DataError("vote sums exist only in binary mode")
        dataset_io.write_tensor(args.out_votes, out.vote_sum.astype(np.uint8))
    im_px = int(np.count_nonzero(out.im))
    print(f"wrote {args.out_f} and {args.out_im} (im pixels: {im_px})")


def _cmd_refine(args) -> None:
    final = _read_hard_mask(Path(args.final), args.mode)
    im = dataset_io.read_im_mask(args.im)
    refined = refine_im(
        ConsensusOutput(final=final, im=im, n_models=2), args.erode, args.dilate
    )
    if args.mode == "binary":
        dataset_io.write_im_mask(args.out_f, refined.final)
    else:
        dataset_io.write_image(args.out_f, refined.final.astype(np.uint8))
    dataset_io.write_im_mask(args.out_im, refined.im)
    print(f"wrote {args.out_f} and {args.out_im}")


def _cmd_build_cd(args) -> None:
    root = Path(args.root)
    manifest = dataset_io.load_manifest(root)
    approach = Approach(args.approach)
    pairs, rejected = orchestrator.pairs_from_consensus(
        root, manifest, Path(args.consensus), approach, args.n_models
    )
    schedule = augment.load_schedule(args.schedule) if args.schedule else None
    scores = None
    if args.scores:
        scores = json.loads(Path(args.scores).read_text("utf-8"))["scores"]
    bounds = None
    if args.tier_min is not None or args.tier_max is not None:
        if args.tier_min is None or args.tier_max is None:
            raise DataError("--tier-min and --tier-max come as a pair")
        bounds = TierBounds(args.tier_min, args.tier_max)
    cd = pseudo_label.build_cd(
        args.out,
        root,
        manifest,
        approach,
        generation=args.generation,
        pairs=pairs,
        seed=args.seed,
        schedule=schedule,
        scores=scores,
        bounds=bounds,
        rejected=rejected,
    )
    print(json.dumps(cd.descriptor["counts"], sort_keys=True))


def _load_prediction_mask(pred_dir: Path, rid: str, mode: str, num_classes: int) -> np.ndarray:
    tensor = pred_dir / f"{rid}.imt1"
    if tensor.is_file():
        probs = dataset_io.read_tensor(tensor, expect_dtype=np.float32)
        return orchestrator.hard_mask(probs, mode)
    if mode == "multilabel":
        planes = []
        for c in range(num_classes):
            p = pred_dir / f"{rid}.c{c}.png"
            if not p.is_file():
                raise DataError(f"missing prediction channel {p}")
            planes.append(dataset_io.read_im_mask(p))
        return np.stack(planes, axis=-1)
    path = pred_dir / f"{rid}.png"
    if not path.is_file():
        raise DataError(f"missing prediction {path}")
    return _read_hard_mask(path, mode)


def _cmd_metrics(args) -> None:
    root = Path(args.root)
    manifest = dataset_io.load_manifest(root)
    ids = manifest.split(args.split)
    if not ids:
        raise DataError(f"split {args.split} is empty")
    mode = manifest.mode
    gts = {
        rid: dataset_io.read_mask(root, rid, manifest.mask_mode, manifest.num_classes)
        for rid in ids
    }
    preds = {
        rid: _load_prediction_mask(Path(args.pred_dir), rid, mode, manifest.num_classes)
        for rid in ids
    }
    report = evaluate_masks(preds, gts, mode, subset=args.subset)
    if args.out:
        dataset_io.write_json(args.out, report.to_dict())
    print(json.dumps(report.aggregate, sort_keys=True))


def _cmd_score(args) -> None:
    root = Path(args.root)
    manifest = dataset_io.load_manifest(root)
    pair_dir = Path(args.pairs)
    rids = sorted(p.stem for p in (pair_dir / "images").glob("*.png"))
    if not rids:
        raise DataError(f"no pair images under {pair_dir / 'images'}")
    scores: dict[str, float] = {}
    if args.scorer == "builtin:oracle":
        for rid in rids:
            mask = dataset_io.read_mask(pair_dir, rid, manifest.mask_mode, manifest.num_classes)
            gt = dataset_io.read_mask(root, rid, manifest.mask_mode, manifest.num_classes)
            scores[rid] = score_mask(mask, gt, manifest.mode)
    else:
        if not args.scorer_model:
            raise DataError("an external scorer needs --scorer-model")
        backend = parse_backend(args.scorer, root, jobs=args.jobs or os.cpu_count() or 1)
        out_dir = pair_dir / "scores_tmp"
        backend.score(args.scorer_model, pair_dir, out_dir)
        for rid in rids:
            arr = dataset_io.read_tensor(out_dir / f"{rid}.imt1", expect_dtype=np.float32)
            scores[rid] = float(np.mean(arr))
    dataset_io.write_json(args.out, {"scores": scores})
    print(f"scored {len(scores)} pairs -> {args.out}")


def _cmd_archspec(args) -> None:
    if len(args.input_shape) != 3:
        raise DataError(f"--input-shape must be HxWxC, got {args.input_shape}")
    config = ArchConfig(
        alpha=args.alpha,
        base_filters=args.base,
        input_shape=tuple(args.input_shape),
        num_outputs=args.outputs,
        depth=args.depth,
    )
    layers = unet_layers(config)
    params = count_params(layers)
    flops = estimate_flops(layers)
    print(format_layer_table(layers))
    print(f"params: {params} ({params / 1e6:.4f} M)")
    print(f"forward flops/sample: {flops} ({flops / 1e9:.4f} G)")
    if args.samples:
        steps = steps_per_epoch(args.samples, args.batch)
        total = total_training_flops(flops, steps, args.epochs)
        print(
            f"training budget: {steps} steps/epoch x {args.epochs} epochs -> "
            f"{total} flops ({total / 1e9:.2f} G)"
        )
    if args.csv:
        import csv as csv_mod

        with Path(args.csv).open("w", newline="") as fh:
            writer = csv_mod.writer(fh)
            writer.writerow(
                ["name", "kind", "kernel", "c_in", "c_out", "h_out", "w_out", "params", "flops"]
            )
            for layer in layers:
                writer.writerow(
                    [
                        layer.name,
                        layer.kind,
                        layer.kernel,
                        layer.c_in,
                        layer.c_out,
                        layer.h_out,
                        layer.w_out,
                        layer.params,
                        layer.flops,
                    ]
                )
        print(f"wrote {args.csv}")


def _cmd_synth(args) -> None:
    if len(args.size) != 2:
        raise DataError(f"--size must be HxW, got {args.size}")
    spec = synth.SceneSpec(
        height=args.size[0],
        width=args.size[1],
        channels=args.channels,
        num_classes=args.classes,
        shapes_min=args.shapes_min,
        shapes_max=args.shapes_max,
        jitter=args.jitter,
    )
    manifest = synth.generate_dataset(
        args.out, spec, args.n_train, args.n_val, args.n_test, args.seed, name=args.name
    )
    print(
        f"dataset {manifest.name!r}: FD={len(manifest.split('FD'))} "
        f"VAL={len(manifest.split('VAL'))} TEST={len(manifest.split('TEST'))} -> {args.out}"
    )


def _cmd_run(args) -> None:
    config = orchestrator.RunConfig.load(args.config)
    jobs = args.jobs or os.cpu_count() or 1
    report = orchestrator.run(config, jobs=jobs, resume=args.resume, stop_after=args.stop_after)
    if "stopped_after" in report:
        print(f"stopped after {report['stopped_after']}")
        return
    print(
        f"run {report['name']} ({report['approach']}): best {report['metric_name']} "
        f"{report['best_metric']:.4f} at generation {report['best_generation']}"
    )


def _cmd_analyze(args) -> None:
    out_dir = Path(args.out) if args.out else Path(args.runs[0]) / "analysis"
    result = analysis.emit_report(args.runs, out_dir)
    print(f"wrote {result['csv']} and {result['svg']}")


_COMMANDS = {
    "split": _cmd_split,
    "augment": _cmd_augment,
    "vote": _cmd_vote,
    "im": _cmd_im,
    "refine": _cmd_refine,
    "build-cd": _cmd_build_cd,
    "metrics": _cmd_metrics,
    "score": _cmd_score,
    "archspec": _cmd_archspec,
    "synth": _cmd_synth,
    "run": _cmd_run,
    "analyze": _cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
