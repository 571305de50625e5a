"""Command-line verbs: train, predict, score.

Exit codes: 0 on success, 2 on any anticipated failure — malformed or empty
combined dataset, missing model, unreadable pair — and on usage errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .data import list_images, read_image
from .errors import PixlogError
from .model import Model
from .score import score_pairs
from .tensor import TENSOR_EXT, write_tensor
from .train import train_model


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pixlog",
        description="per-pixel logistic segmentation backend (file protocol)",
    )
    parser.add_argument("--version", action="version", version=f"pixlog {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model on a combined dataset")
    p.add_argument("--cd", required=True, help="combined dataset directory")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--alpha", type=float, default=1.0, help="recorded width multiplier")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=8, help="records per step")
    p.add_argument("--steps-min", type=int, default=0, help="steps-per-epoch floor")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="write probability tensors for a directory of images")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--in", dest="input_dir", required=True, help="directory of PNG images")
    p.add_argument("--out", dest="output_dir", required=True, help="tensor output directory")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("score", help="score (image, mask) pairs")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--pairs", required=True, help="pair directory (images/ + masks/)")
    p.add_argument("--out", dest="output_dir", required=True, help="tensor output directory")
    p.set_defaults(func=_cmd_score)
    return parser


def _cmd_train(args: argparse.Namespace) -> int:
    model = train_model(
        args.cd,
        args.out,
        alpha=args.alpha,
        epochs=args.epochs,
        batch=args.batch,
        steps_min=args.steps_min,
        seed=args.seed,
    )
    t = model.training
    print(
        f"trained {model.mode} model on {t['records']} records "
        f"({t['pixels']} retained px, {t['total_steps']} steps) -> {args.out}"
    )
    return 0


def _cmd_predict(args: argparse.Namespace) -> int:
    model = Model.load(args.model)
    out = Path(args.output_dir)
    images = list_images(args.input_dir)
    for path in images:
        probs = model.predict_probs(read_image(path))
        write_tensor(out / f"{path.stem}{TENSOR_EXT}", probs)
    print(f"predicted {len(images)} images -> {out}")
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    model = Model.load(args.model)
    n = score_pairs(model, args.pairs, args.output_dir)
    print(f"scored {n} pairs -> {args.output_dir}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PixlogError as exc:
        print(f"pixlog: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
