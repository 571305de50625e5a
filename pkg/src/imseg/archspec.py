"""Symbolic architecture/cost model for the segmentation U-Net family.

Builds the layer list of a width-scaled (alpha) encoder-decoder network and
derives parameter counts, per-step FLOPs and total training cost. This is a
bookkeeping model — no tensors are allocated — used to reason about compute
budgets and the per-generation model-size ramp.

Conventions: conv params = k^2*c_in*c_out + c_out; batch-norm params =
2*c_out; FLOPs count convolutions only, at 2 ops per multiply-accumulate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .errors import DataError

ALPHA_PRESETS: dict[str, tuple[float, float]] = {
    "isic2018": (0.5, 1.5),
    "hela": (1.0, 2.0),
    "suim": (1.0, 2.0),
    "cityscapes": (1.0, 2.0),
}


@dataclass(frozen=True)
class ArchConfig:
    """Width multiplier, base filter count and IO geometry of one network."""

    alpha: float = 1.0
    base_filters: int = 16
    input_shape: tuple[int, int, int] = (256, 256, 3)
    num_outputs: int = 1
    depth: int = 4  # encoder/decoder stages

    def validate(self) -> None:
        if self.alpha <= 0:
            raise DataError(f"alpha must be positive, got {self.alpha}")
        if self.base_filters < 1:
            raise DataError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.depth < 1:
            raise DataError(f"depth must be >= 1, got {self.depth}")
        h, w, c = self.input_shape
        stride = 2**self.depth
        if h % stride or w % stride:
            raise DataError(
                f"input {h}x{w} must be divisible by 2^depth = {stride} for skip alignment"
            )
        if c < 1 or self.num_outputs < 1:
            raise DataError("input channels and num_outputs must be >= 1")


@dataclass(frozen=True)
class LayerSpec:
    """One layer row: parameter-bearing kinds are 'conv' and 'bn'."""

    name: str
    kind: str  # conv | bn | pool | up | add
    kernel: int
    c_in: int
    c_out: int
    h_out: int
    w_out: int

    @property
    def params(self) -> int:
        if self.kind == "conv":
            return self.kernel * self.kernel * self.c_in * self.c_out + self.c_out
        if self.kind == "bn":
            return 2 * self.c_out
        return 0

    @property
    def flops(self) -> int:
        if self.kind == "conv":
            return 2 * self.kernel**2 * self.c_in * self.c_out * self.h_out * self.w_out
        return 0


def _filters(alpha: float, base: int, stage: int) -> int:
    f = math.floor(alpha * base * 2**stage)
    if f < 1:
        raise DataError(f"alpha {alpha} * base {base} leaves stage {stage} with zero filters")
    return f


def unet_layers(config: ArchConfig) -> list[LayerSpec]:
    """Emit the network's layer list, input block to output head.

    Encoder stage i runs at 1/2^i scale with floor(alpha*base*2^i) filters
    (3x3 conv, 1x1 conv, BN, 2x2 maxpool); the bottleneck doubles once more.
    Decoder stages mirror the encoder: upsample, 1x1 projection onto the skip
    width, BN, additive skip merge, then 3x3 conv, 1x1 conv, BN. A 1x1 input
    conv and a 1x1 output head close the network.
    """
    config.validate()
    h, w, c_img = config.input_shape
    a, base, depth = config.alpha, config.base_filters, config.depth
    enc = [_filters(a, base, i) for i in range(depth)]
    bott = _filters(a, base, depth)
    layers: list[LayerSpec] = [
        LayerSpec("in.conv1", "conv", 1, c_img, enc[0], h, w),
        LayerSpec("in.bn", "bn", 0, enc[0], enc[0], h, w),
    ]
    prev = enc[0]
    for i, f in enumerate(enc):
        hh, ww = h >> i, w >> i
        layers += [
            LayerSpec(f"enc{i}.conv3", "conv", 3, prev, f, hh, ww),
            LayerSpec(f"enc{i}.conv1", "conv", 1, f, f, hh, ww),
            LayerSpec(f"enc{i}.bn", "bn", 0, f, f, hh, ww),
            LayerSpec(f"enc{i}.pool", "pool", 2, f, f, hh >> 1, ww >> 1),
        ]
        prev = f
    hb, wb = h >> depth, w >> depth
    layers += [
        LayerSpec("bott.conv3", "conv", 3, enc[-1], bott, hb, wb),
        LayerSpec("bott.conv1", "conv", 1, bott, bott, hb, wb),
        LayerSpec("bott.bn", "bn", 0, bott, bott, hb, wb),
    ]
    deep = bott
    for j in range(depth):
        g = enc[depth - 1 - j]
        hh, ww = h >> (depth - 1 - j), w >> (depth - 1 - j)
        layers += [
            LayerSpec(f"dec{j}.up", "up", 2, deep, deep, hh, ww),
            LayerSpec(f"dec{j}.proj1", "conv", 1, deep, g, hh, ww),
            LayerSpec(f"dec{j}.bn1", "bn", 0, g, g, hh, ww),
            LayerSpec(f"dec{j}.add", "add", 0, g, g, hh, ww),
            LayerSpec(f"dec{j}.conv3", "conv", 3, g, g, hh, ww),
            LayerSpec(f"dec{j}.conv1", "conv", 1, g, g, hh, ww),
            LayerSpec(f"dec{j}.bn2", "bn", 0, g, g, hh, ww),
        ]
        deep = g
    layers.append(LayerSpec("out.conv1", "conv", 1, enc[0], config.num_outputs, h, w))
    return layers


def count_params(layers: list[LayerSpec]) -> int:
    return sum(l.params for l in layers)


def estimate_flops(layers: list[LayerSpec]) -> int:
    """Per-example forward FLOPs (convolutions only, 2 ops per MAC)."""
    return sum(l.flops for l in layers)


def steps_per_epoch(n_samples: int, batch: int) -> int:
    if batch < 1:
        raise DataError(f"batch size must be >= 1, got {batch}")
    if n_samples < 0:
        raise DataError(f"n_samples must be >= 0, got {n_samples}")
    return math.ceil(n_samples / batch)


def total_training_flops(
    flops_per_step: int | float | Fraction, steps: int, epochs: int
) -> int | Fraction:
    """Exact F_total = F x S x E; floats go through Fraction(str(.)) so
    figures like 0.0249e9 multiply without binary-float drift."""
    if steps < 0 or epochs < 0:
        raise DataError("steps and epochs must be >= 0")
    f = Fraction(str(flops_per_step)) if isinstance(flops_per_step, float) else Fraction(flops_per_step)
    total = f * steps * epochs
    return int(total) if total.denominator == 1 else total


def alpha_schedule(
    endpoints: str | tuple[float, float],
    generation: int,
    generations: int = 5,
    ramp: bool = True,
) -> float:
    """Width multiplier for a generation: linear ramp start -> end, or constant.

    ``endpoints`` is a preset name or an explicit (start, end). Non-ramping
    approaches use the start value everywhere.
    """
    if isinstance(endpoints, str):
        if endpoints not in ALPHA_PRESETS:
            raise DataError(f"unknown alpha preset {endpoints!r}; have {sorted(ALPHA_PRESETS)}")
        start, end = ALPHA_PRESETS[endpoints]
    else:
        start, end = float(endpoints[0]), float(endpoints[1])
    if not 1 <= generation <= generations:
        raise DataError(f"generation {generation} outside 1..{generations}")
    if not ramp or generations == 1:
        return start
    return start + (end - start) * (generation - 1) / (generations - 1)


def format_layer_table(layers: list[LayerSpec]) -> str:
    """Human-readable table with per-layer params/FLOPs and totals."""
    rows = [f"{'layer':<14} {'kind':<5} {'k':>2} {'c_in':>5} {'c_out':>5} "
            f"{'h':>4} {'w':>4} {'params':>10} {'flops':>14}"]
    for l in layers:
        rows.append(
            f"{l.name:<14} {l.kind:<5} {l.kernel:>2} {l.c_in:>5} {l.c_out:>5} "
            f"{l.h_out:>4} {l.w_out:>4} {l.params:>10} {l.flops:>14}"
        )
    rows.append(
        f"{'total':<14} {'':<5} {'':>2} {'':>5} {'':>5} {'':>4} {'':>4} "
        f"{count_params(layers):>10} {estimate_flops(layers):>14}"
    )
    return "\n".join(rows)
