"""Cost model: hand-counted layer tables, width-scaling ratio, budget math."""

import math
from fractions import Fraction

import pytest

from imseg.archspec import (
    ALPHA_PRESETS,
    ArchConfig,
    alpha_schedule,
    count_params,
    estimate_flops,
    format_layer_table,
    steps_per_epoch,
    total_training_flops,
    unet_layers,
)
from imseg.errors import DataError


# --------------------------------------------------------------------------
# Hand-counted tiny network (depth 1, base 2, alpha 1, 8x8x1 input, 2 outputs)
#
# Layer inventory (params = k^2*c_in*c_out + c_out for conv, 2*c_out for bn;
# FLOPs = 2*k^2*c_in*c_out*h*w for conv only):
#   in.conv1   1x1 1->2  @8x8   params 4    flops 256
#   in.bn              2        params 4
#   enc0.conv3 3x3 2->2  @8x8   params 38   flops 4608
#   enc0.conv1 1x1 2->2  @8x8   params 6    flops 512
#   enc0.bn             2       params 4
#   enc0.pool                   params 0
#   bott.conv3 3x3 2->4  @4x4   params 76   flops 2304
#   bott.conv1 1x1 4->4  @4x4   params 20   flops 512
#   bott.bn             4       params 8
#   dec0.up                     params 0
#   dec0.proj1 1x1 4->2  @8x8   params 10   flops 1024
#   dec0.bn1            2       params 4
#   dec0.add                    params 0
#   dec0.conv3 3x3 2->2  @8x8   params 38   flops 4608
#   dec0.conv1 1x1 2->2  @8x8   params 6    flops 512
#   dec0.bn2            2       params 4
#   out.conv1  1x1 2->2  @8x8   params 6    flops 512


TINY = ArchConfig(alpha=1.0, base_filters=2, input_shape=(8, 8, 1), num_outputs=2, depth=1)


def test_tiny_network_param_count_by_hand():
    assert count_params(unet_layers(TINY)) == 228


def test_tiny_network_flops_by_hand():
    assert estimate_flops(unet_layers(TINY)) == 14848


def test_tiny_network_layer_inventory():
    layers = {l.name: l for l in unet_layers(TINY)}
    assert layers["enc0.conv3"].params == 38
    assert layers["bott.conv3"].params == 76
    assert layers["dec0.proj1"].flops == 1024
    assert layers["enc0.pool"].params == 0 and layers["dec0.up"].params == 0
    assert layers["in.bn"].params == 4


def test_format_layer_table_has_rows_and_total():
    text = format_layer_table(unet_layers(TINY))
    assert "enc0.conv3" in text and "total" in text
    assert text.splitlines()[-1].split()[-2:] == ["228", "14848"]


# --------------------------------------------------------------------------
# Width scaling (acceptance criterion: ratio in [3.8, 4.0]; calibration)


def params_for(alpha, base=16):
    cfg = ArchConfig(alpha=alpha, base_filters=base, input_shape=(256, 256, 3), num_outputs=1)
    return count_params(unet_layers(cfg))


def test_doubling_alpha_roughly_quadruples_params():
    ratio = params_for(2.0) / params_for(1.0)
    assert 3.8 <= ratio <= 4.0


def test_calibrated_base_filters_matches_published_size():
    """A base filter count exists whose alpha=1 network is within 15% of
    the published 0.6817M parameters."""
    target = 681_700
    best = min(range(1, 65), key=lambda b: abs(params_for(1.0, b) - target))
    got = params_for(1.0, best)
    assert abs(got - target) / target <= 0.15, (best, got)


def test_alpha_scales_filter_widths_with_floor():
    layers = {l.name: l for l in unet_layers(ArchConfig(alpha=0.75, base_filters=16))}
    assert layers["enc0.conv3"].c_out == math.floor(0.75 * 16)
    assert layers["enc1.conv3"].c_out == math.floor(0.75 * 32)


def test_zero_width_stage_is_rejected():
    with pytest.raises(DataError):
        unet_layers(ArchConfig(alpha=0.01, base_filters=2, input_shape=(64, 64, 3)))


def test_arch_config_validation():
    for bad in (
        dict(alpha=0.0),
        dict(base_filters=0),
        dict(depth=0),
        dict(input_shape=(250, 256, 3)),  # not divisible by 2^depth
        dict(input_shape=(256, 256, 0)),
        dict(num_outputs=0),
    ):
        with pytest.raises(DataError):
            ArchConfig(**bad).validate()


# --------------------------------------------------------------------------
# Budget arithmetic (acceptance: 0.0249G x 82 x 50 = 102.09G exact)


def test_training_budget_example_exact():
    assert total_training_flops(0.0249e9, 82, 50) == 102_090_000_000


def test_training_budget_exactness_via_fractions():
    # float inputs go through decimal strings, so no binary drift leaks in
    got = total_training_flops(0.1e9, 3, 7)
    assert got == 2_100_000_000
    frac = total_training_flops(1.5, 1, 1)
    assert frac == Fraction(3, 2)


def test_steps_per_epoch_ceil():
    assert steps_per_epoch(100, 32) == 4
    assert steps_per_epoch(96, 32) == 3
    assert steps_per_epoch(1, 32) == 1
    assert steps_per_epoch(0, 32) == 0
    with pytest.raises(DataError):
        steps_per_epoch(10, 0)
    with pytest.raises(DataError):
        steps_per_epoch(-1, 8)


def test_budget_rejects_negatives():
    with pytest.raises(DataError):
        total_training_flops(1.0, -1, 1)


# --------------------------------------------------------------------------
# Alpha ramp


def test_alpha_schedule_linear_ramp():
    got = [alpha_schedule((1.0, 2.0), g, 5) for g in range(1, 6)]
    assert got == [1.0, 1.25, 1.5, 1.75, 2.0]


def test_alpha_schedule_constant_when_not_ramping():
    assert [alpha_schedule((1.0, 2.0), g, 5, ramp=False) for g in range(1, 6)] == [1.0] * 5


def test_alpha_schedule_single_generation_uses_start():
    assert alpha_schedule((0.5, 1.5), 1, 1) == 0.5


def test_alpha_schedule_presets():
    assert ALPHA_PRESETS["isic2018"] == (0.5, 1.5)
    assert alpha_schedule("isic2018", 5, 5) == 1.5
    with pytest.raises(DataError):
        alpha_schedule("unknown", 1, 5)
    with pytest.raises(DataError):
        alpha_schedule((1.0, 2.0), 6, 5)
