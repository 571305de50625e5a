"""Binary morphology and the IM refinement pipeline.

Erosion/dilation use square k x k structuring elements with odd k;
out-of-bounds pixels count as background for both, so foreground touching the
border erodes away. ``refine_im`` shrinks an inconsistency mask, hands the
vacated pixels to neighboring class regions, then optionally re-grows the
mask — every pixel ends up with a class or in the IM.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .consensus import ConsensusOutput
from .errors import DataError

# 8-connectivity structuring element for component labeling.
_CONN8 = np.ones((3, 3), dtype=bool)


def _check_kernel(k: int, allow_zero: bool = False) -> None:
    if k == 0 and allow_zero:
        return
    if k < 1 or k % 2 == 0:
        allowed = "0 or an odd integer >= 1" if allow_zero else "an odd integer >= 1"
        raise DataError(f"kernel size must be {allowed}, got {k}")


def _window_extrema(mask: np.ndarray, k: int, take_max: bool) -> np.ndarray:
    if mask.ndim != 2:
        raise DataError(f"masks must be 2-D, got {mask.shape}")
    if k == 1:
        return (np.asarray(mask) > 0).astype(np.uint8)
    pad = k // 2
    padded = np.pad((np.asarray(mask) > 0), pad, mode="constant", constant_values=False)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    out = windows.any(axis=(2, 3)) if take_max else windows.all(axis=(2, 3))
    return out.astype(np.uint8)


def erode(mask: np.ndarray, k: int) -> np.ndarray:
    """k x k minimum filter on a binary mask; k=1 is the identity."""
    _check_kernel(k)
    return _window_extrema(mask, k, take_max=False)


def dilate(mask: np.ndarray, k: int) -> np.ndarray:
    """k x k maximum filter on a binary mask; k=1 is the identity."""
    _check_kernel(k)
    return _window_extrema(mask, k, take_max=True)


def refine_im(consensus: ConsensusOutput, e: int, d: int) -> ConsensusOutput:
    """Refine a consensus' inconsistency mask by erosion and re-dilation.

    e/d are the erosion/dilation kernel sizes: 0 skips the step, otherwise
    they must be odd and >= 3. Pipeline:

    1. IM' = erode(IM, e).
    2. Pixels vacated by the erosion are claimed by the surrounding class
       regions, each dilated with kernel max(e, d); overlapping claims go to
       the lowest class ID. Vacated pixels out of any class's reach (image
       borders, degenerate all-IM inputs) stay IM — uncertainty wins.
    3. IM'' = dilate(IM', d); pixels under IM'' are IM in the output
       regardless of step 2, and ``final`` is zeroed there.

    e = d = 0 returns an identical consensus. Every pixel of the result is
    classified or IM (totality).
    """
    for name, k in (("e", e), ("d", d)):
        if k != 0 and (k < 3 or k % 2 == 0):
            raise DataError(f"refine_im {name} must be 0 or an odd integer >= 3, got {k}")
    final = np.asarray(consensus.final)
    im = (np.asarray(consensus.im) > 0).astype(np.uint8)
    if final.shape != im.shape:
        raise DataError(f"final {final.shape} and im {im.shape} shapes differ")

    im_eroded = erode(im, e) if e > 0 else im
    new_final = final.copy()
    unclaimed = np.zeros_like(im, dtype=bool)
    vacated = (im > 0) & (im_eroded == 0)
    if vacated.any():
        k_fill = max(e, d)
        claimed = np.zeros_like(im, dtype=bool)
        classified = im == 0
        for cls in np.unique(final[classified]):
            region = (final == cls) & classified
            claim = (dilate(region.astype(np.uint8), k_fill) > 0) & vacated & ~claimed
            new_final[claim] = cls
            claimed |= claim
        unclaimed = vacated & ~claimed

    im_out = (dilate(im_eroded, d) if d > 0 else im_eroded).astype(bool) | unclaimed
    new_final[im_out] = 0
    return ConsensusOutput(
        final=new_final,
        im=im_out.astype(np.uint8),
        n_models=consensus.n_models,
        vote_sum=consensus.vote_sum,
    )


def count_components(mask: np.ndarray, connectivity: int = 8, min_area: int = 1) -> int:
    """Count connected foreground components, dropping those below min_area."""
    if connectivity not in (4, 8):
        raise DataError(f"connectivity must be 4 or 8, got {connectivity}")
    if min_area < 1:
        raise DataError(f"min_area must be >= 1, got {min_area}")
    mask = np.asarray(mask) > 0
    structure = _CONN8 if connectivity == 8 else ndimage.generate_binary_structure(2, 1)
    labels, n = ndimage.label(mask, structure=structure)
    if min_area == 1:
        return int(n)
    areas = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return int((areas >= min_area).sum())


def label_components(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """8- or 4-connected labeling of a binary mask (labels 1..n, 0 = background)."""
    if connectivity not in (4, 8):
        raise DataError(f"connectivity must be 4 or 8, got {connectivity}")
    structure = _CONN8 if connectivity == 8 else ndimage.generate_binary_structure(2, 1)
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=structure)
    return labels, int(n)
