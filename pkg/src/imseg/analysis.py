"""Post-hoc analysis: class-frequency drift, IM-size statistics, and
CSV/SVG report emission for metric-vs-generation curves.

All numbers are kept at full precision internally; rounding to one decimal
happens only at presentation, via largest-remainder apportionment so each
frequency row still sums to exactly 100.0 after rounding.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset_io import write_json
from .errors import DataError
from .pseudo_label import PseudoPair

REPORT_NAME = "report.json"

_SERIES_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


# --------------------------------------------------------------------------
# Class-frequency tables


def round_to_sum(values: list[float], total_tenths: int = 1000) -> list[float]:
    """Round percentages to one decimal so they sum to exactly total/10.

    Largest-remainder apportionment in tenths: floor everything, then hand the
    leftover tenths to the largest fractional remainders (ties to the lower
    index). Presentation-only; callers keep full precision elsewhere.
    """
    scaled = [v * 10.0 for v in values]
    floors = [math.floor(s) for s in scaled]
    leftover = total_tenths - sum(floors)
    if leftover < 0 or leftover > len(values):
        raise DataError(
            f"percentages sum to {sum(values):.6f}, not 100; cannot apportion rounding"
        )
    remainders = sorted(range(len(values)), key=lambda i: (-(scaled[i] - floors[i]), i))
    out = list(floors)
    for i in remainders[:leftover]:
        out[i] += 1
    return [t / 10.0 for t in out]


@dataclass
class FrequencyTable:
    """Per-class pixel percentages (full precision) plus an IM share.

    ``diffs``/``im_diff`` hold percentage-point deviations against a reference
    table; ``abs_dev_sum`` is their absolute sum, computed before any rounding.
    """

    class_pct: list[float]
    im_pct: float = 0.0
    diffs: list[float] | None = None
    im_diff: float | None = None

    @property
    def abs_dev_sum(self) -> float | None:
        if self.diffs is None:
            return None
        return float(sum(abs(d) for d in self.diffs) + abs(self.im_diff or 0.0))

    def compare(self, reference: "FrequencyTable") -> "FrequencyTable":
        if len(reference.class_pct) != len(self.class_pct):
            raise DataError("frequency tables compare only over the same class count")
        return FrequencyTable(
            class_pct=list(self.class_pct),
            im_pct=self.im_pct,
            diffs=[a - b for a, b in zip(self.class_pct, reference.class_pct)],
            im_diff=self.im_pct - reference.im_pct,
        )

    def rounded(self) -> dict:
        """One-decimal presentation row; class+IM cells sum to exactly 100.0."""
        cells = round_to_sum(self.class_pct + [self.im_pct])
        return {"classes": cells[:-1], "im": cells[-1]}

    def to_dict(self) -> dict:
        out: dict = {"class_pct": self.class_pct, "im_pct": self.im_pct}
        if self.diffs is not None:
            out.update(diffs=self.diffs, im_diff=self.im_diff, abs_dev_sum=self.abs_dev_sum)
        out["rounded"] = self.rounded()
        return out


def class_frequency(
    masks: list[np.ndarray], num_classes: int, im_aware: bool = False
) -> FrequencyTable:
    """Pixel share per class over a mask set, as percentages.

    With ``im_aware`` the masks are read in the combined-dataset label space:
    value 0 counts into the IM column and value k is class k-1. Otherwise
    values are plain class ids and the IM column stays 0.
    """
    if not masks:
        raise DataError("class_frequency needs at least one mask")
    width = num_classes + 1 if im_aware else num_classes
    counts = np.zeros(width, dtype=np.int64)
    for m in masks:
        m = np.asarray(m)
        if m.ndim != 2:
            raise DataError(f"class masks must be (H,W), got {m.shape}")
        top = int(m.max(initial=0))
        if top >= width:
            raise DataError(f"mask value {top} outside the declared {num_classes} classes")
        counts += np.bincount(m.ravel(), minlength=width)
    pct = counts / counts.sum() * 100.0
    if im_aware:
        return FrequencyTable(class_pct=[float(p) for p in pct[1:]], im_pct=float(pct[0]))
    return FrequencyTable(class_pct=[float(p) for p in pct], im_pct=0.0)


# --------------------------------------------------------------------------
# IM-size statistics


def im_statistics(pairs: list[PseudoPair]) -> dict:
    """Distribution of per-pair IM coverage plus the binary-filter rejection rate.

    IM fraction = IM pixels / total pixels. A pair counts as rejected when its
    agreed foreground does not strictly outweigh the IM (the acceptance rule
    for binary pairs, applied informationally to any mode).
    """
    if not pairs:
        raise DataError("im_statistics needs at least one pair")
    fractions, rejected = [], 0
    for p in pairs:
        im = np.asarray(p.im) > 0
        fractions.append(im.sum() / im.size)
        if int(np.count_nonzero(p.label)) <= int(im.sum()):
            rejected += 1
    arr = np.asarray(fractions, dtype=np.float64)
    pct = {f"p{q}": float(np.percentile(arr, q)) for q in (10, 25, 75, 90)}
    return {
        "count": len(pairs),
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        **pct,
        "rejection_rate": rejected / len(pairs),
    }


# --------------------------------------------------------------------------
# Report emission (CSV + SVG)


@dataclass
class _Series:
    approach: str
    points: dict[int, list[float]] = field(default_factory=dict)  # generation -> run values


def _load_final_report(run_dir: Path) -> dict:
    path = Path(run_dir) / REPORT_NAME
    if not path.is_file():
        raise DataError(f"no final report at {path}; finish the run first")
    return json.loads(path.read_text("utf-8"))


def collect_series(run_dirs: list[Path | str]) -> tuple[list[_Series], str]:
    """Fold run reports into per-approach metric curves (repeats accumulate)."""
    if not run_dirs:
        raise DataError("need at least one run directory")
    series: dict[str, _Series] = {}
    metric_names = set()
    for rd in run_dirs:
        report = _load_final_report(Path(rd))
        metric_names.add(report["metric_name"])
        s = series.setdefault(report["approach"], _Series(approach=report["approach"]))
        for gen in report["generations"]:
            if gen["generation"] < 1:
                continue  # bootstrap round, not a generation
            value = gen["best"]["aggregate"][gen["metric_name"]]
            s.points.setdefault(gen["generation"], []).append(float(value))
    if len(metric_names) > 1:
        raise DataError(f"runs mix selection metrics {sorted(metric_names)}; chart one at a time")
    return [series[k] for k in sorted(series)], metric_names.pop()


def emit_report(run_dirs: list[Path | str], out_dir: Path | str) -> dict:
    """Write metric-vs-generation curves as CSV and a self-contained SVG.

    CSV schema: approach,generation,metric,value,stderr — value is the mean
    over repeated runs and stderr the sample standard error when two or more
    repeats exist (empty otherwise).
    """
    all_series, metric_name = collect_series(run_dirs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for s in all_series:
        for g in sorted(s.points):
            vals = s.points[g]
            mean = float(np.mean(vals))
            stderr = (
                float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) >= 2 else None
            )
            rows.append((s.approach, g, metric_name, mean, stderr))

    csv_path = out_dir / "metrics.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["approach", "generation", "metric", "value", "stderr"])
        for approach, g, metric, value, stderr in rows:
            writer.writerow([approach, g, metric, repr(value), "" if stderr is None else repr(stderr)])

    svg_path = out_dir / "metrics.svg"
    svg_path.write_text(_render_chart(all_series, metric_name), "utf-8")
    summary = {
        "csv": csv_path.name,
        "svg": svg_path.name,
        "metric": metric_name,
        "approaches": [s.approach for s in all_series],
    }
    write_json(out_dir / "analysis.json", summary)
    return {"csv": csv_path, "svg": svg_path, "summary": summary}


def _render_chart(all_series: list[_Series], metric_name: str) -> str:
    width, height = 640, 400
    left, right, top, bottom = 60, 150, 20, 50
    plot_w, plot_h = width - left - right, height - top - bottom

    gens = sorted({g for s in all_series for g in s.points})
    values = [v for s in all_series for vs in s.points.values() for v in vs]
    lo, hi = min(values), max(values)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.05, hi + 0.05
    pad = (hi - lo) * 0.08
    lo, hi = lo - pad, hi + pad

    def x(g: float) -> float:
        if len(gens) == 1:
            return left + plot_w / 2
        return left + (g - gens[0]) / (gens[-1] - gens[0]) * plot_w

    def y(v: float) -> float:
        return top + (hi - v) / (hi - lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" '
        'stroke="black"/>',
    ]
    for g in gens:
        gx = x(g)
        parts.append(
            f'<line x1="{gx:.2f}" y1="{top + plot_h}" x2="{gx:.2f}" y2="{top + plot_h + 4}" '
            'stroke="black"/>'
        )
        parts.append(
            f'<text x="{gx:.2f}" y="{top + plot_h + 18}" text-anchor="middle">{g}</text>'
        )
    for i in range(5):
        v = lo + (hi - lo) * i / 4
        vy = y(v)
        parts.append(f'<line x1="{left - 4}" y1="{vy:.2f}" x2="{left}" y2="{vy:.2f}" stroke="black"/>')
        parts.append(
            f'<text x="{left - 8}" y="{vy + 4:.2f}" text-anchor="end">{v:.3f}</text>'
        )
    parts.append(
        f'<text x="{left + plot_w / 2}" y="{height - 12}" text-anchor="middle">generation</text>'
    )
    parts.append(
        f'<text x="16" y="{top + plot_h / 2}" text-anchor="middle" '
        f'transform="rotate(-90 16 {top + plot_h / 2})">{metric_name}</text>'
    )
    for idx, s in enumerate(all_series):
        color = _SERIES_COLORS[idx % len(_SERIES_COLORS)]
        pts = " ".join(
            f"{x(g):.2f},{y(float(np.mean(s.points[g]))):.2f}" for g in sorted(s.points)
        )
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for g in sorted(s.points):
            parts.append(
                f'<circle cx="{x(g):.2f}" cy="{y(float(np.mean(s.points[g]))):.2f}" r="3" '
                f'fill="{color}"/>'
            )
        ly = top + 16 + idx * 18
        lx = left + plot_w + 12
        parts.append(
            f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 24}" y2="{ly - 4}" stroke="{color}" '
            'stroke-width="2"/>'
        )
        parts.append(f'<text x="{lx + 30}" y="{ly}">{s.approach}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
