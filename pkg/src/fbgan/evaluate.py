"""Quantitative evaluation: ROI statistics, clipped HU histograms, correlation.

The protocol mirrors clinical practice for synthetic CT assessment: extract a
region of interest around the structure of interest, clamp to a narrow HU
window so values outside it collapse onto the window bounds, histogram the
window at fixed bin width, and score each method by the Pearson correlation
of its histogram against the reference scan's.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, NumericError, ValidationError
from .volume import Volume

DEFAULT_CLIP = (-300.0, 150.0)
DEFAULT_BIN_WIDTH = 1.0


@dataclass
class Histogram:
    lo: float
    hi: float
    bin_width: float
    counts: np.ndarray

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValidationError("histogram requires lo < hi")
        if self.bin_width <= 0:
            raise ValidationError("bin_width must be > 0")
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1 or np.any(counts < 0):
            raise ValidationError("counts must be a 1D nonnegative vector")
        if len(counts) != n_bins(self.lo, self.hi, self.bin_width):
            raise ValidationError(
                f"expected {n_bins(self.lo, self.hi, self.bin_width)} bins, got {len(counts)}"
            )
        self.counts = counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(len(self.counts)) + 0.5) * self.bin_width

    def same_binning(self, other: "Histogram") -> bool:
        return (
            self.lo == other.lo
            and self.hi == other.hi
            and self.bin_width == other.bin_width
        )


def n_bins(lo: float, hi: float, bin_width: float) -> int:
    # The extra closed bin at the top collects values clipped to exactly hi.
    return int(math.ceil((hi - lo) / bin_width)) + 1


def extract_roi(vol: Volume, center, size) -> Volume:
    """Sub-volume of ``size`` voxels centered at ``center``; no silent padding."""
    center = tuple(int(c) for c in center)
    size = tuple(int(s) for s in size)
    if len(center) != 3 or len(size) != 3 or min(size) < 1:
        raise ValidationError("center and size must be 3-vectors with positive size")
    starts = [c - s // 2 for c, s in zip(center, size)]
    for start, s, n, axis in zip(starts, size, vol.shape, "zyx"):
        if start < 0 or start + s > n:
            raise ValidationError(
                f"ROI [{start}, {start + s}) exceeds volume extent {n} on axis {axis}"
            )
    z0, y0, x0 = starts
    dz, dy, dx = size
    data = vol.data[z0 : z0 + dz, y0 : y0 + dy, x0 : x0 + dx].copy()
    return vol.with_data(data)


def roi_stats(vol: Volume) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation (divisor N) in HU."""
    if vol.data.size == 0:
        raise ValidationError("cannot compute statistics of an empty region")
    data = vol.data.astype(np.float64)
    return float(data.mean()), float(data.std())


def hu_histogram(
    vol: Volume,
    lo: float = DEFAULT_CLIP[0],
    hi: float = DEFAULT_CLIP[1],
    bin_width: float = DEFAULT_BIN_WIDTH,
) -> Histogram:
    """Clip values to [lo, hi], then bin; counts always sum to the voxel count."""
    if not lo < hi:
        raise ValidationError("clip window requires lo < hi")
    if bin_width <= 0:
        raise ValidationError("bin_width must be > 0")
    nb = n_bins(lo, hi, bin_width)
    clipped = np.clip(vol.data.astype(np.float64), lo, hi)
    idx = np.floor((clipped - lo) / bin_width).astype(np.int64)
    idx = np.minimum(idx, nb - 1)
    counts = np.bincount(idx.ravel(), minlength=nb)
    return Histogram(lo=lo, hi=hi, bin_width=bin_width, counts=counts)


def histogram_correlation(h_a: Histogram, h_b: Histogram) -> float:
    """Pearson correlation of the two count vectors."""
    if not h_a.same_binning(h_b):
        raise ConfigurationError("histograms use different clip windows or bin widths")
    a = h_a.counts.astype(np.float64)
    b = h_b.counts.astype(np.float64)
    da, db = a - a.mean(), b - b.mean()
    va, vb = float((da * da).sum()), float((db * db).sum())
    if va == 0.0 or vb == 0.0:
        raise NumericError("correlation undefined for a constant count vector")
    return float((da * db).sum() / math.sqrt(va * vb))


@dataclass
class CaseResult:
    case: str
    method: str
    mean_hu: float
    sd_hu: float
    corr_r: float


@dataclass
class EvalReport:
    """Per-case and aggregate rows for every evaluated method."""

    clip: tuple[float, float]
    bin_width: float
    roi_size: tuple[int, int, int]
    rows: list[CaseResult] = field(default_factory=list)

    def methods(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def aggregate(self) -> list[CaseResult]:
        out = []
        for method in self.methods():
            rs = [r for r in self.rows if r.method == method]
            out.append(
                CaseResult(
                    case="mean",
                    method=method,
                    mean_hu=float(np.mean([r.mean_hu for r in rs])),
                    sd_hu=float(np.mean([r.sd_hu for r in rs])),
                    corr_r=float(np.mean([r.corr_r for r in rs])),
                )
            )
        return out

    def mean_corr(self, method: str) -> float:
        rs = [r.corr_r for r in self.rows if r.method == method]
        if not rs:
            raise ValidationError(f"no rows for method {method!r}")
        return float(np.mean(rs))


def _case_rows(
    case: str,
    volumes: dict[str, Volume],
    reference: Volume,
    center,
    size,
    clip,
    bin_width,
) -> tuple[list[CaseResult], dict[str, Histogram]]:
    from .preprocess import clip_hu

    ref_roi = extract_roi(reference, center, size)
    ref_hist = hu_histogram(ref_roi, clip[0], clip[1], bin_width)
    rows, hists = [], {}
    for method, vol in list(volumes.items()) + [("reference", reference)]:
        roi = ref_roi if method == "reference" else extract_roi(vol, center, size)
        hist = ref_hist if method == "reference" else hu_histogram(roi, clip[0], clip[1], bin_width)
        mean, sd = roi_stats(clip_hu(roi, clip[0], clip[1]))
        rows.append(
            CaseResult(
                case=case,
                method=method,
                mean_hu=mean,
                sd_hu=sd,
                corr_r=histogram_correlation(hist, ref_hist),
            )
        )
        hists[method] = hist
    return rows, hists


def _plot_case(path: Path, case: str, hists: dict[str, Histogram]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for method, hist in hists.items():
        style = {"reference": "k--", "original": "k-"}.get(method, None)
        if style:
            ax.plot(hist.centers(), hist.counts, style, label=method)
        else:
            ax.plot(hist.centers(), hist.counts, label=method)
    ax.set_xlabel("HU")
    ax.set_ylabel("voxel count")
    ax.set_title(f"clipped HU histograms, case {case}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def evaluate_run(
    originals: list[Volume],
    translated: dict[str, list[Volume]],
    references: list[Volume],
    roi_centers: list,
    roi_size,
    clip=DEFAULT_CLIP,
    bin_width: float = DEFAULT_BIN_WIDTH,
    out_dir=None,
    case_names: list[str] | None = None,
) -> EvalReport:
    """Evaluate every method against the references over all test cases.

    Writes ``report.csv`` (per-case rows followed by per-method means) and one
    histogram overlay image per case when ``out_dir`` is given.
    """
    n = len(references)
    if len(originals) != n or any(len(v) != n for v in translated.values()):
        raise ValidationError("originals, translated and references must align per case")
    if len(roi_centers) != n:
        raise ValidationError("need one ROI center per case")
    if not clip[0] < clip[1]:
        raise ValidationError("clip window requires lo < hi")
    for vols in [originals, *translated.values()]:
        for v, ref in zip(vols, references):
            if v.shape != ref.shape:
                raise ValidationError("all volumes of a case must share a shape")

    names = case_names or [f"case{i:02d}" for i in range(n)]
    report = EvalReport(
        clip=(float(clip[0]), float(clip[1])),
        bin_width=float(bin_width),
        roi_size=tuple(int(s) for s in roi_size),
    )
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for i in range(n):
        volumes = {"original": originals[i]}
        for method, vols in translated.items():
            volumes[method] = vols[i]
        rows, hists = _case_rows(
            names[i], volumes, references[i], roi_centers[i], roi_size, clip, bin_width
        )
        report.rows.extend(rows)
        if out_path is not None:
            _plot_case(out_path / f"hist_{names[i]}.png", names[i], hists)

    if out_path is not None:
        write_report_csv(report, out_path / "report.csv")
    return report


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["case", "method", "mean_hu", "sd_hu", "corr_r"])
        for r in report.rows + report.aggregate():
            writer.writerow(
                [r.case, r.method, f"{r.mean_hu:.6f}", f"{r.sd_hu:.6f}", f"{r.corr_r:.6f}"]
            )
