"""Segmentation evaluation: confusion counts, overlap ratios, and exact
Hausdorff distance in mm.

Ratio metrics return NaN when their denominator is zero (reported as
undefined, distinct from 0). Hausdorff uses every foreground voxel (no
percentile variant): a KD-tree for large masks, brute force for small
ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import DomainError, ShapeError
from .volume import Volume3D

BRUTE_FORCE_LIMIT = 10_000


@dataclass(frozen=True)
class ConfusionCounts:
    """Voxelwise confusion counts for one volume pair."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise DomainError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class SegmentationScores:
    """The four ratio metrics; NaN marks an undefined (0/0) value."""

    dsc: float
    precision: float
    sensitivity: float
    specificity: float


@dataclass(frozen=True)
class MetricsReport:
    """Confusion counts plus scores and Hausdorff distance for one pair."""

    counts: ConfusionCounts
    scores: SegmentationScores
    hausdorff_mm: float  # NaN when either mask is empty

    def line(self, name: str = "-") -> str:
        """Single delimited record: name, counts, then the five metrics."""
        c, s = self.counts, self.scores
        vals = [s.dsc, s.precision, s.sensitivity, s.specificity, self.hausdorff_mm]
        txt = "\t".join("NA" if np.isnan(v) else f"{v:.6f}" for v in vals)
        return f"{name}\t{c.tp}\t{c.fp}\t{c.fn}\t{c.tn}\t{txt}"

    @staticmethod
    def header() -> str:
        return "volume\ttp\tfp\tfn\ttn\tdsc\tprecision\tsensitivity\tspecificity\thausdorff_mm"


def _as_bool_mask(v) -> np.ndarray:
    data = v.data if isinstance(v, Volume3D) else np.asarray(v)
    if not np.isin(data, (0, 1)).all():
        raise DomainError("mask contains values outside {0, 1}")
    return data.astype(bool)


def confusion(pred, truth) -> ConfusionCounts:
    """Exact per-voxel confusion counts between two binary masks."""
    p = _as_bool_mask(pred)
    t = _as_bool_mask(truth)
    if p.shape != t.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: int, den: int) -> float:
    return num / den if den > 0 else float("nan")


def segmentation_metrics(c: ConfusionCounts) -> SegmentationScores:
    """DSC, precision, sensitivity, specificity from confusion counts."""
    return SegmentationScores(
        dsc=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        precision=_ratio(c.tp, c.tp + c.fp),
        sensitivity=_ratio(c.tp, c.tp + c.fn),
        specificity=_ratio(c.tn, c.tn + c.fp),
    )


def _mask_points_mm(mask: np.ndarray, spacing) -> np.ndarray:
    pts = np.argwhere(mask).astype(np.float64)
    return pts * np.asarray(spacing, dtype=np.float64)


def hausdorff_distance(a, b, spacing=None, method: str = "auto") -> float:
    """Symmetric Hausdorff distance between two masks, in mm.

    Voxel coordinates are scaled by spacing before Euclidean distances;
    method is "auto", "grid" (KD-tree) or "brute" (exact O(|A||B|) path).
    """
    if spacing is None:
        sa = a.spacing if isinstance(a, Volume3D) else (1.0, 1.0, 1.0)
        sb = b.spacing if isinstance(b, Volume3D) else (1.0, 1.0, 1.0)
        if sa != sb:
            raise ShapeError(f"mask spacings differ: {sa} vs {sb}")
        spacing = sa
    ma = _as_bool_mask(a)
    mb = _as_bool_mask(b)
    if ma.shape != mb.shape:
        raise ShapeError(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    if not ma.any() or not mb.any():
        raise DomainError("Hausdorff distance is undefined for an empty mask")
    pa = _mask_points_mm(ma, spacing)
    pb = _mask_points_mm(mb, spacing)
    if method == "auto":
        method = "brute" if max(len(pa), len(pb)) < BRUTE_FORCE_LIMIT else "grid"
    if method == "brute":
        d = cdist(pa, pb)
        return float(max(d.min(axis=1).max(), d.min(axis=0).max()))
    if method == "grid":
        d_ab = cKDTree(pb).query(pa)[0].max()
        d_ba = cKDTree(pa).query(pb)[0].max()
        return float(max(d_ab, d_ba))
    raise DomainError(f"unknown Hausdorff method {method!r}")


def evaluate_pair(pred, truth, spacing=None) -> MetricsReport:
    """Full metric suite for one (prediction, ground-truth) mask pair.

    Hausdorff is NaN (undefined) when either mask is empty; the ratio
    metrics are still reported.
    """
    c = confusion(pred, truth)
    scores = segmentation_metrics(c)
    try:
        hd = hausdorff_distance(pred, truth, spacing=spacing)
    except DomainError:
        hd = float("nan")
    return MetricsReport(c, scores, hd)


def summarize(reports: dict[str, MetricsReport]) -> str:
    """Aggregate reports into key=value lines (means ignore undefined)."""

    def mean_of(getter):
        vals = [getter(r) for r in reports.values()]
        vals = [v for v in vals if not np.isnan(v)]
        return f"{np.mean(vals):.6f}" if vals else "NA"

    lines = [
        f"volumes={len(reports)}",
        f"mean_dsc={mean_of(lambda r: r.scores.dsc)}",
        f"mean_precision={mean_of(lambda r: r.scores.precision)}",
        f"mean_sensitivity={mean_of(lambda r: r.scores.sensitivity)}",
        f"mean_specificity={mean_of(lambda r: r.scores.specificity)}",
        f"mean_hausdorff_mm={mean_of(lambda r: r.hausdorff_mm)}",
    ]
    return "\n".join(lines)
