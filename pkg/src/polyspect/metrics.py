"""Evaluation arithmetic: reference areas, area-ratio overlap, confusion
counting, and the derived scores.

Score formulas are the standard ones:

    iou       = tp / (tp + fn + fp)
    accuracy  = (tp + tn) / (tp + tn + fp + fn)
    precision = tp / (tp + fp)
    recall    = tp / (tp + fn)
    f1        = 2 * precision * recall / (precision + recall)

A score whose denominator is zero is reported as undefined (None), never
as zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .segment import Region

DEFAULT_MATCH_RADIUS_PX = 50.0
DEFAULT_NON_MP_LABELS = frozenset({"NOM"})

REFERENCE_METHODS = ("median", "first_quartile")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")


@dataclass(frozen=True)
class Scores:
    iou: Optional[float]
    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]


@dataclass(frozen=True)
class AreaSeries:
    """Mask area of one particle plus its per-condition segmented areas."""

    particle_name: str
    mask_area_px: float
    condition_areas_px: tuple[float, ...]
    reference_method: str = "median"

    def __post_init__(self):
        if not self.condition_areas_px:
            raise ValueError(f"{self.particle_name}: empty condition area list")
        if self.mask_area_px <= 0 or min(self.condition_areas_px) <= 0:
            raise ValueError(f"{self.particle_name}: areas must be positive")
        if self.reference_method not in REFERENCE_METHODS:
            raise ValueError(f"unknown reference method {self.reference_method!r}")

    def reference_area(self) -> float:
        return reference_area(self.condition_areas_px, self.reference_method)

    def iou(self) -> float:
        return area_ratio_iou(self.mask_area_px, self.reference_area())

    def roi_percentage(self) -> float:
        return roi_percentage(self.mask_area_px, self.reference_area())


@dataclass(frozen=True)
class LabeledDetection:
    """A detected (or ground-truth) particle: centroid plus class label."""

    id: int
    centroid: tuple[float, float]
    label: str


def reference_area(areas: Sequence[float], method: str = "median") -> float:
    """Median or first quartile of the per-condition areas.

    The median of an even-length list is the mean of the two middle order
    statistics. The first quartile interpolates linearly at rank position
    (n + 1) / 4 of the sorted list.
    """
    if len(areas) == 0:
        raise ValueError("empty area list")
    values = np.sort(np.asarray(areas, dtype=np.float64))
    if method == "median":
        return float(np.median(values))
    if method == "first_quartile":
        n = len(values)
        pos = (n + 1) / 4.0
        if pos <= 1.0:
            return float(values[0])
        if pos >= n:
            return float(values[-1])
        k = int(math.floor(pos))
        frac = pos - k
        return float(values[k - 1] + frac * (values[k] - values[k - 1]))
    raise ValueError(f"unknown reference method {method!r}")


def area_ratio_iou(mask_area: float, ref_area: float) -> float:
    """Single-region overlap proxy: min(a, b) / max(a, b), in (0, 1]."""
    if mask_area <= 0 or ref_area <= 0:
        raise ValueError("areas must be positive")
    return min(mask_area, ref_area) / max(mask_area, ref_area)


def roi_percentage(mask_area: float, ref_area: float) -> float:
    """Mask area as a percentage of the reference area."""
    if ref_area <= 0:
        raise ValueError("reference area must be positive")
    return 100.0 * mask_area / ref_area


def detection_confusion(
    predicted: Sequence[LabeledDetection],
    truth: Sequence[LabeledDetection],
    match_radius_px: float = DEFAULT_MATCH_RADIUS_PX,
    non_mp_labels: frozenset[str] = DEFAULT_NON_MP_LABELS,
) -> ConfusionCounts:
    """Greedy nearest-centroid matching followed by confusion counting.

    Candidate pairs within ``match_radius_px`` are consumed nearest-first.
    A matched pair counts as TP when the labels agree, TN when both sides
    carry a non-particle label, FP otherwise. Unmatched truth entries are
    missed detections (FN), except non-particle truth, which going
    undetected is the desired negative outcome and is not counted.
    Unmatched predictions are spurious: FP when labeled as a particle
    class, TN when explicitly labeled non-particle.
    """
    candidates = []
    for pi, p in enumerate(predicted):
        for ti, t in enumerate(truth):
            dist = math.hypot(p.centroid[0] - t.centroid[0], p.centroid[1] - t.centroid[1])
            if dist <= match_radius_px:
                candidates.append((dist, pi, ti))
    candidates.sort()

    matched_pred: dict[int, int] = {}
    matched_truth: set[int] = set()
    for _, pi, ti in candidates:
        if pi in matched_pred or ti in matched_truth:
            continue
        matched_pred[pi] = ti
        matched_truth.add(ti)

    tp = fp = tn = fn = 0
    for pi, p in enumerate(predicted):
        if pi in matched_pred:
            t = truth[matched_pred[pi]]
            if p.label in non_mp_labels and t.label in non_mp_labels:
                tn += 1
            elif p.label == t.label:
                tp += 1
            else:
                fp += 1
        else:
            if p.label in non_mp_labels:
                tn += 1
            else:
                fp += 1
    for ti, t in enumerate(truth):
        if ti not in matched_truth and t.label not in non_mp_labels:
            fn += 1
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den > 0 else None


def scores(c: ConfusionCounts) -> Scores:
    """All five scores for a set of confusion counts (None where undefined)."""
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0.0:
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return Scores(
        iou=_ratio(c.tp, c.tp + c.fn + c.fp),
        accuracy=_ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn),
        precision=precision,
        recall=recall,
        f1=f1,
    )


def size_category_counts(
    regions: Sequence[Region],
    thresholds_px2: Sequence[int],
) -> dict[int, int]:
    """How many regions meet or exceed each area threshold."""
    thresholds = list(thresholds_px2)
    if any(t <= 0 for t in thresholds):
        raise ValueError("thresholds must be positive")
    if any(a >= b for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly ascending")
    areas = [r.area_px for r in regions]
    return {t: sum(1 for a in areas if a >= t) for t in thresholds}


@dataclass(frozen=True)
class AreaTableRow:
    particle_name: str
    reference_method: str
    mask_area_px: float
    reference_area_px: float
    iou: float
    roi_percent: float


def area_table(series: Sequence[AreaSeries]) -> tuple[list[AreaTableRow], float]:
    """Per-particle reference/overlap table plus the mean overlap ratio."""
    rows = [
        AreaTableRow(
            particle_name=s.particle_name,
            reference_method=s.reference_method,
            mask_area_px=s.mask_area_px,
            reference_area_px=s.reference_area(),
            iou=s.iou(),
            roi_percent=s.roi_percentage(),
        )
        for s in series
    ]
    mean_iou = float(np.mean([r.iou for r in rows])) if rows else float("nan")
    return rows, mean_iou
