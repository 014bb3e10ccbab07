"""Evaluation metrics: confusion-count ratios and contour distances in mm.

Ratios follow the 0/0 -> undefined convention: a metric whose denominator is
zero is reported as None and excluded from aggregate means (with a count),
never silently coerced to 0 or 1. Surface distances are computed between
4-connectivity boundary pixels, scaled per axis by the pixel spacing.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

METRIC_NAMES = ("precision", "sensitivity", "dice", "iou", "hd_mm", "assd_mm")


@dataclass
class CaseMetrics:
    lesion_id: str
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float | None
    sensitivity: float | None
    dice: float | None
    iou: float | None
    hd_mm: float | None = None
    assd_mm: float | None = None


@dataclass
class MetricsReport:
    """Aggregate over cases: means of defined values plus exclusion counts.

    aggregation is "lesion" (slice values averaged within each lesion, then
    lesions averaged) or "slice" (flat mean over slices). excluded counts the
    units (lesions or slices) that had no defined value for a metric.
    """

    aggregation: str
    n_cases: int
    n_lesions: int
    means: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)
    cases: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "aggregation": self.aggregation,
            "n_cases": self.n_cases,
            "n_lesions": self.n_lesions,
            "means": self.means,
            "excluded": self.excluded,
            "cases": [asdict(c) for c in self.cases],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    def write_csv(self, path) -> None:
        columns = ["lesion_id", "tp", "fp", "fn", "tn", *METRIC_NAMES]
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(columns)
            for case in self.cases:
                row = [case.lesion_id, case.tp, case.fp, case.fn, case.tn]
                row += ["" if getattr(case, m) is None else repr(getattr(case, m)) for m in METRIC_NAMES]
                writer.writerow(row)
            summary = ["mean", "", "", "", ""]
            summary += ["" if self.means[m] is None else repr(self.means[m]) for m in METRIC_NAMES]
            writer.writerow(summary)


def binarize(x: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a probability field into a uint8 mask (>= threshold -> 1)."""
    return (np.asarray(x) >= threshold).astype(np.uint8)


def _check_binary_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} mask must be binary")
    return pred.astype(bool), gt.astype(bool)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def pixel_metrics(pred: np.ndarray, gt: np.ndarray, lesion_id: str = "") -> CaseMetrics:
    """Confusion counts and the derived overlap ratios for one slice."""
    p, g = _check_binary_pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return CaseMetrics(
        lesion_id=lesion_id,
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
        precision=_ratio(tp, tp + fp),
        sensitivity=_ratio(tp, tp + fn),
        dice=_ratio(2 * tp, 2 * tp + fp + fn),
        iou=_ratio(tp, tp + fp + fn),
    )


def extract_contour(mask: np.ndarray) -> np.ndarray:
    """(N,2) array of (row, col) positive pixels with a zero or off-image 4-neighbor."""
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    boundary = m & ~interior
    rows, cols = np.nonzero(boundary)
    return np.stack([rows, cols], axis=1).astype(np.int64)


def _distance_matrix(x_points: np.ndarray, y_points: np.ndarray, spacing_yx) -> np.ndarray:
    sy, sx = float(spacing_yx[0]), float(spacing_yx[1])
    dy = (x_points[:, None, 0] - y_points[None, :, 0]) * sy
    dx = (x_points[:, None, 1] - y_points[None, :, 1]) * sx
    return np.sqrt(dy * dy + dx * dx)


def hausdorff(x_points: np.ndarray, y_points: np.ndarray, spacing_yx=(1.0, 1.0)) -> float | None:
    """Symmetric Hausdorff distance in mm; None when either set is empty."""
    x_points = np.asarray(x_points, dtype=np.float64)
    y_points = np.asarray(y_points, dtype=np.float64)
    if len(x_points) == 0 or len(y_points) == 0:
        return None
    d = _distance_matrix(x_points, y_points, spacing_yx)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def assd(x_points: np.ndarray, y_points: np.ndarray, spacing_yx=(1.0, 1.0)) -> float | None:
    """Average symmetric surface distance in mm; None when either set is empty."""
    x_points = np.asarray(x_points, dtype=np.float64)
    y_points = np.asarray(y_points, dtype=np.float64)
    if len(x_points) == 0 or len(y_points) == 0:
        return None
    d = _distance_matrix(x_points, y_points, spacing_yx)
    total = d.min(axis=1).sum() + d.min(axis=0).sum()
    return float(total / (len(x_points) + len(y_points)))


def case_metrics(
    pred: np.ndarray, gt: np.ndarray, spacing_yx=(1.0, 1.0), lesion_id: str = ""
) -> CaseMetrics:
    """pixel_metrics plus contour HD/ASSD (None when a contour is empty)."""
    case = pixel_metrics(pred, gt, lesion_id=lesion_id)
    pc = extract_contour(np.asarray(pred))
    gc = extract_contour(np.asarray(gt))
    case.hd_mm = hausdorff(pc, gc, spacing_yx)
    case.assd_mm = assd(pc, gc, spacing_yx)
    return case


def _mean_or_none(values: list) -> float | None:
    defined = [v for v in values if v is not None]
    if not defined:
        return None
    return float(np.mean(defined))


def aggregate_report(cases: list, aggregation: str = "lesion") -> MetricsReport:
    """Mean each metric over its defined values, excluding (and counting) the rest."""
    if not cases:
        raise ValueError("aggregate_report requires at least one case")
    if aggregation not in ("lesion", "slice"):
        raise ValueError(f"unknown aggregation {aggregation!r}")

    lesion_order = list(dict.fromkeys(c.lesion_id for c in cases))
    means: dict = {}
    excluded: dict = {}
    if aggregation == "slice":
        for name in METRIC_NAMES:
            values = [getattr(c, name) for c in cases]
            means[name] = _mean_or_none(values)
            excluded[name] = sum(1 for v in values if v is None)
    else:
        groups = {lid: [c for c in cases if c.lesion_id == lid] for lid in lesion_order}
        for name in METRIC_NAMES:
            per_lesion = [
                _mean_or_none([getattr(c, name) for c in groups[lid]]) for lid in lesion_order
            ]
            means[name] = _mean_or_none(per_lesion)
            excluded[name] = sum(1 for v in per_lesion if v is None)

    return MetricsReport(
        aggregation=aggregation,
        n_cases=len(cases),
        n_lesions=len(lesion_order),
        means=means,
        excluded=excluded,
        cases=list(cases),
    )
