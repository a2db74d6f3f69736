"""Scan-level segmentation/detection metrics, glance accounting and FLOP totals."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import ValidationError, check_same_shape

__all__ = [
    "eval_dsc",
    "DetectionCounts",
    "eval_detection",
    "eval_fp_rate",
    "glance_sens_spec",
    "preserved_ratio",
    "FlopModel",
    "flop_report",
    "EvalReport",
]


def eval_dsc(pred, gt) -> float:
    """Dice between binary masks; two empty masks score 1.0."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    check_same_shape(pred, gt, "prediction and ground truth")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.sum(pred & gt)) / denom


@dataclass
class DetectionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def zero_positive(self) -> bool:
        return 2 * self.tp + self.fp + self.fn == 0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2.0 * self.tp / denom


def eval_detection(pairs) -> DetectionCounts:
    """Scan-level detection from ``(pred, gt)`` mask pairs.

    A diseased scan counts as detected when the prediction overlaps the
    lesion mask; a healthy scan is a false positive when anything is
    predicted. With no positives at all F1 is reported as 1.0 and
    ``zero_positive`` is set.
    """
    counts = DetectionCounts()
    for pred, gt in pairs:
        pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
        check_same_shape(pred, gt, "prediction and ground truth")
        if gt.any():
            if np.any(pred & gt):
                counts.tp += 1
            else:
                counts.fn += 1
        elif pred.any():
            counts.fp += 1
        else:
            counts.tn += 1
    return counts


def eval_fp_rate(predictions) -> float:
    """Fraction of (healthy-scan) predictions with any positive voxel."""
    predictions = list(predictions)
    if not predictions:
        return 0.0
    return sum(bool(np.any(p)) for p in predictions) / len(predictions)


def glance_sens_spec(decisions, labels) -> tuple[float, float]:
    """Window-level sensitivity and specificity of the glance decisions.

    An empty class yields 1.0 for its rate (nothing to miss).
    """
    d = np.asarray(decisions, dtype=bool).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if d.shape != y.shape:
        raise ValidationError("decisions and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    sens = float(np.sum(d & y)) / n_pos if n_pos else 1.0
    spec = float(np.sum(~d & ~y)) / n_neg if n_neg else 1.0
    return sens, spec


def preserved_ratio(n_selected: int, n_total: int) -> float:
    if n_total <= 0:
        return 0.0
    if not 0 <= n_selected <= n_total:
        raise ValidationError(f"selected count {n_selected} outside [0, {n_total}]")
    return n_selected / n_total


@dataclass(frozen=True)
class FlopModel:
    flops_glance_per_subvolume: float
    flops_focus_per_subvolume: float

    def __post_init__(self):
        if self.flops_glance_per_subvolume <= 0 or self.flops_focus_per_subvolume <= 0:
            raise ValidationError("FLOP constants must be positive")

    @classmethod
    def for_window(cls, window, hidden: int = 16) -> "FlopModel":
        from .focus import focus_flops
        from .glance import glance_flops

        return cls(glance_flops(window, hidden=hidden), focus_flops(window))


def flop_report(n_selected: int, n_total: int, fm: FlopModel, glance_used: bool = True) -> dict:
    """FLOP totals with and without discarding, and the resulting speedup.

    Without a glance model every window is segmented and nothing is spent on
    scoring, so the speedup is exactly 1.
    """
    f_g, f_f = fm.flops_glance_per_subvolume, fm.flops_focus_per_subvolume
    without = n_total * f_f
    if glance_used:
        glance = n_total * f_g
        focus = n_selected * f_f
    else:
        glance, focus = 0.0, n_total * f_f
    with_discard = glance + focus
    speedup = without / with_discard if with_discard > 0 else float("inf")
    return {
        "flops_glance": glance,
        "flops_focus": focus,
        "flops_with_discard": with_discard,
        "flops_without_discard": without,
        "speedup": speedup,
    }


@dataclass
class EvalReport:
    per_scan: list = field(default_factory=list)
    aggregate_dsc: float = 0.0
    detection_f1: float = 0.0
    zero_positive: bool = False
    detection_counts: dict = field(default_factory=dict)
    glance_sensitivity: float = 0.0
    glance_specificity: float = 0.0
    preserved_ratio: float = 0.0
    positive_window_prevalence: float = 0.0
    fp_rate: float = 0.0
    n_windows: int = 0
    n_selected: int = 0
    flops_glance: float = 0.0
    flops_focus: float = 0.0
    flops_with_discard: float = 0.0
    flops_without_discard: float = 0.0
    speedup: float = 1.0
    variant: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def summary_row(self) -> dict:
        return {k: v for k, v in self.to_dict().items() if k not in ("per_scan", "detection_counts")}
