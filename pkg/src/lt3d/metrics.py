"""Overlap and surface-distance metrics for binary masks."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .errors import DimensionError, UndefinedMetricError


@dataclass
class MetricReport:
    dice: float
    precision: float
    recall: float
    msd_mm: float | None = None
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def to_dict(self):
        return asdict(self)

    def to_text(self):
        lines = []
        for k, v in self.to_dict().items():
            lines.append(f"{k}={'nan' if v is None else v}")
        return "\n".join(lines) + "\n"

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _binary(a):
    return np.asarray(a).astype(bool)


def confusion_counts(pred, label):
    pred, label = _binary(pred), _binary(label)
    if pred.shape != label.shape:
        raise DimensionError(f"prediction {pred.shape} and label {label.shape} differ")
    tp = int(np.count_nonzero(pred & label))
    fp = int(np.count_nonzero(pred & ~label))
    fn = int(np.count_nonzero(~pred & label))
    tn = int(pred.size - tp - fp - fn)
    return tp, fp, fn, tn


def confusion_metrics(pred, label):
    """Dice, precision and recall. Both masks empty counts as perfect agreement;
    any other zero denominator yields 0."""
    tp, fp, fn, tn = confusion_counts(pred, label)
    if tp + fp + fn == 0:
        return MetricReport(1.0, 1.0, 1.0, tp=tp, fp=fp, fn=fn, tn=tn)
    dice = 2 * tp / (2 * tp + fp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return MetricReport(dice, precision, recall, tp=tp, fp=fp, fn=fn, tn=tn)


def surface_voxels(mask):
    """Foreground voxels with at least one 6-connected background neighbour (outside counts as background)."""
    m = _binary(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    core = (slice(1, -1),) * m.ndim
    for ax in range(m.ndim):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=ax)[core]
    return m & ~interior


def _surface_points(mask, spacing):
    pts = np.argwhere(surface_voxels(mask)).astype(np.float64)
    return np.ascontiguousarray(pts * np.asarray(spacing, dtype=np.float64))


def mean_surface_distance(pred, label, spacing_mm=(1.0, 1.0, 1.0)):
    """Symmetric mean of nearest-surface distances, in mm.

    Nearest points are found by exhaustive search over surface voxels.
    """
    pred, label = _binary(pred), _binary(label)
    if pred.shape != label.shape:
        raise DimensionError(f"prediction {pred.shape} and label {label.shape} differ")
    if not pred.any() or not label.any():
        raise UndefinedMetricError("mean surface distance is undefined for an empty mask")
    if len(spacing_mm) != pred.ndim:
        raise DimensionError(f"spacing {spacing_mm} does not match rank {pred.ndim}")
    a = _surface_points(pred, spacing_mm)
    b = _surface_points(label, spacing_mm)
    ab = np.sqrt(_kernels.nearest_sq_dists(a, b)).mean()
    ba = np.sqrt(_kernels.nearest_sq_dists(b, a)).mean()
    return float((ab + ba) / 2.0)


def evaluate_case(pred, label, spacing_mm):
    report = confusion_metrics(pred, label)
    try:
        report.msd_mm = mean_surface_distance(pred, label, spacing_mm)
    except UndefinedMetricError:
        report.msd_mm = None
    return report
