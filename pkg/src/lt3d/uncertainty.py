"""Hierarchy-consensus uncertainty and its region-wise statistics.

Per voxel, uncertainty is the RMS deviation of the N upsampled stage
predictions from the final binary mask.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .metrics import _binary

# Reported region means/stds; their ordering FP > FN > TP > TN is the reference.
REPORTED_REGION_STATS = {
    "TP": (0.040, 0.009),
    "TN": (0.002, 0.000),
    "FN": (0.122, 0.019),
    "FP": (0.563, 0.036),
}
REGIONS = ("TP", "TN", "FP", "FN")


@dataclass
class UncertaintyMap:
    values: np.ndarray
    n_stages: int


@dataclass
class RegionStat:
    mean: float
    std: float
    count: int


@dataclass
class RegionStats:
    """Stats per confusion region; an empty region maps to None."""

    regions: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.regions[key]

    def mispredicted_vs_correct(self, u, pred, label):
        pred, label = _binary(pred), _binary(label)
        wrong = pred != label
        return (float(u[wrong].mean()) if wrong.any() else None,
                float(u[~wrong].mean()) if (~wrong).any() else None)

    def to_dict(self):
        return {k: None if v is None else {"mean": v.mean, "std": v.std, "count": v.count}
                for k, v in self.regions.items()}


def _to_numpy(p):
    arr = p.data if isinstance(p, T.Tensor) else np.asarray(p, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise DimensionError(f"stage mask must be [D,H,W] or [1,D,H,W], got {arr.shape}")
        arr = arr[0]
    return arr.astype(np.float64)


def upsample(prob, shape):
    """Align-corners trilinear upsampling of a [D,H,W] array (no autodiff)."""
    if prob.shape == tuple(shape):
        return prob
    out = prob
    for ax, n in enumerate(shape):
        if out.shape[ax] != n:
            m = T.resize_matrix(out.shape[ax], n)
            out = np.moveaxis(np.moveaxis(out, ax, -1) @ m.T, -1, ax)
    return out


def uncertainty_map(stages, final_binary=None):
    """RMS deviation of stage predictions from the final binary mask.

    ``stages`` is a :class:`~lt3d.segnet.StagePredictions` (its stage masks
    plus the final probability form the N predictions, the thresholded
    output is ``out``), or a list of probability arrays with
    ``final_binary`` given explicitly.
    """
    if hasattr(stages, "all_probs"):
        probs = stages.all_probs()
        final_binary = stages.final_binary if final_binary is None else final_binary
    else:
        probs = list(stages)
    if not probs:
        raise ContractError("uncertainty needs at least one stage prediction")
    if final_binary is None:
        raise ContractError("final binary mask is required")
    out = _binary(final_binary)
    if out.ndim == 4:
        out = out[0]
    out = out.astype(np.float64)
    acc = np.zeros(out.shape)
    for p in probs:
        up = upsample(_to_numpy(p), out.shape)
        acc += (up - out) ** 2
    values = np.sqrt(acc / len(probs))
    return UncertaintyMap(values, len(probs))


def region_uncertainty_stats(u, pred, label):
    """Mean and population std of uncertainty over TP, TN, FP and FN voxels."""
    values = u.values if isinstance(u, UncertaintyMap) else np.asarray(u)
    pred, label = _binary(pred), _binary(label)
    if not values.shape == pred.shape == label.shape:
        raise DimensionError(f"shapes differ: {values.shape}, {pred.shape}, {label.shape}")
    masks = {"TP": pred & label, "TN": ~pred & ~label, "FP": pred & ~label, "FN": ~pred & label}
    regions = {}
    for name in REGIONS:
        sel = values[masks[name]]
        regions[name] = RegionStat(float(sel.mean()), float(sel.std()), int(sel.size)) if sel.size else None
    return RegionStats(regions)


def pooled_region_stats(cases):
    """Region stats over all voxels of all ``(u, pred, label)`` cases together."""
    cases = list(cases)
    u = np.concatenate([np.ravel(c[0].values if isinstance(c[0], UncertaintyMap) else c[0]) for c in cases])
    pred = np.concatenate([np.ravel(c[1]) for c in cases])
    label = np.concatenate([np.ravel(c[2]) for c in cases])
    return region_uncertainty_stats(u, pred, label)


def averaged_region_stats(per_case):
    """Per-region mean and std of the per-case region means (cases lacking a region are skipped)."""
    out = {}
    for name in REGIONS:
        means = [s[name].mean for s in per_case if s[name] is not None]
        out[name] = RegionStat(float(np.mean(means)), float(np.std(means)), len(means)) if means else None
    return RegionStats(out)
