"""Mask-driven dynamic ROI resampling.

Along each in-plane axis of extent ``w`` with ROI width ``x0`` the output
holds ``round(alpha * w)`` samples inside the ROI (rate ``alpha*w/x0``) and
the remaining ``round((1+beta)*alpha*w) - round(alpha*w)`` samples in the two
flanks (rate ``beta*alpha*w/(w-x0)``), so the token count shrinks to about
``(1+beta)^2 * alpha^2`` of the original. Depth is never resampled.

Sample positions come from a monotone piecewise-linear warp whose knots sit
at the ROI edges, with the first and last samples pinned to the frame ends.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class RoiBox:
    """Half-open ``[lo, hi)`` voxel ranges on the H and W axes."""

    h: tuple
    w: tuple

    def validate(self, extents):
        for name, (lo, hi), n in zip("hw", (self.h, self.w), extents):
            if not 0 <= lo < hi <= n:
                raise ContractError(f"ROI {name}-range [{lo}, {hi}) invalid for extent {n}")

    @classmethod
    def full(cls, extents):
        return cls((0, int(extents[0])), (0, int(extents[1])))

    def widths(self):
        return self.h[1] - self.h[0], self.w[1] - self.w[0]


@dataclass(frozen=True)
class SamplerConfig:
    alpha: float = 0.5
    beta: float = 0.2
    threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ContractError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0 <= self.beta < 1:
            raise ContractError(f"beta must be in [0, 1), got {self.beta}")
        if (1 + self.beta) * self.alpha > 1 + 1e-12:
            raise ContractError(f"(1+beta)*alpha = {(1 + self.beta) * self.alpha} exceeds 1")

    @property
    def token_fraction(self):
        return (1 + self.beta) ** 2 * self.alpha ** 2


@dataclass(frozen=True)
class AxisPlan:
    coords: np.ndarray
    n_roi: int
    n_left: int
    n_right: int
    extent: int
    roi: tuple

    @property
    def n_out(self):
        return len(self.coords)

    @property
    def roi_rate(self):
        return self.n_roi / (self.roi[1] - self.roi[0])

    @property
    def outside_rate(self):
        outside = self.extent - (self.roi[1] - self.roi[0])
        return (self.n_left + self.n_right) / outside if outside else 0.0

    def forward_matrix(self):
        return T.linear_interp_matrix(self.coords, self.extent)

    def inverse_matrix(self):
        """Maps the resampled axis back onto the original voxel grid."""
        frac = np.interp(np.arange(self.extent, dtype=np.float64), self.coords, np.arange(self.n_out))
        return T.linear_interp_matrix(frac, self.n_out)


@dataclass(frozen=True)
class SamplingPlan:
    axes: tuple
    roi: RoiBox
    cfg: SamplerConfig
    extents: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(a.extent for a in self.axes))

    @property
    def coords(self):
        return tuple(a.coords for a in self.axes)

    @property
    def out_extents(self):
        return tuple(a.n_out for a in self.axes)

    @property
    def token_fraction(self):
        return np.prod(self.out_extents) / np.prod(self.extents)

    def is_identity(self):
        return all(a.n_out == a.extent and np.array_equal(a.coords, np.arange(a.extent)) for a in self.axes)


def _round(x):
    return int(np.floor(x + 0.5))


def roi_from_mask(mask, threshold=0.5):
    """Tight H/W bounding box of ``mask > threshold``; full frame when nothing passes."""
    m = mask.data if isinstance(mask, T.Tensor) else np.asarray(mask)
    if m.ndim == 4:
        if m.shape[0] != 1:
            raise DimensionError(f"mask must be [D,H,W] or [1,D,H,W], got {m.shape}")
        m = m[0]
    if m.ndim != 3:
        raise DimensionError(f"mask must be [D,H,W], got {m.shape}")
    on = m > threshold
    if not on.any():
        return RoiBox.full(m.shape[1:])
    hs = np.flatnonzero(on.any(axis=(0, 2)))
    ws = np.flatnonzero(on.any(axis=(0, 1)))
    return RoiBox((int(hs[0]), int(hs[-1]) + 1), (int(ws[0]), int(ws[-1]) + 1))


def plan_axis(lo, hi, extent, cfg):
    """Sample positions for one governed axis."""
    total = max(1, _round((1 + cfg.beta) * cfg.alpha * extent))
    left, right = lo, extent - hi
    if left + right == 0:
        n_roi, n_left, n_right = total, 0, 0
    else:
        n_roi = min(total, max(1, _round(cfg.alpha * extent)))
        n_out = total - n_roi
        n_left = _round(n_out * left / (left + right))
        n_right = n_out - n_left
    if total == 1:
        coords = np.array([(extent - 1) / 2.0])
    else:
        tk = [0.0]
        xk = [0.0]
        if n_left:
            tk.append(n_left - 0.5)
            xk.append(lo - 0.5)
        if n_right:
            tk.append(n_left + n_roi - 0.5)
            xk.append(hi - 0.5)
        tk.append(total - 1.0)
        xk.append(extent - 1.0)
        coords = np.interp(np.arange(total, dtype=np.float64), tk, xk)
    return AxisPlan(coords, n_roi, n_left, n_right, int(extent), (int(lo), int(hi)))


def build_sampling_plan(roi, extents, cfg=None):
    cfg = SamplerConfig() if cfg is None else cfg
    extents = tuple(int(e) for e in extents)
    roi.validate(extents)
    axes = (plan_axis(*roi.h, extents[0], cfg), plan_axis(*roi.w, extents[1], cfg))
    return SamplingPlan(axes, roi, cfg)


def _check_volume(volume, extents, what):
    if volume.ndim != 4:
        raise DimensionError(f"{what}: volume must be [C,D,H,W], got {volume.shape}")
    if tuple(volume.shape[2:]) != tuple(extents):
        raise DimensionError(f"{what}: volume H,W {volume.shape[2:]} do not match plan {tuple(extents)}")


def resample_forward(volume, plan):
    """Linearly sample ``volume[C, D, H, W]`` at the plan's positions."""
    _check_volume(volume, plan.extents, "resample_forward")
    if plan.is_identity():
        return volume
    mats = {2 + i: a.forward_matrix() for i, a in enumerate(plan.axes)}
    return T.axis_linear_map(volume, mats)


def resample_inverse(volume, plan, original_extents=None):
    """Map a resampled volume back onto the original H, W grid."""
    original_extents = plan.extents if original_extents is None else tuple(original_extents)
    if tuple(original_extents) != plan.extents:
        raise DimensionError(f"original extents {original_extents} do not match plan {plan.extents}")
    _check_volume(volume, plan.out_extents, "resample_inverse")
    if plan.is_identity():
        return volume
    mats = {2 + i: a.inverse_matrix() for i, a in enumerate(plan.axes)}
    return T.axis_linear_map(volume, mats)
