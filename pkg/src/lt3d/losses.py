"""Dice + cross-entropy training loss with deep supervision.

The Dice term follows the printed form ``1 - sum(p q) / sum(p + q)`` (no
factor two, so a perfect prediction scores 0.5); ``conventional=True`` uses
``1 - 2 sum(p q) / sum(p + q)``. Cross-entropy carries the usual negative
sign so the objective is bounded below by zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError

EPS = 1e-7


@dataclass
class LossReport:
    dice_terms: list
    ce_terms: list
    total: T.Tensor

    @property
    def stage_losses(self):
        return [d + c for d, c in zip(self.dice_terms, self.ce_terms)]

    def values(self):
        """Plain floats: per-stage losses and the total."""
        return [float(s.data) for s in self.stage_losses], float(self.total.data)


def _squeezed(shape):
    return tuple(s for s in shape if s != 1)


def dice_ce_terms(q, p, conventional=False, eps=EPS):
    """Return ``(dice_term, ce_term)`` scalar tensors for probabilities ``q`` and labels ``p``."""
    p_arr = p.data if isinstance(p, T.Tensor) else np.asarray(p)
    if p_arr.shape != q.shape and _squeezed(p_arr.shape) != _squeezed(q.shape):
        raise DimensionError(f"prediction {q.shape} and label {p_arr.shape} differ")
    p = T.Tensor(p_arr.reshape(q.shape), dtype=q.dtype)
    inter = (p * q).sum()
    denom = p.sum() + q.sum()
    num = inter * 2.0 if conventional else inter
    dice = 1.0 - (num + eps) / (denom + eps)
    qc = T.clamp(q, eps, 1.0 - eps)  # keeps the logs finite
    ce = -(p * T.log(qc) + (1.0 - p) * T.log(1.0 - qc)).mean()
    return dice, ce


def dice_ce_loss(q, p, conventional=False, eps=EPS):
    dice, ce = dice_ce_terms(q, p, conventional, eps)
    return dice + ce


def nearest_downsample(label, shape):
    """Nearest-neighbour resampling of a [D,H,W] label to ``shape`` (keeps it binary)."""
    label = np.asarray(label)
    idx = [np.minimum(((np.arange(n) + 0.5) * (s / n)).astype(np.int64), s - 1)
           for n, s in zip(shape, label.shape)]
    return label[np.ix_(*idx)]


def total_deep_supervision_loss(stages, label, conventional=False):
    """Unweighted sum of the per-stage losses.

    ``stages`` is a :class:`~lt3d.segnet.StagePredictions` (all stage masks
    plus the final probability) or a plain list of probability tensors.
    """
    probs = stages.all_probs() if hasattr(stages, "all_probs") else list(stages)
    label = label.data if isinstance(label, T.Tensor) else np.asarray(label)
    if label.ndim == 4:
        label = label[0]
    dice_terms, ce_terms = [], []
    total = None
    for q in probs:
        target = nearest_downsample(label, q.shape[1:]) if q.shape[1:] != label.shape else label
        d, c = dice_ce_terms(q, target.reshape(q.shape), conventional)
        dice_terms.append(d)
        ce_terms.append(c)
        total = d + c if total is None else total + d + c
    return LossReport(dice_terms, ce_terms, total)
