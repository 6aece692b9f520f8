import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from lt3d.errors import DimensionError, UndefinedMetricError
from lt3d.metrics import (
    confusion_counts,
    confusion_metrics,
    evaluate_case,
    mean_surface_distance,
    surface_voxels,
)


def brute_surface(mask):
    pts = []
    d, h, w = mask.shape
    for z in range(d):
        for y in range(h):
            for x in range(w):
                if not mask[z, y, x]:
                    continue
                for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    zz, yy, xx = z + dz, y + dy, x + dx
                    if not (0 <= zz < d and 0 <= yy < h and 0 <= xx < w) or not mask[zz, yy, xx]:
                        pts.append((z, y, x))
                        break
    return pts


def brute_msd(a, b, spacing):
    sa = np.array(brute_surface(a), dtype=float) * spacing
    sb = np.array(brute_surface(b), dtype=float) * spacing

    def directed(src, dst):
        return np.mean([min(np.linalg.norm(s - t) for t in dst) for s in src])
    return (directed(sa, sb) + directed(sb, sa)) / 2


class TestConfusion:
    def test_identical(self):
        m = np.zeros((3, 4, 4), bool)
        m[1, 1:3, 1:3] = True
        r = confusion_metrics(m, m)
        assert (r.dice, r.precision, r.recall) == (1.0, 1.0, 1.0)

    def test_disjoint(self):
        a = np.zeros((2, 4, 4), bool)
        b = a.copy()
        a[0, 0, 0] = b[1, 3, 3] = True
        r = confusion_metrics(a, b)
        assert (r.dice, r.precision, r.recall) == (0.0, 0.0, 0.0)

    def test_superset(self):
        lab = np.zeros((1, 4, 8), bool)
        lab[0, :, :4] = True
        pred = np.ones_like(lab)
        r = confusion_metrics(pred, lab)
        assert r.recall == 1.0 and r.precision == 0.5
        assert r.dice == pytest.approx(2 / 3)

    def test_both_empty(self):
        z = np.zeros((2, 2, 2))
        r = confusion_metrics(z, z)
        assert (r.dice, r.precision, r.recall) == (1.0, 1.0, 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            confusion_metrics(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.bool_, (3, 4, 5)), arrays(np.bool_, (3, 4, 5)))
    def test_dice_identity(self, a, b):
        tp, fp, fn, tn = confusion_counts(a, b)
        assert tp + fp + fn + tn == a.size
        r = confusion_metrics(a, b)
        if tp + fp + fn:
            assert r.dice == pytest.approx(2 * tp / (2 * tp + fp + fn))
        assert 0 <= r.dice <= 1

    def test_serialization(self):
        r = evaluate_case(np.ones((2, 3, 3)), np.ones((2, 3, 3)), (1.0, 1.0, 1.0))
        text = r.to_text()
        assert "dice=1.0" in text and "msd_mm=0.0" in text
        assert json.loads(r.to_json())["tp"] == 18


class TestSurfaceDistance:
    def test_identical_zero(self):
        m = np.zeros((4, 6, 6), bool)
        m[1:3, 2:5, 1:4] = True
        assert mean_surface_distance(m, m, (2.0, 0.7, 0.7)) == 0.0

    def test_single_voxels_along_width(self):
        a = np.zeros((3, 3, 8), bool)
        b = a.copy()
        a[1, 1, 2] = True
        b[1, 1, 5] = True
        assert mean_surface_distance(a, b, (1.0, 1.0, 2.0)) == pytest.approx(6.0)

    def test_empty_raises(self):
        m = np.zeros((2, 3, 3), bool)
        m[0, 0, 0] = True
        with pytest.raises(UndefinedMetricError):
            mean_surface_distance(m, np.zeros_like(m))

    def test_border_counts_as_background(self):
        full = np.ones((3, 3, 3), bool)
        s = surface_voxels(full)
        assert s.sum() == 26 and not s[1, 1, 1]

    @pytest.mark.parametrize("seed", range(5))
    def test_random_blobs_match_all_pairs(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(size=(4, 7, 8)) > 0.6
        b = rng.uniform(size=(4, 7, 8)) > 0.7
        sp = np.array([2.5, 0.8, 0.9])
        np.testing.assert_array_equal(np.argwhere(surface_voxels(a)), np.array(brute_surface(a)))
        assert mean_surface_distance(a, b, tuple(sp)) == pytest.approx(brute_msd(a, b, sp), abs=1e-9)

    @pytest.mark.parametrize("seed", range(3))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(10 + seed)
        a = rng.uniform(size=(3, 9, 9)) > 0.5
        b = rng.uniform(size=(3, 9, 9)) > 0.8
        assert mean_surface_distance(a, b, (1.5, 1.0, 1.0)) == mean_surface_distance(b, a, (1.5, 1.0, 1.0))
