import math

import numpy as np
import pytest

from fasunet import metrics


def test_dsc_and_precision_values():
    pred = np.array([[1, 1, 0], [0, 2, 2]])
    gt = np.array([[1, 0, 0], [0, 2, 1]])
    assert metrics.dsc(pred, gt, 1) == pytest.approx(2 * 1 / (2 + 2))
    assert metrics.precision(pred, gt, 1) == 0.5
    assert metrics.dsc(pred, gt, 2) == pytest.approx(2 / 3)
    assert metrics.precision(pred, gt, 2) == 0.5


def test_empty_conventions():
    z = np.zeros((4, 4), dtype=int)
    one = z.copy()
    one[0, 0] = 1
    assert metrics.dsc(z, z, 1) == 1.0
    assert metrics.precision(z, z, 1) == 1.0
    assert metrics.precision(z, one, 1) == 0.0
    assert metrics.dsc(z, one, 1) == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        metrics.dsc(np.zeros((2, 2)), np.zeros((2, 3)), 1)


def test_boundary_of_square():
    m = np.zeros((6, 6), dtype=int)
    m[1:5, 1:5] = 1
    b = metrics.boundary(m, 1)
    assert b.sum() == 12 and not b[2:4, 2:4].any()
    full = np.ones((3, 3), dtype=int)
    assert metrics.boundary(full, 1).sum() == 8  # image border counts as outside


def test_ssd_identical_and_shifted():
    m = np.zeros((10, 10), dtype=int)
    m[2:6, 2:6] = 1
    assert metrics.ssd(m, m, 1) == 0.0
    shifted = np.roll(m, 1, axis=1)
    d = metrics.ssd(shifted, m, 1)
    assert 0 < d <= 1.0
    assert metrics.ssd(shifted, m, 1, spacing=0.5) == pytest.approx(d * 0.5)


def test_ssd_empty_boundary_raises_and_is_excluded():
    gt = np.zeros((6, 6), dtype=int)
    gt[1:3, 1:3] = 1
    gt[4:6, 4:6] = 2
    pred = gt.copy()
    pred[pred == 2] = 0
    with pytest.raises(metrics.SurfaceDistanceError):
        metrics.ssd(pred, gt, 2)
    rep = metrics.evaluate(pred, gt, 3)
    assert 2 in rep.ssd_errors and rep.a_ssd == rep.ssd[1] == 0.0
    assert rep.a_dsc == pytest.approx(0.5)
    rows = list(rep.rows())
    assert rows[1][0] == 2 and math.isnan(rows[1][3])


def test_evaluate_requires_two_classes():
    with pytest.raises(ValueError):
        metrics.evaluate(np.zeros((2, 2)), np.zeros((2, 2)), 1)
