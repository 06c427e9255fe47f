from __future__ import annotations

import numpy as np
import pytest

from portdfcl.metrics import fm_trajectory, metric_fm, metric_gap, metric_rr


def test_gap():
    assert metric_gap(7.0, 7.0) == 0.0
    assert metric_gap(105.0, 100.0) == pytest.approx(5.0)
    with pytest.raises(ZeroDivisionError):
        metric_gap(1.0, 0.0)


def test_rr_reference_values():
    assert f"{metric_rr(3106.71, 71252.49):.2f}" == "4.56"
    assert f"{metric_rr(3305.85, 71451.64):.2f}" == "4.85"
    assert metric_rr(0.0, 10.0) == 0.0
    with pytest.raises(ZeroDivisionError):
        metric_rr(5.0, 5.0)


def test_fm_examples():
    assert metric_fm([[5.0], [5.0, 3.0], [5.0, 3.0, 2.0]]) == 0.0
    assert metric_fm([[100.0], [110.0, 40.0]]) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        metric_fm([[1.0]])
    with pytest.raises(ValueError):
        metric_fm([[1.0], [1.0]])


def test_fm_three_checkpoints_by_hand():
    h = [[10.0], [12.0, 20.0], [15.0, 18.0, 7.0]]
    # task 0: 15 - min(10, 12) = 5; task 1: 18 - min(20) = -2
    assert metric_fm(h) == pytest.approx(1.5)
    h = [[10.0], [8.0, 20.0], [9.0, 25.0, 7.0], [11.0, 21.0, 9.0, 1.0]]
    # 11 - 8, 21 - 20, 9 - 7
    assert metric_fm(h) == pytest.approx(2.0)
    assert fm_trajectory(h) == pytest.approx([0.0, -2.0, 3.0, 2.0])


def test_fm_ignores_future_entries():
    rng = np.random.default_rng(0)
    for _ in range(50):
        k = int(rng.integers(2, 7))
        h = [list(rng.uniform(0, 10, i + 1)) for i in range(k)]
        padded = [row + list(rng.uniform(0, 10, k - len(row))) for row in h]
        assert metric_fm(h) == pytest.approx(metric_fm(padded))
