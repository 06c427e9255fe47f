"""Evaluation metrics: transfer gap, regret ratio and forgetting measure."""
from __future__ import annotations

import numpy as np


def metric_gap(regret_transfer: float, regret_specific: float) -> float:
    """Relative excess regret (percent) of a transferred model over a task-specific one."""
    if not regret_specific > 0:
        raise ZeroDivisionError("metric_gap needs a positive task-specific regret")
    return (regret_transfer - regret_specific) / regret_specific * 100.0


def metric_rr(cum_regret: float, cum_cost: float) -> float:
    """Cumulative regret as a percentage of the cumulative perfect-foresight cost."""
    base = cum_cost - cum_regret
    if not base > 0:
        raise ZeroDivisionError("metric_rr needs cum_cost > cum_regret")
    return cum_regret / base * 100.0


def metric_fm(history) -> float:
    """Forgetting measure after the last checkpoint.

    ``history[i][j]`` is the regret on task ``j`` of the model obtained after
    training task ``i`` (entries with ``j > i`` are ignored).  For ``k``
    checkpoints the result averages, over the earlier tasks, the current regret
    minus the best regret seen on that task since it was learned.
    """
    k = len(history)
    if k < 2:
        raise ValueError("metric_fm needs at least two checkpoints")
    R = [np.asarray(row, dtype=np.float64) for row in history]
    if any(R[i].size < i + 1 for i in range(k)):
        raise ValueError("checkpoint i must report regret on tasks 0..i")
    total = 0.0
    for j in range(k - 1):
        best = min(R[i][j] for i in range(j, k - 1))
        total += R[k - 1][j] - best
    return total / (k - 1)


def fm_trajectory(history) -> list[float]:
    """FM after each checkpoint (0 for the first)."""
    return [0.0] + [metric_fm(history[:k]) for k in range(2, len(history) + 1)]
