"""Multi-target and localization error metrics plus run aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class OspaParams:
    cutoff: float = 20.0
    order: float = 1.0

    def __post_init__(self):
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")
        if self.order < 1:
            raise ValueError("order must be >= 1")


def ospa_components(truth_xy, est_xy, params: OspaParams):
    """(total, localization, cardinality) parts of the set metric.

    With m = |X| <= n = |Y|:
    total = [ (1/n)(min over assignments sum min(d, c)^p + c^p (n - m)) ]^(1/p);
    symmetric in its arguments, empty vs empty is 0. The localization and
    cardinality parts sum to the total for p = 1.
    """
    X = np.asarray(truth_xy, dtype=float).reshape(-1, 2)
    Y = np.asarray(est_xy, dtype=float).reshape(-1, 2)
    if X.shape[0] > Y.shape[0]:
        X, Y = Y, X
    m, n = X.shape[0], Y.shape[0]
    c, p = params.cutoff, params.order
    if n == 0:
        return 0.0, 0.0, 0.0
    if m == 0:
        return c, 0.0, c
    d = np.linalg.norm(X[:, None, :] - Y[None, :, :], axis=-1)
    cost = np.minimum(d, c) ** p
    rows, cols = linear_sum_assignment(cost)
    loc_sum = float(cost[rows, cols].sum())
    card_sum = c**p * (n - m)
    total = ((loc_sum + card_sum) / n) ** (1.0 / p)
    loc_part = (loc_sum / n) ** (1.0 / p) if p == 1 else loc_sum
    card_part = (card_sum / n) ** (1.0 / p) if p == 1 else card_sum
    return total, loc_part, card_part


def ospa(truth_xy, est_xy, params: OspaParams) -> float:
    return ospa_components(truth_xy, est_xy, params)[0]


def agent_rmse(truth_states, est_positions, mobile_mask=None) -> float:
    """Root mean squared position error over the selected agents at one step."""
    truth = np.asarray(truth_states, dtype=float)[:, :2]
    est = np.asarray(est_positions, dtype=float)[:, :2]
    if mobile_mask is not None:
        mask = np.asarray(mobile_mask, dtype=bool)
        truth, est = truth[mask], est[mask]
    if truth.shape[0] == 0:
        return 0.0
    sq = np.sum((truth - est) ** 2, axis=1)
    return float(np.sqrt(np.mean(sq)))


def cardinality_stats(counts):
    """(mean, std) per step of confirmed-target counts across runs.

    counts: (runs, steps). Sample standard deviation (ddof=1); zero for a
    single run."""
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    mean = counts.mean(axis=0)
    std = counts.std(axis=0, ddof=1) if counts.shape[0] > 1 else np.zeros(counts.shape[1])
    return mean, std


def aggregate_runs(per_run_rmse, per_run_ospa, per_run_cards):
    """Per-step means across runs plus time-averaged summary scalars."""
    rmse = np.atleast_2d(np.asarray(per_run_rmse, dtype=float))
    osp = np.atleast_2d(np.asarray(per_run_ospa, dtype=float))
    card_mean, card_std = cardinality_stats(per_run_cards)
    return {
        "rmse_per_step": rmse.mean(axis=0),
        "ospa_per_step": osp.mean(axis=0),
        "card_mean": card_mean,
        "card_std": card_std,
        "rmse_time_avg": float(rmse.mean()),
        "ospa_time_avg": float(osp.mean()),
    }
