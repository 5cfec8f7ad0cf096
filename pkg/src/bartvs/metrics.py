"""Selection accuracy, prediction error and the nested variance diagnostic."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def p(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(selected: Iterable[int], true_set: Iterable[int], p: int) -> ConfusionCounts:
    sel, true = set(map(int, selected)), set(map(int, true_set))
    for s in (sel, true):
        if s and (min(s) < 0 or max(s) >= p):
            raise ValueError(f"indices must lie in [0, {p})")
    tp = len(sel & true)
    fp = len(sel - true)
    fn = len(true - sel)
    return ConfusionCounts(tp, fp, p - tp - fp - fn, fn)


def precision_recall_f1(c: ConfusionCounts) -> tuple[float, float, float]:
    """Precision, recall and their harmonic mean.

    Empty denominators give 0: nothing selected means precision 0, an empty
    true set means recall 0, and F1 is 0 when precision + recall is 0.
    """
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    denom = precision + recall
    f1 = 2.0 * precision * recall / denom if denom else 0.0
    return precision, recall, f1


def rmse(predictions, actual) -> float:
    a, b = np.asarray(predictions, dtype=float), np.asarray(actual, dtype=float)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("predictions and actual must be non-empty and the same shape")
    return math.sqrt(float(np.mean((a - b) ** 2)))


def rmse_reduction_per_predictor(rmse_null: float, rmse_method: float, num_pred: int) -> float:
    """``(rmse_null - rmse_method) / num_pred``, only defined for num_pred >= 1."""
    if num_pred < 1:
        raise ValueError("undefined metric: no predictors selected")
    return (rmse_null - rmse_method) / num_pred


def nested_variance_decomposition(p_ijk) -> tuple[np.ndarray, np.ndarray, float]:
    """Spread of inclusion proportions within datasets, between datasets and between variables.

    ``p_ijk`` has axes (dataset i, restart j, variable k). Returns standard
    deviations with population divisors: ``s_ik`` over restarts (I x K),
    ``s_k`` of the restart means over datasets (K,), and ``s`` of the
    per-variable grand means over variables.
    """
    p = np.asarray(p_ijk, dtype=float)
    if p.ndim != 3 or min(p.shape) < 1:
        raise ValueError("expected a non-empty I x J x K array")
    # spreads are shift invariant; centring on one entry makes constant input give exact zeros
    p = p - p.flat[0]
    p_ik = p.mean(axis=1)
    s_ik = np.sqrt(((p - p_ik[:, None, :]) ** 2).mean(axis=1))
    p_k = p_ik.mean(axis=0)
    s_k = np.sqrt(((p_ik - p_k) ** 2).mean(axis=0))
    s = math.sqrt(float(((p_k - p_k.mean()) ** 2).mean()))
    return s_ik, s_k, s
