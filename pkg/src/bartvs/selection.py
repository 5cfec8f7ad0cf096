"""Permutation nulls and the variable selection rules built on them.

The three thresholding strategies all use one quantile convention
(`empirical_quantile`) and select variable k iff its inclusion proportion is
strictly above its threshold:

* LOCAL: per-variable ``1 - alpha`` quantile of the null column.
* GLOBAL_MAX: ``1 - alpha`` quantile of the per-permutation maximum.
* GLOBAL_SE: ``m_k + C* s_k`` with the smallest ``C* >= 0`` giving
  simultaneous coverage above ``1 - alpha`` across all columns.

`select_cv_best` picks among strategies (and prior influence values) by
cross-validated prediction error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .inclusion import NoSplitsError, chain_proportions, restart_seeds
from .model import Dataset, Hyperparams
from .sampler import prepare, run_chain
from .split_prior import C_GRID, PriorSpec, compute_weights, uniform_weights
from .tasks import FOLD, PERMUTE, REFIT, derive_rng, derive_seed, run_tasks

LOCAL, GLOBAL_MAX, GLOBAL_SE, CV_BEST = "local", "global-max", "global-se", "cv"
STRATEGIES = (LOCAL, GLOBAL_MAX, GLOBAL_SE)
# Tie-break order for cross-validation: more stringent strategies first.
CV_ORDER = (GLOBAL_MAX, GLOBAL_SE, LOCAL)
DEFAULT_P = 100
DEFAULT_ALPHA = 0.05
_TOL = 1e-9


@dataclass(frozen=True)
class NullProportionMatrix:
    """Inclusion proportions from permuted-response runs, one row per permutation.

    Permutations whose chains never split are dropped and counted in ``n_flagged``.
    """

    rows: np.ndarray
    n_flagged: int = 0
    seeds: tuple = ()

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ValueError("null matrix needs at least one row and one column")
        if not np.isfinite(rows).all() or (rows < 0).any():
            raise ValueError("null proportions must be finite and nonnegative")
        if np.abs(rows.sum(axis=1) - 1.0).max() > 1e-10:
            raise ValueError("each null row must sum to 1")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def P(self) -> int:
        return self.rows.shape[0]

    @property
    def K(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class SelectionResult:
    strategy: str
    thresholds: np.ndarray
    selected: tuple
    proportions: np.ndarray
    alpha: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.proportions, dtype=float)
        thr = np.broadcast_to(np.asarray(self.thresholds, dtype=float), p.shape).copy()
        object.__setattr__(self, "proportions", p)
        object.__setattr__(self, "thresholds", thr)
        object.__setattr__(self, "selected", tuple(sorted(int(k) for k in self.selected)))
        if self.selected != tuple(np.flatnonzero(p > thr).tolist()):
            raise ValueError("selected set must equal {k : p_k > threshold_k}")

    def to_dict(self, names: Sequence[str] | None = None) -> dict:
        names = list(names) if names is not None else [f"x{k + 1}" for k in range(len(self.proportions))]
        return {
            "strategy": self.strategy,
            "alpha": self.alpha,
            "thresholds": [float(t) for t in self.thresholds],
            "selected": [names[k] for k in self.selected],
            "selected_index": list(self.selected),
            "metadata": self.metadata,
        }


# ------------------------------------------------------------- thresholds


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")


def empirical_quantile(values, level: float) -> float:
    """Smallest order statistic whose empirical CDF is at least ``level``."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("empty sample")
    j = max(1, math.ceil(level * v.size - _TOL))
    return float(v[min(j, v.size) - 1])


def _result(strategy, thresholds, p, alpha, null, **meta) -> SelectionResult:
    p = np.asarray(p, dtype=float)
    thr = np.broadcast_to(np.asarray(thresholds, dtype=float), p.shape)
    meta = {"P": null.P, "n_flagged": null.n_flagged, **meta}
    return SelectionResult(strategy, thr, np.flatnonzero(p > thr), p, alpha, meta)


def _check_inputs(p, null: NullProportionMatrix, alpha: float) -> np.ndarray:
    _check_alpha(alpha)
    p = np.asarray(p, dtype=float).ravel()
    if p.shape[0] != null.K:
        raise ValueError(f"expected {null.K} proportions, got {p.shape[0]}")
    return p


def local_thresholds(null: NullProportionMatrix, alpha: float) -> np.ndarray:
    return np.array([empirical_quantile(col, 1.0 - alpha) for col in null.rows.T])


def threshold_local(p, null: NullProportionMatrix, alpha: float) -> SelectionResult:
    p = _check_inputs(p, null, alpha)
    return _result(LOCAL, local_thresholds(null, alpha), p, alpha, null)


def threshold_global_max(p, null: NullProportionMatrix, alpha: float) -> SelectionResult:
    p = _check_inputs(p, null, alpha)
    g = empirical_quantile(null.rows.max(axis=1), 1.0 - alpha)
    return _result(GLOBAL_MAX, g, p, alpha, null, global_max=g)


def coverage_count(P: int, alpha: float) -> int:
    """Smallest count j with j / P > 1 - alpha."""
    return min(P, math.floor((1.0 - alpha) * P + _TOL) + 1)


def se_parameters(null: NullProportionMatrix):
    """Column means and sample standard deviations (divisor P - 1).

    Constant columns get their common value as mean and exactly zero spread.
    """
    if null.P < 2:
        raise ValueError("global SE threshold needs at least 2 permutations")
    rows = null.rows
    const = (rows == rows[0]).all(axis=0)
    m = np.where(const, rows[0], rows.mean(axis=0))
    s = np.where(const, 0.0, rows.std(axis=0, ddof=1))
    return m, s


def global_se_multiplier(null: NullProportionMatrix, alpha: float) -> float:
    """Exact C*: the smallest C >= 0 with every column's coverage above 1 - alpha.

    Coverage of column k at C is the share of its entries at most
    ``m_k + C s_k``. It only changes at the standardized entries
    ``(v - m_k) / s_k``, so C* is the largest of the per-column j-th order
    statistics of those values (j = `coverage_count`), floored at zero.
    Zero-spread columns are fully covered at every C >= 0.
    """
    _check_alpha(alpha)
    m, s = se_parameters(null)
    j = coverage_count(null.P, alpha)
    c_star = 0.0
    for k in np.flatnonzero(s > 0):
        z = np.sort((null.rows[:, k] - m[k]) / s[k])
        c_star = max(c_star, float(z[j - 1]))
    return c_star


def simultaneous_coverage(null: NullProportionMatrix, C: float) -> np.ndarray:
    """Per-column share of null entries at most ``m_k + C s_k``."""
    m, s = se_parameters(null)
    return (null.rows <= m + C * s).mean(axis=0)


def threshold_global_se(p, null: NullProportionMatrix, alpha: float) -> SelectionResult:
    p = _check_inputs(p, null, alpha)
    m, s = se_parameters(null)
    c_star = global_se_multiplier(null, alpha)
    # m_k + C* s_k already dominates the local quantile; the max only absorbs
    # rounding in (v - m) / s * s + m so nesting holds bit for bit.
    thr = np.maximum(m + c_star * s, local_thresholds(null, alpha))
    return _result(GLOBAL_SE, thr, p, alpha, null, c_star=c_star)


THRESHOLDS: dict[str, Callable] = {
    LOCAL: threshold_local, GLOBAL_MAX: threshold_global_max, GLOBAL_SE: threshold_global_se,
}


def select(p, null: NullProportionMatrix, alpha: float, strategy: str) -> SelectionResult:
    try:
        rule = THRESHOLDS[strategy]
    except KeyError:
        raise ValueError(f"unknown strategy {strategy!r}") from None
    return rule(p, null, alpha)


# ------------------------------------------------------- permutation null


def _call(fn, *args):
    return fn(*args)


def _run_calls(calls, workers: int) -> list:
    return run_tasks(_call, calls, workers)


def permuted(dataset: Dataset, master_seed: int, index: int) -> Dataset:
    """Dataset with its response permuted by the index-th permutation stream."""
    order = derive_rng(master_seed, PERMUTE, index, 0).permutation(dataset.n)
    return dataset.with_response(dataset.response[order])


def null_row(dataset: Dataset, hyperparams: Hyperparams, master_seed: int, index: int):
    """Restart-averaged proportions for one permuted response; None if nothing splits."""
    data = permuted(dataset, master_seed, index)
    w = uniform_weights(dataset.K)
    rows = []
    for seed in restart_seeds(derive_seed(master_seed, PERMUTE, index, 1), hyperparams.n_restarts):
        try:
            rows.append(chain_proportions(data, hyperparams, w, seed))
        except NoSplitsError:
            pass
    return np.mean(rows, axis=0) if rows else None


def _null_calls(dataset, hyperparams, P, master_seed):
    if P < 1:
        raise ValueError("need at least one permutation")
    return [(null_row, dataset, hyperparams, master_seed, i) for i in range(P)]


def _assemble_null(rows) -> NullProportionMatrix:
    kept = [r for r in rows if r is not None]
    if not kept:
        raise NoSplitsError("no splits in any permutation run")
    return NullProportionMatrix(np.array(kept), n_flagged=len(rows) - len(kept))


def permutation_null(dataset: Dataset, hyperparams: Hyperparams, P: int, master_seed: int,
                     workers: int = 1) -> NullProportionMatrix:
    """Inclusion proportions of P permuted-response fits with uniform split weights.

    Each permutation averages ``hyperparams.n_restarts`` chains; callers
    usually pass ``hyperparams.replace(n_restarts=1)``.
    """
    prepare(dataset, hyperparams)
    return _assemble_null(_run_calls(_null_calls(dataset, hyperparams, P, master_seed), workers))


# ---------------------------------------------------------- full pipeline


@dataclass
class SelectionRun:
    """Observed proportions, the null they were compared with, and per-strategy results."""

    proportions: np.ndarray
    restart_proportions: np.ndarray
    null: NullProportionMatrix
    results: dict


def _real_calls(dataset, hyperparams, weights, master_seed):
    return [(chain_proportions, dataset, hyperparams, weights, s)
            for s in restart_seeds(master_seed, hyperparams.n_restarts)]


def _finish_run(real_rows, null, alpha, strategies, meta) -> SelectionRun:
    real = np.array(real_rows)
    p = real.mean(axis=0)
    results = {}
    for s in strategies:
        r = select(p, null, alpha, s)
        results[s] = SelectionResult(r.strategy, r.thresholds, r.selected, r.proportions, alpha,
                                     {**r.metadata, **meta})
    return SelectionRun(p, real, null, results)


def run_selection(dataset: Dataset, hyperparams: Hyperparams, weights, alpha: float = DEFAULT_ALPHA,
                  P: int = DEFAULT_P, master_seed: int = 0, strategies=STRATEGIES,
                  perm_restarts: int = 1, workers: int = 1,
                  null: NullProportionMatrix | None = None) -> SelectionRun:
    """Fit the observed data, build the permutation null and apply each strategy.

    The observed data are fit with ``weights`` and ``hyperparams.n_restarts``
    restarts; permutation runs use uniform weights and ``perm_restarts``.
    """
    _check_alpha(alpha)
    prepare(dataset, hyperparams)
    hp_null = hyperparams.replace(n_restarts=perm_restarts)
    calls = _real_calls(dataset, hyperparams, weights, master_seed)
    if null is None:
        calls += _null_calls(dataset, hp_null, P, master_seed)
    out = _run_calls(calls, workers)
    nr = hyperparams.n_restarts
    if null is None:
        null = _assemble_null(out[nr:])
    meta = {"master_seed": int(master_seed), "restarts": nr, "perm_restarts": perm_restarts}
    return _finish_run(out[:nr], null, alpha, strategies, meta)


# -------------------------------------------------------- cross-validation


def fold_assignment(n: int, folds: int, master_seed: int) -> np.ndarray:
    """Balanced random fold labels in ``range(folds)``."""
    if not 2 <= folds <= n:
        raise ValueError("need 2 <= folds <= n")
    order = derive_rng(master_seed, FOLD).permutation(n)
    labels = np.empty(n, dtype=np.int64)
    labels[order] = np.arange(n) % folds
    return labels


def refit_sse(train: Dataset, test: Dataset, selected: tuple, hyperparams: Hyperparams,
              seed: int) -> float:
    """Held-out squared error of a single-chain fit on the selected columns.

    An empty selection predicts the training mean.
    """
    if not selected:
        pred = np.full(test.n, train.response.mean())
    else:
        sub = train.subset_columns(list(selected))
        samples = run_chain(sub, hyperparams, np.ones(len(selected)), seed)
        pred = samples.mean_prediction(test.predictors[:, list(selected)])
    return float(np.sum((pred - test.response) ** 2))


def _weights_for(prior_spec: PriorSpec | None, c: float, K: int) -> np.ndarray:
    if prior_spec is None:
        return uniform_weights(K)
    return compute_weights(prior_spec.with_c(c))


def select_cv_best(dataset: Dataset, hyperparams: Hyperparams, prior_spec: PriorSpec | None = None,
                   c_grid: Sequence[float] | None = None, folds: int = 5,
                   alpha: float = DEFAULT_ALPHA, P: int = DEFAULT_P, master_seed: int = 0,
                   strategies=STRATEGIES, perm_restarts: int = 1, workers: int = 1,
                   null_cache: dict | None = None) -> tuple[SelectionResult, SelectionRun]:
    """Choose the (strategy, c) pair with the smallest cross-validated squared error.

    Within each fold the whole procedure (observed fit, permutation null,
    thresholds) is rerun on the training rows; the selected columns are
    refit with one chain and uniform weights and scored on the held-out rows.
    The winner is then rerun on the full data with the seeds a direct
    `run_selection` call would use. When only one pair competes the
    cross-validation is skipped.

    ``null_cache`` lets calls that share dataset, hyperparameters, P and seed
    (e.g. different priors) reuse permutation nulls, which never depend on
    the prior.
    """
    _check_alpha(alpha)
    prepare(dataset, hyperparams)
    if c_grid is None:
        c_grid = (0.0,) if prior_spec is None else C_GRID
    c_grid = tuple(float(c) for c in c_grid)
    if not c_grid:
        raise ValueError("c_grid must be non-empty")
    if prior_spec is None and any(c != 0 for c in c_grid):
        raise ValueError("nonzero c values need a prior")
    if prior_spec is not None and prior_spec.K != dataset.K:
        raise ValueError("prior does not match the number of predictors")
    strategies = tuple(s for s in CV_ORDER if s in strategies)
    if not strategies:
        raise ValueError("no strategies to compare")
    cache = {} if null_cache is None else null_cache
    hp_null = hyperparams.replace(n_restarts=perm_restarts)
    K, nr = dataset.K, hyperparams.n_restarts
    pairs = [(s, c) for c in c_grid for s in strategies]

    errors = None
    if len(pairs) > 1:
        labels = fold_assignment(dataset.n, folds, master_seed)
        splits = []
        calls, slots = [], []
        for f in range(folds):
            train = dataset.subset_rows(labels != f)
            test = dataset.subset_rows(labels == f)
            fseed = derive_seed(master_seed, FOLD, f)
            splits.append((train, test, fseed))
            for c in c_grid:
                calls += _real_calls(train, hyperparams, _weights_for(prior_spec, c, K), fseed)
                slots += [("real", f, c)] * nr
            if ("fold", f, P, perm_restarts) not in cache:
                calls += _null_calls(train, hp_null, P, fseed)
                slots += [("null", f, None)] * P
        if ("full", P, perm_restarts) not in cache:
            calls += _null_calls(dataset, hp_null, P, master_seed)
            slots += [("null", -1, None)] * P
        grouped: dict = {}
        for slot, res in zip(slots, _run_calls(calls, workers)):
            grouped.setdefault(slot, []).append(res)
        for (kind, f, _), rows in grouped.items():
            if kind == "null":
                key = ("full", P, perm_restarts) if f < 0 else ("fold", f, P, perm_restarts)
                cache[key] = _assemble_null(rows)

        chosen: dict = {}
        for f, (train, test, fseed) in enumerate(splits):
            null = cache[("fold", f, P, perm_restarts)]
            for c in c_grid:
                run = _finish_run(grouped[("real", f, c)], null, alpha, strategies, {})
                for s in strategies:
                    chosen[(f, s, c)] = run.results[s].selected
        refits = sorted({(f, sel) for (f, _, _), sel in chosen.items()})
        sse = _run_calls([(refit_sse, splits[f][0], splits[f][1], sel, hyperparams,
                           derive_seed(splits[f][2], REFIT)) for f, sel in refits], workers)
        sse = dict(zip(refits, sse))
        errors = {(s, c): sum(sse[(f, chosen[(f, s, c)])] for f in range(folds)) for s, c in pairs}
        winner = min(pairs, key=lambda sc: (errors[sc], pairs.index(sc)))
    else:
        winner = pairs[0]

    strategy, c = winner
    run = run_selection(dataset, hyperparams, _weights_for(prior_spec, c, K), alpha, P,
                        master_seed, strategies, perm_restarts, workers,
                        null=cache.get(("full", P, perm_restarts)))
    cache[("full", P, perm_restarts)] = run.null
    best = run.results[strategy]
    meta = {**best.metadata, "cv_strategy": strategy, "cv_c": c, "folds": folds,
            "c_grid": list(c_grid), "strategies": list(strategies),
            "cv_errors": None if errors is None else
            [{"strategy": s, "c": cc, "sse": errors[(s, cc)]} for s, cc in pairs]}
    result = SelectionResult(CV_BEST, best.thresholds, best.selected, best.proportions, alpha, meta)
    return result, run
