"""Replication harness: simulation grids and the restart-variance diagnostic.

Everything here is deterministic given the master seed; worker count only
changes wall time.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import ScenarioSpec, gen_null
from .inclusion import chain_proportions, restart_seeds
from .metrics import confusion, nested_variance_decomposition, precision_recall_f1
from .model import Hyperparams
from .selection import (
    CV_BEST, DEFAULT_ALPHA, DEFAULT_P, STRATEGIES, run_selection, select_cv_best,
)
from .split_prior import PriorSpec, compute_weights, uniform_weights
from .tasks import DATASET, REPLICATE, derive_rng, derive_seed, run_tasks

PRIOR_NONE, PRIOR_CORRECT, PRIOR_INCORRECT = "none", "correct", "incorrect"
PRIOR_KINDS = (PRIOR_NONE, PRIOR_CORRECT, PRIOR_INCORRECT)
METRIC_FIELDS = ("precision", "recall", "f1")


@dataclass(frozen=True)
class SimulationSettings:
    """How each simulated dataset is analysed.

    ``priors`` lists the doubled-weight priors to compare: none (uniform),
    correct (weight 2 on the true set) or incorrect (weight 2 on a random
    set of ``p0`` spurious variables). Each informed prior is the split
    prior ``1 + c * indicator`` with ``c = prior_c``.
    """

    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    strategies: tuple = STRATEGIES
    alpha: float = DEFAULT_ALPHA
    P: int = DEFAULT_P
    folds: int = 5
    perm_restarts: int = 1
    priors: tuple = (PRIOR_NONE,)
    prior_c: float = 1.0

    def __post_init__(self):
        bad = [s for s in self.strategies if s not in STRATEGIES + (CV_BEST,)]
        if bad or not self.strategies:
            raise ValueError(f"unknown strategies {bad}")
        bad = [p for p in self.priors if p not in PRIOR_KINDS]
        if bad or not self.priors:
            raise ValueError(f"unknown priors {bad}")

    def to_dict(self) -> dict:
        return {"hyperparams": self.hyperparams.to_dict(), "strategies": list(self.strategies),
                "alpha": self.alpha, "P": self.P, "folds": self.folds,
                "perm_restarts": self.perm_restarts, "priors": list(self.priors),
                "prior_c": self.prior_c}


def prior_indicator(kind: str, true_set, p: int, rng: np.random.Generator) -> np.ndarray | None:
    """0/1 vector marking the variables an informed prior favours (None for uniform)."""
    if kind == PRIOR_NONE:
        return None
    true = sorted(true_set)
    ind = np.zeros(p)
    if kind == PRIOR_CORRECT:
        ind[true] = 1.0
    else:
        spurious = np.setdiff1d(np.arange(p), true)
        size = min(len(true), len(spurious))
        ind[rng.choice(spurious, size=size, replace=False)] = 1.0
    return ind


def simulate_replicate(spec: ScenarioSpec, settings: SimulationSettings, master_seed: int,
                       cell: int = 0, replicate: int = 0, workers: int = 1) -> list[dict]:
    """Generate one dataset and score every (prior, strategy) combination on it.

    All priors share the permutation nulls (they never depend on the prior).
    """
    spec = replace(spec, seed=derive_seed(master_seed, REPLICATE, cell, replicate, 0))
    dataset, true_set = spec.generate()
    sel_seed = derive_seed(master_seed, REPLICATE, cell, replicate, 1)
    prior_rng = derive_rng(master_seed, REPLICATE, cell, replicate, 2)
    hp = settings.hyperparams
    fixed = [s for s in settings.strategies if s != CV_BEST]
    cache: dict = {}
    full_key = ("full", settings.P, settings.perm_restarts)
    rows = []
    indicators = {kind: prior_indicator(kind, true_set, spec.p, prior_rng) for kind in settings.priors}
    for kind in settings.priors:
        ind = indicators[kind]
        spec_prior = None if ind is None else PriorSpec(ind, settings.prior_c)
        weights = uniform_weights(spec.p) if ind is None else compute_weights(spec_prior)
        results = {}
        if fixed:
            run = run_selection(dataset, hp, weights, settings.alpha, settings.P, sel_seed, fixed,
                                settings.perm_restarts, workers, null=cache.get(full_key))
            cache[full_key] = run.null
            results.update(run.results)
        if CV_BEST in settings.strategies:
            c_grid = None if ind is None else (settings.prior_c,)
            results[CV_BEST], _ = select_cv_best(
                dataset, hp, spec_prior, c_grid, settings.folds, settings.alpha, settings.P,
                sel_seed, STRATEGIES, settings.perm_restarts, workers, null_cache=cache)
        for strategy in settings.strategies:
            res = results[strategy]
            cc = confusion(res.selected, true_set, spec.p)
            precision, recall, f1 = precision_recall_f1(cc)
            rows.append({
                "cell": cell, "replicate": replicate, "kind": spec.kind, "n": spec.n, "p": spec.p,
                "p0": spec.p0, "sigma_sq": spec.sigma_sq, "data_seed": spec.seed,
                "prior": kind, "strategy": strategy,
                "chosen": res.metadata.get("cv_strategy", strategy),
                "tp": cc.tp, "fp": cc.fp, "tn": cc.tn, "fn": cc.fn,
                "precision": precision, "recall": recall, "f1": f1,
                "n_selected": len(res.selected), "selected": list(res.selected),
            })
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Per (cell, prior, strategy): mean and standard error of each metric."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["cell"], r["prior"], r["strategy"]), []).append(r)
    out = []
    for (cell, prior, strategy), grp in groups.items():
        first = grp[0]
        row = {"cell": cell, "kind": first["kind"], "n": first["n"], "p": first["p"],
               "p0": first["p0"], "sigma_sq": first["sigma_sq"], "prior": prior,
               "strategy": strategy, "replicates": len(grp)}
        for name in METRIC_FIELDS + ("n_selected",):
            v = np.array([g[name] for g in grp], dtype=float)
            row[f"{name}_mean"] = float(v.mean())
            row[f"{name}_se"] = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else None
        out.append(row)
    return out


def scenario_grid(kind: str, n: int, ps, p0s, sigma_sqs) -> list[ScenarioSpec]:
    """Cartesian product of the requested settings, in row-major order."""
    return [ScenarioSpec(kind, n, p, p0, s2) for p, p0, s2 in itertools.product(ps, p0s, sigma_sqs)]


def run_simulation(cells: list[ScenarioSpec], replicates: int, settings: SimulationSettings,
                   master_seed: int, workers: int = 1, progress=None) -> tuple[list[dict], list[dict]]:
    """Per-replicate metric rows and per-cell summaries for a scenario grid."""
    if replicates < 1:
        raise ValueError("need at least one replicate")
    rows = []
    for c, spec in enumerate(cells):
        for r in range(replicates):
            rows += simulate_replicate(spec, settings, master_seed, c, r, workers)
            if progress is not None:
                progress(c, r)
    return rows, summarize(rows)


def run_diagnostic(I: int, J: int, n: int, K: int, hyperparams: Hyperparams, master_seed: int,
                   workers: int = 1) -> dict:
    """Inclusion proportions of J restarts on each of I null datasets plus their decomposition.

    The finding to look for is between-dataset spread ``s_k`` exceeding the
    within-dataset restart spread ``s_ik``.
    """
    if min(I, J) < 1:
        raise ValueError("need I >= 1 and J >= 1")
    datasets = [gen_null(n, K, derive_seed(master_seed, DATASET, i, 0)) for i in range(I)]
    w = uniform_weights(K)
    calls = [(ds, hyperparams, w, seed) for i, ds in enumerate(datasets)
             for seed in restart_seeds(derive_seed(master_seed, DATASET, i, 1), J)]
    p = np.array(run_tasks(chain_proportions, calls, workers)).reshape(I, J, K)
    s_ik, s_k, s = nested_variance_decomposition(p)
    return {
        "p_ijk": p, "s_ik": s_ik, "s_k": s_k, "s": s,
        "grand_mean": float(p.mean()), "mean_s_ik": float(s_ik.mean()), "mean_s_k": float(s_k.mean()),
        "between_exceeds_within": bool(s_k.mean() > s_ik.mean()),
    }
