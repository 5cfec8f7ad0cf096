"""Variable inclusion proportions.

Within one posterior sample, the inclusion proportion of variable k is the
share of all splitting rules in the ensemble that split on k. Samples whose
ensemble is all stumps have no splitting rules; they are flagged and left out
of posterior means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Dataset, Forest, Hyperparams
from .sampler import PosteriorSamples, prepare, run_chain
from .tasks import RESTART, derive_seed, run_tasks


class NoSplitsError(ValueError):
    pass


@dataclass(frozen=True)
class InclusionVector:
    p: np.ndarray
    all_stump_flag: bool

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        p.setflags(write=False)
        object.__setattr__(self, "p", p)
        if self.all_stump_flag:
            if p.any():
                raise ValueError("flagged all-stump vector must be zero")
        elif abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("inclusion proportions must sum to 1")


def split_counts(forest: Forest, K: int) -> np.ndarray:
    """Number of internal nodes splitting on each variable across the forest."""
    counts = np.zeros(K, dtype=np.int64)
    for tree in forest.trees:
        v = tree.var[tree.var >= 0]
        if v.size and v.max() >= K:
            raise ValueError(f"tree splits on variable {v.max()} but K={K}")
        counts += np.bincount(v, minlength=K)
    return counts


def proportions_from_counts(counts) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize a (samples x K) count matrix.

    Returns ``(proportions, flags)`` where ``flags`` marks all-stump rows,
    whose proportions are left at zero.
    """
    counts = np.atleast_2d(np.asarray(counts))
    totals = counts.sum(axis=1)
    flags = totals == 0
    props = np.zeros(counts.shape)
    np.divide(counts, totals[:, None], out=props, where=~flags[:, None])
    return props, flags


def per_sample_proportions(forest: Forest, K: int) -> InclusionVector:
    props, flags = proportions_from_counts(split_counts(forest, K))
    return InclusionVector(props[0], bool(flags[0]))


def posterior_mean_proportions(samples) -> np.ndarray:
    """Mean inclusion proportions over the samples that have at least one split.

    ``samples`` is a `PosteriorSamples`, a (samples x K) count matrix, or a
    sequence of `InclusionVector`.
    """
    if isinstance(samples, PosteriorSamples):
        props, flags = proportions_from_counts(samples.split_counts)
    elif len(samples) and isinstance(samples[0], InclusionVector):
        props = np.array([s.p for s in samples])
        flags = np.array([s.all_stump_flag for s in samples])
    else:
        props, flags = proportions_from_counts(samples)
    keep = ~flags
    if not keep.any():
        raise NoSplitsError("no splits in posterior")
    return props[keep].mean(axis=0)


def chain_proportions(dataset: Dataset, hyperparams: Hyperparams, weights, seed: int) -> np.ndarray:
    """Posterior mean proportions of one chain (forests are not kept)."""
    samples = run_chain(dataset, hyperparams, weights, seed, keep_forests=False)
    return posterior_mean_proportions(samples)


def restart_seeds(master_seed: int, n_restarts: int) -> list[int]:
    return [derive_seed(master_seed, RESTART, r) for r in range(n_restarts)]


def restart_proportions(dataset: Dataset, hyperparams: Hyperparams, weights, master_seed: int,
                        workers: int = 1) -> np.ndarray:
    """Per-restart posterior mean proportions, shape (n_restarts, K)."""
    prepare(dataset, hyperparams)  # fail fast on a degenerate response
    seeds = restart_seeds(master_seed, hyperparams.n_restarts)
    rows = run_tasks(chain_proportions, [(dataset, hyperparams, weights, s) for s in seeds], workers)
    return np.array(rows)


def restart_averaged_proportions(dataset: Dataset, hyperparams: Hyperparams, weights,
                                 master_seed: int, workers: int = 1) -> np.ndarray:
    """Average of ``n_restarts`` independent chains' posterior mean proportions."""
    return restart_proportions(dataset, hyperparams, weights, master_seed, workers).mean(axis=0)
