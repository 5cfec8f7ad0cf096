"""Seed derivation and an optional process pool for independent chains.

Every task gets its own seed from ``(master_seed, tag, index)``, so results do
not depend on how many workers run them or in which order they finish.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence

import numpy as np

# Tags keep the seed streams of different task families apart.
RESTART, PERMUTE, FOLD, REFIT, REPLICATE, DATASET = range(6)


def derive_seed(master_seed: int, *path: int) -> int:
    """A 63-bit seed determined by the master seed and an integer path."""
    if master_seed < 0 or any(p < 0 for p in path):
        raise ValueError("seeds and task indices must be nonnegative")
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0] & np.uint64(2 ** 63 - 1))


def derive_rng(master_seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *path))


def resolve_workers(workers: int | None) -> int:
    if workers is None or workers == 0:
        return os.cpu_count() or 1
    if workers < 0:
        raise ValueError("workers must be >= 0")
    return workers


def run_tasks(fn: Callable, args: Iterable[Sequence], workers: int = 1) -> list:
    """``[fn(*a) for a in args]``, optionally spread over worker processes.

    Output order always follows input order.
    """
    args = [tuple(a) for a in args]
    workers = min(resolve_workers(workers), len(args))
    if workers <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]
