"""Synthetic data for the null, sparse linear and Friedman simulation settings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Dataset

NULL, LINEAR, FRIEDMAN = "null", "linear", "friedman"
KINDS = (NULL, LINEAR, FRIEDMAN)
DEFAULT_N = 250


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    n: int = DEFAULT_N
    p: int = 25
    p0: int = 0
    sigma_sq: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.n < 2 or self.p < 1:
            raise ValueError("need n >= 2 and p >= 1")
        if not 0 <= self.p0 <= self.p:
            raise ValueError("need 0 <= p0 <= p")
        if self.sigma_sq < 0:
            raise ValueError("sigma_sq must be >= 0")
        if self.kind == NULL and self.p0 != 0:
            raise ValueError("null scenario has p0 = 0")
        if self.kind == FRIEDMAN and (self.p < 5 or self.p0 != 5):
            raise ValueError("friedman scenario needs p >= 5 and p0 = 5")

    @property
    def true_set(self) -> frozenset:
        return frozenset(range(self.p0))

    def generate(self) -> tuple[Dataset, frozenset]:
        if self.kind == NULL:
            return gen_null(self.n, self.p, self.seed), frozenset()
        if self.kind == LINEAR:
            return gen_linear(self.n, self.p, self.p0, self.sigma_sq, self.seed)
        return gen_friedman(self.n, self.p, self.sigma_sq, self.seed)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n": self.n, "p": self.p, "p0": self.p0,
                "sigma_sq": self.sigma_sq, "seed": self.seed}


def gen_null(n: int, p: int, seed: int) -> Dataset:
    """Response and predictors all iid standard normal."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    y = rng.standard_normal(n)
    return Dataset(X, y)


def linear_mean(X: np.ndarray, p0: int) -> np.ndarray:
    """Noiseless response of the linear setting: the sum of the first p0 columns."""
    return X[:, :p0].sum(axis=1)


def gen_linear(n: int, p: int, p0: int, sigma_sq: float, seed: int) -> tuple[Dataset, frozenset]:
    """``y = X beta + eps`` with ``beta = (1, ..., 1, 0, ..., 0)`` (p0 ones)."""
    if not 0 <= p0 <= p:
        raise ValueError("need 0 <= p0 <= p")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    eps = rng.standard_normal(n) * math.sqrt(sigma_sq)
    return Dataset(X, linear_mean(X, p0) + eps), frozenset(range(p0))


def friedman_mean(X: np.ndarray) -> np.ndarray:
    x = np.asarray(X, dtype=float)
    return (10.0 * np.sin(np.pi * x[:, 0] * x[:, 1]) + 20.0 * (x[:, 2] - 0.5) ** 2
            + 10.0 * x[:, 3] + 5.0 * x[:, 4])


def gen_friedman(n: int, p: int, sigma_sq: float, seed: int) -> tuple[Dataset, frozenset]:
    """Uniform(0, 1) predictors; only the first five enter the response."""
    if p < 5:
        raise ValueError("friedman data needs p >= 5")
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, p))
    eps = rng.standard_normal(n) * math.sqrt(sigma_sq)
    return Dataset(X, friedman_mean(X) + eps), frozenset(range(5))
