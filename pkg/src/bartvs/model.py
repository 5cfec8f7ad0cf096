"""Core data types: datasets, trees, forests, hyperparameters, prediction.

Trees are stored as flat node arrays with the root at index 0. A node is a
leaf when its ``var`` entry is ``-1``; otherwise it routes ``x[var] < split``
to ``left`` and everything else to ``right``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


class DataError(ValueError):
    """Raised for malformed or degenerate input data."""


@dataclass(frozen=True)
class Dataset:
    predictors: np.ndarray
    response: np.ndarray
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        X = np.array(self.predictors, dtype=float, order="C")
        y = np.array(self.response, dtype=float).ravel()
        if X.ndim != 2:
            raise DataError("predictors must be a 2-d matrix")
        n, K = X.shape
        if y.shape[0] != n:
            raise DataError(f"predictors have {n} rows but response has {y.shape[0]}")
        if K < 1:
            raise DataError("need at least one predictor")
        if n < 2:
            raise DataError("need at least two observations")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise DataError("non-finite values in dataset")
        names = tuple(self.names) if self.names is not None else default_names(K)
        if len(names) != K:
            raise DataError(f"{len(names)} names for {K} predictors")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "predictors", X)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.predictors.shape[0]

    @property
    def K(self) -> int:
        return self.predictors.shape[1]

    def with_response(self, response) -> "Dataset":
        return Dataset(self.predictors, response, self.names)

    def subset_rows(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.predictors[rows], self.response[rows], self.names)

    def subset_columns(self, cols) -> "Dataset":
        cols = list(cols)
        return Dataset(self.predictors[:, cols], self.response,
                       tuple(self.names[c] for c in cols))


def default_names(K: int) -> tuple[str, ...]:
    return tuple(f"x{k + 1}" for k in range(K))


def read_dataset(path, response_col: str, delimiter: str | None = None) -> Dataset:
    """Load a delimited text file with a header row.

    The column named ``response_col`` becomes the response and every other
    column a predictor. Any missing or non-numeric cell raises `DataError`.
    """
    with open(path, newline="") as fh:
        text = fh.read()
    if delimiter is None:
        try:
            delimiter = csv.Sniffer().sniff(text.splitlines()[0], delimiters=",\t;").delimiter
        except (csv.Error, IndexError):
            delimiter = ","
    rows = list(csv.reader(text.splitlines(), delimiter=delimiter))
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    header = [h.strip() for h in rows[0]]
    if response_col not in header:
        raise DataError(f"{path}: response column {response_col!r} not in header")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names")
    values = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{i}: expected {len(header)} cells, got {len(row)}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            try:
                values[i - 2, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}:{i}: non-numeric cell {cell!r} in column {header[j]!r}") from None
    if not np.isfinite(values).all():
        raise DataError(f"{path}: missing or non-finite values")
    j_resp = header.index(response_col)
    keep = [j for j in range(len(header)) if j != j_resp]
    return Dataset(values[:, keep], values[:, j_resp], tuple(header[j] for j in keep))


def write_dataset(dataset: Dataset, path, response_col: str = "y") -> None:
    # repr() of a float is the shortest string that round-trips exactly
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([response_col, *dataset.names])
        for yi, row in zip(dataset.response, dataset.predictors):
            w.writerow([repr(float(yi)), *(repr(float(v)) for v in row)])


@dataclass(frozen=True)
class Standardization:
    """Affine map ``y -> (y - shift) / scale`` onto [-0.5, 0.5]."""

    shift: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise DataError("standardization scale must be positive")

    def apply(self, y):
        return (np.asarray(y, dtype=float) - self.shift) / self.scale

    def invert(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.shift


IDENTITY = Standardization(0.0, 1.0)


def standardize_response(response) -> tuple[np.ndarray, Standardization]:
    y = np.asarray(response, dtype=float).ravel()
    if y.shape[0] < 2:
        raise DataError("need at least two responses")
    lo, hi = float(y.min()), float(y.max())
    if not hi > lo:
        raise DataError("degenerate response")
    std = Standardization(shift=(lo + hi) / 2, scale=hi - lo)
    return std.apply(y), std


@dataclass(frozen=True)
class SplitRule:
    variable_index: int
    split_value: float


@dataclass
class DecisionTree:
    """A binary regression tree in flat-array form.

    Attributes
    ----------
    var : (B,) int array
        Splitting variable per node, -1 for leaves.
    split : (B,) float array
        Split value per internal node.
    value : (B,) float array
        Leaf value (mu) per leaf node.
    left, right : (B,) int arrays
        Child node indices, -1 for leaves.
    """

    var: np.ndarray
    split: np.ndarray
    value: np.ndarray
    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        self.var = np.asarray(self.var, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=float)
        self.value = np.asarray(self.value, dtype=float)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)

    @classmethod
    def stump(cls, mu: float = 0.0) -> "DecisionTree":
        return cls([-1], [0.0], [mu], [-1], [-1])

    @classmethod
    def from_nested(cls, spec) -> "DecisionTree":
        """Build a tree from nested tuples.

        A leaf is a bare number ``mu``; an internal node is
        ``(var, split, left_spec, right_spec)``.
        """
        var, split, value, left, right = [], [], [], [], []

        def build(node):
            idx = len(var)
            var.append(-1)
            split.append(0.0)
            value.append(0.0)
            left.append(-1)
            right.append(-1)
            if isinstance(node, tuple):
                k, c, lo, hi = node
                var[idx] = int(k)
                split[idx] = float(c)
                left[idx] = build(lo)
                right[idx] = build(hi)
            else:
                value[idx] = float(node)
            return idx

        build(spec)
        return cls(var, split, value, left, right)

    @property
    def n_nodes(self) -> int:
        return len(self.var)

    def is_leaf(self, node: int) -> bool:
        return self.var[node] < 0

    def leaves(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.var < 0)]

    def internal_nodes(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.var >= 0)]

    def prunable_nodes(self) -> list[int]:
        return [i for i in self.internal_nodes()
                if self.var[self.left[i]] < 0 and self.var[self.right[i]] < 0]

    def parents(self) -> np.ndarray:
        par = np.full(self.n_nodes, -1, dtype=np.int64)
        for i in self.internal_nodes():
            par[self.left[i]] = i
            par[self.right[i]] = i
        return par

    def depths(self) -> np.ndarray:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        stack = [0]
        while stack:
            i = stack.pop()
            if self.var[i] >= 0:
                for c in (self.left[i], self.right[i]):
                    d[c] = d[i] + 1
                    stack.append(c)
        return d

    def subtree(self, node: int) -> list[int]:
        out, stack = [], [node]
        while stack:
            i = stack.pop()
            out.append(i)
            if self.var[i] >= 0:
                stack.extend((self.right[i], self.left[i]))
        return out

    def rule(self, node: int) -> SplitRule:
        return SplitRule(int(self.var[node]), float(self.split[node]))

    def leaf_of(self, X: np.ndarray, start: int = 0) -> np.ndarray:
        """Leaf index reached by every row of ``X`` starting from ``start``."""
        X = np.atleast_2d(X)
        node = np.full(X.shape[0], start, dtype=np.int64)
        active = self.var[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            cur = node[rows]
            go_left = X[rows, self.var[cur]] < self.split[cur]
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.var[node] >= 0
        return node

    def copy(self) -> "DecisionTree":
        return DecisionTree(self.var.copy(), self.split.copy(), self.value.copy(),
                            self.left.copy(), self.right.copy())

    def compact(self) -> "DecisionTree":
        """Renumber reachable nodes in preorder, dropping orphans."""
        order = self.subtree(0)
        new_id = {old: new for new, old in enumerate(order)}
        remap = lambda c: new_id[int(c)] if c >= 0 else -1
        return DecisionTree(
            self.var[order], self.split[order], self.value[order],
            [remap(self.left[i]) for i in order], [remap(self.right[i]) for i in order])


def tree_predict(tree: DecisionTree, x) -> float:
    x = np.asarray(x, dtype=float)
    node = 0
    while tree.var[node] >= 0:
        node = tree.left[node] if x[tree.var[node]] < tree.split[node] else tree.right[node]
    return float(tree.value[node])


@dataclass
class Forest:
    trees: list[DecisionTree]
    sigma_sq: float

    def __post_init__(self):
        if not self.trees:
            raise ValueError("a forest needs at least one tree")
        if not self.sigma_sq > 0:
            raise ValueError("sigma_sq must be positive")

    @property
    def m(self) -> int:
        return len(self.trees)

    def raw_predict(self, x) -> float:
        """Sum of tree outputs on the standardized scale."""
        return math.fsum(tree_predict(t, x) for t in self.trees)


def forest_predict(forest: Forest, x, std: Standardization = IDENTITY) -> float:
    return float(std.invert(forest.raw_predict(x)))


def posterior_mean_prediction(samples, x, std: Standardization = IDENTITY) -> float:
    """Average destandardized forest prediction over retained samples.

    ``samples`` is a `PosteriorSamples` (which carries its own
    standardization) or a sequence of `Forest` objects used with ``std``.
    """
    if len(samples) == 0:
        raise ValueError("no retained samples")
    if isinstance(samples[0] if isinstance(samples, (list, tuple)) else None, Forest):
        return math.fsum(forest_predict(f, x, std) for f in samples) / len(samples)
    return float(np.mean(samples.predict(np.atleast_2d(x))))


MOVE_KINDS = ("grow", "prune", "change")


@dataclass(frozen=True)
class Hyperparams:
    """BART hyperparameters and chain lengths.

    ``sample_structure=False`` freezes tree shapes (leaf and variance draws
    only); ``prior_only=True`` drops the likelihood everywhere so the chain
    samples the prior. Both exist for diagnostics.
    """

    m: int = 20
    tree_prior_alpha: float = 0.95
    tree_prior_beta: float = 2.0
    k_mu: float = 2.0
    nu: float = 3.0
    q: float = 0.9
    n_burn: int = 250
    n_post: int = 1000
    n_restarts: int = 5
    move_probs: tuple[float, float, float] = (0.28, 0.28, 0.44)
    max_nodes: int = 255
    sample_structure: bool = True
    prior_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "move_probs", tuple(float(p) for p in self.move_probs))
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 0 < self.tree_prior_alpha < 1:
            raise ValueError("tree_prior_alpha must lie in (0, 1)")
        if self.tree_prior_beta < 0:
            raise ValueError("tree_prior_beta must be >= 0")
        if not self.k_mu > 0:
            raise ValueError("k_mu must be positive")
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if not 0 < self.q < 1:
            raise ValueError("q must lie in (0, 1)")
        if self.n_burn < 0 or self.n_post < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if len(self.move_probs) != 3 or min(self.move_probs) < 0 \
                or abs(sum(self.move_probs) - 1) > 1e-9:
            raise ValueError("move_probs must be three nonnegative numbers summing to 1")
        if self.max_nodes < 3 or self.max_nodes % 2 == 0:
            raise ValueError("max_nodes must be an odd number >= 3")

    @property
    def sigma_mu(self) -> float:
        """Leaf prior sd on the [-0.5, 0.5] response scale."""
        return 0.5 / (self.k_mu * math.sqrt(self.m))

    def replace(self, **changes) -> "Hyperparams":
        from dataclasses import replace
        return replace(self, **changes)

    def to_dict(self) -> dict:
        from dataclasses import asdict
        d = asdict(self)
        d["move_probs"] = list(self.move_probs)
        return d
