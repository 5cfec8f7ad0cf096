"""Backfitting Gibbs sampler for the sum-of-trees model.

The chain itself runs in the compiled kernel (`bartvs._kernel`). This module
prepares data, owns the chain state, collects posterior samples and provides
plain-numpy versions of the move mechanics (`propose_move`, `mh_log_ratio`,
`log_tree_structure_prior`, ...) that work on `DecisionTree` objects. Those
are slow but easy to audit, and the tests use them to check the kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import _kernel as K_
from .model import (
    DataError, Dataset, DecisionTree, Forest, Hyperparams, SplitRule, Standardization,
    standardize_response,
)

GROW, PRUNE, CHANGE = "grow", "prune", "change"
_KIND_INDEX = {GROW: 0, PRUNE: 1, CHANGE: 2}


# ----------------------------------------------------------------- data prep


@dataclass(frozen=True)
class PreparedData:
    """Column-major predictors, dense ranks and calibrated priors for one response.

    Columns are stored in a canonical order fixed by their contents
    (``order[j]`` is the dataset column held in slot j), so the random
    stream of a chain does not depend on how the caller ordered the
    predictors. Everything leaving the sampler is mapped back to dataset
    column indices.
    """

    y: np.ndarray
    std: Standardization
    Xt: np.ndarray
    ranks: np.ndarray
    uniq: np.ndarray
    nuniq: np.ndarray
    all_distinct: np.ndarray
    sigma_hat_sq: float
    lam: float
    sigma_mu_sq: float
    order: np.ndarray

    @property
    def slot_of(self) -> np.ndarray:
        """Inverse of ``order``: canonical slot of each dataset column."""
        inv = np.empty_like(self.order)
        inv[self.order] = np.arange(self.order.size)
        return inv

    def canonical_weights(self, split_weights) -> np.ndarray:
        return np.ascontiguousarray(check_weights(split_weights, self.K)[self.order])

    def columns_to_dataset(self, var: np.ndarray) -> np.ndarray:
        """Map canonical variable indices (negative for leaves) to dataset columns."""
        return np.where(var >= 0, self.order[np.maximum(var, 0)], var)

    @property
    def n(self):
        return self.Xt.shape[1]

    @property
    def K(self):
        return self.Xt.shape[0]


def estimate_sigma_sq(X: np.ndarray, y: np.ndarray) -> float:
    """Residual variance of an OLS fit (with intercept), or var(y) when n <= K + 1."""
    n, K = X.shape
    if n > K + 1:
        A = np.column_stack([np.ones(n), X])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        resid = y - A @ coef
        s2 = float(resid @ resid) / (n - K - 1)
        if s2 > 0:
            return s2
    return float(np.var(y, ddof=1))


def calibrate_lambda(sigma_hat_sq: float, nu: float, q: float) -> float:
    """Scale making P(sigma^2 < sigma_hat_sq) = q under nu * lam / chi2_nu."""
    return sigma_hat_sq * stats.chi2.ppf(1.0 - q, nu) / nu


def canonical_column_order(X: np.ndarray) -> np.ndarray:
    """Column order determined by column contents alone (lexicographic by rows)."""
    return np.lexsort(X[::-1]).astype(np.int64)


def prepare(dataset: Dataset, hyperparams: Hyperparams) -> PreparedData:
    y, std = standardize_response(dataset.response)
    order = canonical_column_order(dataset.predictors)
    X = dataset.predictors[:, order]
    n, K = X.shape
    columns = [np.unique(X[:, k], return_inverse=True) for k in range(K)]
    nuniq = np.array([len(u) for u, _ in columns], dtype=np.int64)
    uniq = np.zeros((K, int(nuniq.max())))
    ranks = np.empty((K, n), dtype=np.int64)
    for k, (u, inv) in enumerate(columns):
        uniq[k, :len(u)] = u
        ranks[k] = inv.ravel()
    s2 = estimate_sigma_sq(X, y)
    return PreparedData(
        y=y, std=std, Xt=np.ascontiguousarray(X.T), ranks=ranks, uniq=uniq, nuniq=nuniq,
        all_distinct=nuniq == n, sigma_hat_sq=s2,
        lam=calibrate_lambda(s2, hyperparams.nu, hyperparams.q),
        sigma_mu_sq=hyperparams.sigma_mu ** 2, order=order)


def check_weights(split_weights, K: int) -> np.ndarray:
    w = np.asarray(split_weights, dtype=float).ravel()
    if w.shape[0] != K:
        raise ValueError(f"expected {K} split weights, got {w.shape[0]}")
    if not (np.isfinite(w).all() and (w > 0).all()):
        raise ValueError("split weights must be finite and strictly positive")
    return w


# --------------------------------------------------------------- chain state


@dataclass
class ChainState:
    """Mutable state of one chain: node pools, per-tree fits and sigma^2.

    ``(seed, iteration)`` fully determines the random numbers used by the
    next sweep.
    """

    data: PreparedData
    hyperparams: Hyperparams
    seed: int
    iteration: int
    var: np.ndarray
    split: np.ndarray
    left: np.ndarray
    right: np.ndarray
    parent: np.ndarray
    depth: np.ndarray
    mu: np.ndarray
    leaf_of: np.ndarray
    tree_fit: np.ndarray
    total_fit: np.ndarray
    sigma_sq_box: np.ndarray
    move_stats: np.ndarray = field(default_factory=lambda: np.zeros((3, 2), dtype=np.int64))

    @classmethod
    def initial(cls, data: PreparedData, hyperparams: Hyperparams, seed: int) -> "ChainState":
        """All-stump forest with leaf values and sigma^2 drawn from their priors."""
        m, C, n = hyperparams.m, hyperparams.max_nodes, data.n
        rng = np.random.default_rng([seed, 0xB417])
        var = np.full((m, C), K_.FREE, dtype=np.int64)
        var[:, 0] = K_.LEAF
        mu = np.zeros((m, C))
        mu[:, 0] = rng.normal(0.0, math.sqrt(data.sigma_mu_sq), size=m)
        tree_fit = np.repeat(mu[:, :1], n, axis=1)
        sigma_sq = hyperparams.nu * data.lam / rng.chisquare(hyperparams.nu)
        return cls(
            data=data, hyperparams=hyperparams, seed=int(seed), iteration=0,
            var=var, split=np.zeros((m, C)),
            left=np.full((m, C), -1, dtype=np.int64), right=np.full((m, C), -1, dtype=np.int64),
            parent=np.full((m, C), -1, dtype=np.int64), depth=np.zeros((m, C), dtype=np.int64),
            mu=mu, leaf_of=np.zeros((m, n), dtype=np.int64),
            tree_fit=tree_fit, total_fit=tree_fit.sum(axis=0),
            sigma_sq_box=np.array([sigma_sq]))

    @property
    def sigma_sq(self) -> float:
        return float(self.sigma_sq_box[0])

    @property
    def m(self) -> int:
        return self.var.shape[0]

    def tree(self, t: int) -> DecisionTree:
        o_var, o_split, o_val, o_left, o_right, off = K_.compact_forest(
            self.var[t:t + 1], self.split[t:t + 1], self.left[t:t + 1], self.right[t:t + 1],
            self.mu[t:t + 1])
        return DecisionTree(self.data.columns_to_dataset(o_var), o_split, o_val, o_left, o_right)

    def forest(self) -> Forest:
        return Forest([self.tree(t) for t in range(self.m)], self.sigma_sq)

    def residual_cache_error(self) -> float:
        """Max deviation of cached fits from a from-scratch recomputation."""
        X = self.data.Xt.T[:, self.data.slot_of]
        err = 0.0
        total = np.zeros(self.data.n)
        for t in range(self.m):
            tree = self.tree(t)
            fit = tree.value[tree.leaf_of(X)]
            total += fit
            err = max(err, float(np.max(np.abs(fit - self.tree_fit[t]))))
        return max(err, float(np.max(np.abs(total - self.total_fit))))

    def load_tree(self, t: int, tree: DecisionTree) -> None:
        """Place a tree into pool row t keeping its node numbering."""
        B = tree.n_nodes
        C = self.var.shape[1]
        if B > C:
            raise ValueError("tree larger than node capacity")
        self.var[t] = K_.FREE
        self.var[t, :B] = np.where(tree.var >= 0, self.data.slot_of[np.maximum(tree.var, 0)], tree.var)
        self.split[t, :B] = tree.split
        self.mu[t, :B] = tree.value
        self.left[t, :B] = tree.left
        self.right[t, :B] = tree.right
        self.parent[t, :B] = tree.parents()
        self.depth[t, :B] = tree.depths()
        self.leaf_of[t] = tree.leaf_of(self.data.Xt.T[:, self.data.slot_of])
        fit = tree.value[self.leaf_of[t]]
        self.total_fit += fit - self.tree_fit[t]
        self.tree_fit[t] = fit


def _kernel_args(state: ChainState, weights: np.ndarray):
    hp, d = state.hyperparams, state.data
    return (d.y, state.var, state.split, state.left, state.right, state.parent, state.depth,
            state.mu, state.leaf_of, state.tree_fit, state.total_fit, state.sigma_sq_box,
            d.Xt, d.ranks, d.nuniq, d.uniq, d.all_distinct, weights,
            hp.tree_prior_alpha, hp.tree_prior_beta, np.asarray(hp.move_probs), d.sigma_mu_sq,
            float(hp.nu), d.lam, hp.sample_structure, hp.prior_only, state.move_stats)


def gibbs_iteration(state: ChainState, dataset: Dataset | None, hyperparams: Hyperparams,
                    split_weights) -> ChainState:
    """Advance the chain by one sweep (in place) and return it."""
    if dataset is not None and dataset.K != state.data.K:
        raise ValueError("dataset does not match chain state")
    if hyperparams != state.hyperparams:
        raise ValueError("hyperparams differ from those the chain was built with")
    w = state.data.canonical_weights(split_weights)
    K_.gibbs_sweep(state.seed, state.iteration, *_kernel_args(state, w))
    state.iteration += 1
    return state


def kernel_log_ratio(state: ChainState, t: int, proposal: "MoveProposal", residuals,
                     split_weights, use_likelihood: bool = True) -> float:
    """Log MH ratio the compiled kernel assigns to ``proposal`` on pool row t.

    The tree in row t must have been placed with `ChainState.load_tree` so
    node numbers agree with the proposal. Used to cross-check the kernel
    against `mh_log_ratio`.
    """
    hp, d = state.hyperparams, state.data
    w = d.canonical_weights(split_weights)
    resid = np.ascontiguousarray(residuals, dtype=float)
    n, C = d.n, state.var.shape[1]
    idx = np.empty(n, dtype=np.int64)
    mp = np.asarray(hp.move_probs, dtype=float)
    common = (hp.tree_prior_alpha, hp.tree_prior_beta, mp, state.sigma_sq, d.sigma_mu_sq,
              use_likelihood)
    n_int, n_leaf, n_prunable = K_.tree_counts(state.var[t], state.left[t], state.right[t])
    node = proposal.node
    if proposal.kind == GROW:
        cnt = K_.rows_in_leaf(state.leaf_of[t], node, idx)
        rule = proposal.rule
        return float(K_.grow_log_ratio(
            t, node, d.slot_of[rule.variable_index], rule.split_value, state.var, state.left, state.right,
            state.parent, state.depth, resid, d.Xt, d.ranks, d.nuniq, d.all_distinct, w,
            *common, idx, cnt, n_int, n_leaf, n_prunable))
    if proposal.kind == PRUNE:
        return float(K_.prune_log_ratio(
            t, node, state.var, state.left, state.right, state.depth, state.leaf_of, resid,
            d.ranks, d.nuniq, d.all_distinct, w, *common, idx, n_int, n_leaf, n_prunable))
    sub_rows = np.array([i for i in range(n)
                         if node == 0 or K_.is_descendant(state.leaf_of[t, i], node, state.parent[t])],
                        dtype=np.int64)
    sub = np.empty(n, dtype=np.int64)
    sub[:sub_rows.size] = sub_rows
    rule = proposal.rule
    return float(K_.change_log_ratio(
        t, node, d.slot_of[rule.variable_index], rule.split_value, state.var, state.split, state.left,
        state.right, state.parent, state.leaf_of, resid, d.Xt, d.ranks, d.nuniq, d.all_distinct,
        w, *common, sub, sub_rows.size, n_int, idx, np.empty(n, dtype=np.int64),
        np.empty((9, C))))


# ----------------------------------------------------------------- samples


@dataclass
class PosteriorSamples:
    """Retained draws from one chain.

    Forest snapshots are stored in a flat preorder encoding (see
    `_kernel.compact_forest`); `forests` materializes them on demand.
    """

    sigma_sq_draws: np.ndarray
    split_counts: np.ndarray
    std: Standardization
    m: int
    nodes: tuple | None = None
    tree_offsets: np.ndarray | None = None
    move_stats: np.ndarray | None = None
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.sigma_sq_draws)

    @property
    def K(self) -> int:
        return self.split_counts.shape[1]

    @property
    def has_forests(self) -> bool:
        return self.nodes is not None

    @property
    def inclusion_per_sample(self) -> np.ndarray:
        from .inclusion import proportions_from_counts
        return proportions_from_counts(self.split_counts)[0]

    def _tree(self, s: int, t: int) -> DecisionTree:
        a, b = self.tree_offsets[s * self.m + t], self.tree_offsets[s * self.m + t + 1]
        v, c, val, lo, hi = (arr[a:b] for arr in self.nodes)
        return DecisionTree(v, c, val, lo, hi)

    @property
    def forests(self) -> list[Forest]:
        if not self.has_forests:
            raise ValueError("forest snapshots were not kept for this chain")
        return [Forest([self._tree(s, t) for t in range(self.m)], float(self.sigma_sq_draws[s]))
                for s in range(len(self))]

    def predict_raw(self, X) -> np.ndarray:
        if not self.has_forests:
            raise ValueError("forest snapshots were not kept for this chain")
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
        return K_.predict_compact(X, *self.nodes, self.tree_offsets, len(self), self.m)

    def predict(self, X) -> np.ndarray:
        """Destandardized predictions, shape (n_samples, n_rows)."""
        return self.std.invert(self.predict_raw(X))

    def mean_prediction(self, X) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("no retained samples")
        return self.predict(X).mean(axis=0)

    @property
    def acceptance_rate(self) -> float:
        prop, acc = self.move_stats.sum(axis=0)
        return acc / prop if prop else float("nan")


def run_chain(dataset: Dataset, hyperparams: Hyperparams, split_weights, seed: int,
              keep_forests: bool = True, data: PreparedData | None = None) -> PosteriorSamples:
    """Run ``n_burn`` discarded and ``n_post`` retained sweeps from a prior draw."""
    if hyperparams.n_post < 1:
        raise ValueError("no retained samples")
    if data is None:
        data = prepare(dataset, hyperparams)
    w = data.canonical_weights(split_weights)
    state = ChainState.initial(data, hyperparams, seed)
    args = _kernel_args(state, w)
    counts = np.zeros((hyperparams.n_post, data.K), dtype=np.int64)
    sig = np.zeros(hyperparams.n_post)
    K_.run_sweeps(state.seed, 0, hyperparams.n_burn, False, *args, counts, sig)
    state.iteration = hyperparams.n_burn
    nodes = offsets = None
    if keep_forests:
        *nodes, offsets = K_.run_sweeps_keep(state.seed, state.iteration, hyperparams.n_post,
                                             *args, counts, sig)
        nodes = tuple(nodes)
    else:
        K_.run_sweeps(state.seed, state.iteration, hyperparams.n_post, True, *args, counts, sig)
    state.iteration += hyperparams.n_post
    counts = np.ascontiguousarray(counts[:, data.slot_of])
    if nodes is not None:
        nodes = (data.columns_to_dataset(nodes[0]),) + nodes[1:]
    return PosteriorSamples(sigma_sq_draws=sig, split_counts=counts, std=data.std,
                            m=hyperparams.m, nodes=nodes, tree_offsets=offsets,
                            move_stats=state.move_stats.copy(), seed=int(seed))


# ------------------------------------------------- reference move mechanics


def node_log_marginal(residuals, sigma_sq: float, sigma_mu_sq: float) -> float:
    """log of the leaf-value-integrated normal likelihood of one node."""
    r = np.asarray(residuals, dtype=float)
    if r.size == 0:
        raise ValueError("empty node")
    if not (sigma_sq > 0 and sigma_mu_sq > 0):
        raise ValueError("variances must be positive")
    return float(K_.node_log_marginal(r.size, r.sum(), float(r @ r), sigma_sq, sigma_mu_sq))


def _splittable(col: np.ndarray) -> bool:
    return col.size >= 2 and col.min() < col.max()


def log_rule_probability(rule: SplitRule, X_node: np.ndarray, weights: np.ndarray) -> float:
    """log P(rule) for a node holding rows ``X_node``: variable by weight, value uniform."""
    avail = [k for k in range(X_node.shape[1]) if _splittable(X_node[:, k])]
    if rule.variable_index not in avail:
        return -math.inf
    n_cand = len(np.unique(X_node[:, rule.variable_index])) - 1
    return (math.log(weights[rule.variable_index]) - math.log(weights[avail].sum())
            - math.log(n_cand))


def _node_rows(tree: DecisionTree, X: np.ndarray) -> dict[int, np.ndarray]:
    leaf = tree.leaf_of(X)
    par = tree.parents()
    rows: dict[int, list] = {i: [] for i in tree.subtree(0)}
    for i, lf in enumerate(leaf):
        node = lf
        while node >= 0:
            rows[node].append(i)
            node = par[node]
    return {k: np.array(v, dtype=np.int64) for k, v in rows.items()}


def log_tree_structure_prior(tree: DecisionTree, X: np.ndarray, hyperparams: Hyperparams,
                             split_weights, nodes=None) -> float:
    """log prior of a tree shape and its rules given the training predictors.

    ``nodes`` restricts the sum to a subset of nodes.
    """
    w = np.asarray(split_weights, dtype=float)
    a, b = hyperparams.tree_prior_alpha, hyperparams.tree_prior_beta
    depth = tree.depths()
    rows = _node_rows(tree, X)
    total = 0.0
    for node in (tree.subtree(0) if nodes is None else nodes):
        ps = a * (1.0 + depth[node]) ** (-b)
        if tree.is_leaf(node):
            total += math.log1p(-ps)
        else:
            total += math.log(ps) + log_rule_probability(tree.rule(node), X[rows[node]], w)
    return total


@dataclass
class MoveProposal:
    kind: str
    node: int
    rule: SplitRule | None
    log_forward: float
    log_reverse: float
    new_tree: DecisionTree
    new_node: int

    def __post_init__(self):
        if self.kind not in _KIND_INDEX:
            raise ValueError(f"unknown move kind {self.kind!r}")


def _kind_log_prob(kind: str, n_internal: int, move_probs) -> float:
    return float(K_.log_kind_prob(_KIND_INDEX[kind], n_internal, np.asarray(move_probs, dtype=float)))


def _drop_children(tree: DecisionTree, node: int) -> DecisionTree:
    drop = {int(tree.left[node]), int(tree.right[node])}
    keep = [i for i in range(tree.n_nodes) if i not in drop]
    new_id = {old: new for new, old in enumerate(keep)}
    out = DecisionTree(tree.var[keep], tree.split[keep], tree.value[keep],
                       [new_id.get(int(tree.left[i]), -1) for i in keep],
                       [new_id.get(int(tree.right[i]), -1) for i in keep])
    nn = new_id[node]
    out.var[nn], out.left[nn], out.right[nn] = -1, -1, -1
    return out


def grown(tree: DecisionTree, leaf: int, rule: SplitRule) -> DecisionTree:
    B = tree.n_nodes
    out = DecisionTree(np.append(tree.var, [-1, -1]), np.append(tree.split, [0.0, 0.0]),
                       np.append(tree.value, [0.0, 0.0]), np.append(tree.left, [-1, -1]),
                       np.append(tree.right, [-1, -1]))
    out.var[leaf], out.split[leaf] = rule.variable_index, rule.split_value
    out.left[leaf], out.right[leaf] = B, B + 1
    return out


def changed(tree: DecisionTree, node: int, rule: SplitRule) -> DecisionTree:
    out = tree.copy()
    out.var[node], out.split[node] = rule.variable_index, rule.split_value
    return out


def make_proposal(kind: str, tree: DecisionTree, node: int, rule: SplitRule | None,
                  X: np.ndarray, hyperparams: Hyperparams, split_weights) -> MoveProposal:
    """Build a fully specified proposal with its forward/reverse log probabilities."""
    w = np.asarray(split_weights, dtype=float)
    if kind in (GROW, CHANGE) and rule is None:
        raise ValueError(f"{kind} needs a splitting rule")
    mp = hyperparams.move_probs
    n_int = len(tree.internal_nodes())
    rows = _node_rows(tree, X)
    if kind == GROW:
        new = grown(tree, node, rule)
        fwd = (_kind_log_prob(GROW, n_int, mp) - math.log(len(tree.leaves()))
               + log_rule_probability(rule, X[rows[node]], w))
        rev = _kind_log_prob(PRUNE, n_int + 1, mp) - math.log(len(new.prunable_nodes()))
        return MoveProposal(kind, node, rule, fwd, rev, new, node)
    if kind == PRUNE:
        rule = tree.rule(node)
        new = _drop_children(tree, node)
        new_node = node - sum(1 for c in (tree.left[node], tree.right[node]) if c < node)
        fwd = _kind_log_prob(PRUNE, n_int, mp) - math.log(len(tree.prunable_nodes()))
        rev = (_kind_log_prob(GROW, n_int - 1, mp) - math.log(len(new.leaves()))
               + log_rule_probability(rule, X[rows[node]], w))
        return MoveProposal(kind, node, rule, fwd, rev, new, new_node)
    new = changed(tree, node, rule)
    base = _kind_log_prob(CHANGE, n_int, mp) - math.log(n_int)
    fwd = base + log_rule_probability(rule, X[rows[node]], w)
    rev = base + log_rule_probability(tree.rule(node), X[rows[node]], w)
    return MoveProposal(kind, node, rule, fwd, rev, new, node)


def draw_rule(X_node: np.ndarray, split_weights, rng: np.random.Generator) -> SplitRule | None:
    w = np.asarray(split_weights, dtype=float)
    avail = [k for k in range(X_node.shape[1]) if _splittable(X_node[:, k])]
    if not avail:
        return None
    k = int(rng.choice(avail, p=w[avail] / w[avail].sum()))
    values = np.unique(X_node[:, k])[1:]
    return SplitRule(k, float(values[rng.integers(len(values))]))


def propose_move(tree: DecisionTree, X: np.ndarray, hyperparams: Hyperparams, split_weights,
                 rng: np.random.Generator) -> MoveProposal | None:
    """Draw a GROW / PRUNE / CHANGE proposal; None when the drawn move is impossible.

    PRUNE and CHANGE are unavailable on a stump, which therefore always grows.
    """
    internal = tree.internal_nodes()
    if not internal:
        kind = GROW
    else:
        kind = (GROW, PRUNE, CHANGE)[rng.choice(3, p=np.asarray(hyperparams.move_probs))]
    rows = _node_rows(tree, X)
    if kind == GROW:
        leaves = tree.leaves()
        node = leaves[rng.integers(len(leaves))]
        rule = draw_rule(X[rows[node]], split_weights, rng)
        if rule is None:
            return None
    elif kind == PRUNE:
        prunable = tree.prunable_nodes()
        node = prunable[rng.integers(len(prunable))]
        rule = None
    else:
        node = internal[rng.integers(len(internal))]
        rule = draw_rule(X[rows[node]], split_weights, rng)
        if rule is None:
            return None
    return make_proposal(kind, tree, node, rule, X, hyperparams, split_weights)


def _leaf_marginals(tree: DecisionTree, leaves, X, residuals, sigma_sq, sigma_mu_sq):
    where = tree.leaf_of(X)
    total = 0.0
    for lf in leaves:
        r = residuals[where == lf]
        if r.size == 0:
            return -math.inf
        total += node_log_marginal(r, sigma_sq, sigma_mu_sq)
    return total


def mh_log_ratio(proposal: MoveProposal, old_tree: DecisionTree, new_tree: DecisionTree,
                 residuals, X, sigma_sq: float, hyperparams: Hyperparams, split_weights,
                 use_likelihood: bool = True) -> float:
    """Log Metropolis-Hastings ratio using only the subtree the move touches."""
    residuals = np.asarray(residuals, dtype=float)
    s_mu2 = hyperparams.sigma_mu ** 2
    old_nodes = old_tree.subtree(proposal.node)
    new_nodes = new_tree.subtree(proposal.new_node)
    lp = (log_tree_structure_prior(new_tree, X, hyperparams, split_weights, new_nodes)
          - log_tree_structure_prior(old_tree, X, hyperparams, split_weights, old_nodes))
    new_leaves = [i for i in new_nodes if new_tree.is_leaf(i)]
    occupied = np.bincount(new_tree.leaf_of(X), minlength=new_tree.n_nodes)
    if (occupied[new_leaves] == 0).any():
        return -math.inf  # empty leaves are never allowed, even without the likelihood
    ll = 0.0
    if use_likelihood:
        new_ll = _leaf_marginals(new_tree, new_leaves, X, residuals, sigma_sq, s_mu2)
        ll = new_ll - _leaf_marginals(old_tree, [i for i in old_nodes if old_tree.is_leaf(i)],
                                      X, residuals, sigma_sq, s_mu2)
    out = lp + ll + proposal.log_reverse - proposal.log_forward
    return out if math.isfinite(out) or out == -math.inf else -math.inf


def draw_leaf_values(tree: DecisionTree, residuals, X, sigma_sq: float, sigma_mu_sq: float,
                     rng: np.random.Generator) -> DecisionTree:
    """Conjugate normal draw of every leaf value given the partial residuals."""
    residuals = np.asarray(residuals, dtype=float)
    where = tree.leaf_of(X)
    out = tree.copy()
    for lf in tree.leaves():
        r = residuals[where == lf]
        if r.size == 0:
            raise ValueError(f"leaf {lf} holds no observations")
        prec = r.size / sigma_sq + 1.0 / sigma_mu_sq
        out.value[lf] = rng.normal(r.sum() / sigma_sq / prec, 1.0 / math.sqrt(prec))
    return out


def draw_sigma_sq(residuals, nu: float, lam: float, rng: np.random.Generator) -> float:
    """Scaled inverse chi-squared draw with nu + n degrees of freedom."""
    if not (nu > 0 and lam > 0):
        raise ValueError("nu and lambda must be positive")
    r = np.asarray(residuals, dtype=float)
    return float((nu * lam + r @ r) / rng.chisquare(nu + r.size))
