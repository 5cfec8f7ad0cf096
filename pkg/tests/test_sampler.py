import math

import numpy as np
import pytest
from scipy import integrate, stats

from bartvs import _kernel as K_
from bartvs.model import DataError, Dataset, DecisionTree, Hyperparams, SplitRule
from bartvs.sampler import (
    CHANGE, GROW, PRUNE, ChainState, calibrate_lambda, draw_leaf_values, draw_rule,
    draw_sigma_sq, estimate_sigma_sq, gibbs_iteration, kernel_log_ratio,
    log_rule_probability, log_tree_structure_prior, make_proposal, mh_log_ratio,
    node_log_marginal, prepare, propose_move, run_chain,
)

from conftest import make_dataset


# --- node marginal -----------------------------------------------------------

def test_node_marginal_single_residual_is_convolution():
    r = 0.7
    assert node_log_marginal([r], 1.0, 1.0) == pytest.approx(stats.norm(0, math.sqrt(2)).logpdf(r), abs=1e-12)


def test_node_marginal_point_mass_limit():
    r = np.array([0.3, -1.2, 0.5])
    want = stats.norm(0, 1.5).logpdf(r).sum()
    assert node_log_marginal(r, 2.25, 1e-14) == pytest.approx(want, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_node_marginal_matches_quadrature(seed):
    g = np.random.default_rng(seed)
    r = g.normal(0.2, 0.5, size=g.integers(1, 8))
    s2, smu2 = g.uniform(0.1, 2), g.uniform(0.01, 1)

    def integrand(mu):
        return math.exp(stats.norm(mu, math.sqrt(s2)).logpdf(r).sum()
                        + stats.norm(0, math.sqrt(smu2)).logpdf(mu))
    val, _ = integrate.quad(integrand, -10, 10, points=[r.mean()], epsabs=0, epsrel=1e-12, limit=200)
    assert node_log_marginal(r, s2, smu2) == pytest.approx(math.log(val), abs=1e-6)


def test_node_marginal_errors():
    with pytest.raises(ValueError, match="empty"):
        node_log_marginal([], 1.0, 1.0)
    with pytest.raises(ValueError):
        node_log_marginal([1.0], 0.0, 1.0)


# --- structure prior ---------------------------------------------------------

HP = Hyperparams()


def test_structure_prior_stump():
    X = np.zeros((5, 2))
    assert log_tree_structure_prior(DecisionTree.stump(), X, HP, [1, 1]) == pytest.approx(math.log(0.05))


def test_structure_prior_single_split_hand_value():
    X = np.array([[1.0], [2.0], [3.0], [4.0]])  # three candidate values above the minimum
    tree = DecisionTree.from_nested((0, 3.0, 0.0, 0.0))
    want = math.log(0.95) + math.log(1 / 3) + 2 * math.log(1 - 0.95 / 4)
    assert log_tree_structure_prior(tree, X, HP, [1.0]) == pytest.approx(want, abs=1e-12)


def test_structure_prior_weight_scale_invariance(rng):
    X = rng.uniform(size=(30, 3))
    tree = DecisionTree.from_nested((0, X[5, 0], (2, np.sort(X[:, 2])[10], 0, 0), 0))
    a = log_tree_structure_prior(tree, X, HP, [1.0, 2.0, 3.0])
    b = log_tree_structure_prior(tree, X, HP, [2.0, 4.0, 6.0])
    assert a == b


def test_rule_probability_ignores_unsplittable_variables():
    X = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    # column 1 is constant, so all weight goes to column 0 with 2 candidates
    assert log_rule_probability(SplitRule(0, 2.0), X, np.array([1.0, 9.0])) == pytest.approx(math.log(0.5))
    assert log_rule_probability(SplitRule(1, 5.0), X, np.array([1.0, 9.0])) == -math.inf


# --- proposals ---------------------------------------------------------------

def test_stump_always_grows(rng):
    X = rng.uniform(size=(20, 3))
    for _ in range(50):
        prop = propose_move(DecisionTree.stump(), X, HP, np.ones(3), rng)
        assert prop.kind == GROW


@pytest.mark.parametrize("weights, want", [
    ((1, 1, 1, 1), (0.25, 0.25, 0.25, 0.25)),
    ((2, 1, 1), (0.5, 0.25, 0.25)),
])
def test_grow_variable_frequencies(rng, weights, want):
    X = rng.uniform(size=(50, len(weights)))
    counts = np.zeros(len(weights))
    for _ in range(10_000):
        counts[propose_move(DecisionTree.stump(), X, HP, np.array(weights, float), rng).rule.variable_index] += 1
    np.testing.assert_allclose(counts / counts.sum(), want, atol=0.02)


def test_kernel_variable_draw_frequencies():
    data = prepare(make_dataset(n=50, K=3), HP)
    idx = np.arange(50, dtype=np.int64)
    K_.seed_rng(5)
    w = np.array([2.0, 1.0, 1.0])
    draws = [K_.draw_variable(idx, 50, data.ranks, data.all_distinct, w) for _ in range(10_000)]
    np.testing.assert_allclose(np.bincount(draws, minlength=3) / 10_000, [0.5, 0.25, 0.25], atol=0.02)


def test_kernel_split_values_uniform_above_minimum():
    ds = Dataset(np.array([[1.0], [1.0], [2.0], [3.0], [3.0], [4.0]]), np.arange(6.0))
    data = prepare(ds, HP)
    idx = np.arange(6, dtype=np.int64)
    K_.seed_rng(7)
    vals = [K_.draw_split_value(0, idx, 6, data.ranks, data.nuniq, data.uniq) for _ in range(6000)]
    u, c = np.unique(vals, return_counts=True)
    np.testing.assert_array_equal(u, [2.0, 3.0, 4.0])
    np.testing.assert_allclose(c / 6000, 1 / 3, atol=0.02)


def test_prune_targets_prunable_and_grow_targets_leaves(rng):
    X = rng.uniform(size=(40, 2))
    tree = _random_tree(X, np.ones(2), rng, grows=5)
    for _ in range(200):
        prop = propose_move(tree, X, HP, np.ones(2), rng)
        if prop is None:
            continue
        if prop.kind == PRUNE:
            assert prop.node in tree.prunable_nodes()
        elif prop.kind == GROW:
            assert tree.is_leaf(prop.node)
        else:
            assert not tree.is_leaf(prop.node)


# --- MH ratio ----------------------------------------------------------------

def _random_tree(X, w, rng, grows=6):
    tree = DecisionTree.stump()
    for _ in range(grows):
        leaves = tree.leaves()
        leaf = leaves[rng.integers(len(leaves))]
        rows = tree.leaf_of(X) == leaf
        rule = draw_rule(X[rows], w, rng)
        if rule is not None:
            tree = make_proposal(GROW, tree, leaf, rule, X, HP, w).new_tree
    return tree


def _full_log_target(tree, X, resid, s2, w):
    lp = log_tree_structure_prior(tree, X, HP, w)
    where = tree.leaf_of(X)
    ll = 0.0
    for lf in tree.leaves():
        r = resid[where == lf]
        if r.size == 0:
            return -math.inf
        ll += node_log_marginal(r, s2, HP.sigma_mu ** 2)
    return lp + ll


def _all_proposals(tree, X, w, rng):
    out = []
    for leaf in tree.leaves():
        rule = draw_rule(X[tree.leaf_of(X) == leaf], w, rng)
        if rule is not None:
            out.append(make_proposal(GROW, tree, leaf, rule, X, HP, w))
    for node in tree.prunable_nodes():
        out.append(make_proposal(PRUNE, tree, node, None, X, HP, w))
    par = tree.parents()
    for node in tree.internal_nodes():
        rows = np.isin(tree.leaf_of(X), [i for i in tree.leaves() if _below(i, node, par)])
        for _ in range(3):
            out.append(make_proposal(CHANGE, tree, node, draw_rule(X[rows], w, rng), X, HP, w))
    return out


def _below(node, anc, par):
    while node >= 0:
        if node == anc:
            return True
        node = par[node]
    return False


def test_identity_change_is_zero(rng):
    X = rng.uniform(size=(40, 3))
    w = np.ones(3)
    tree = _random_tree(X, w, rng)
    resid = rng.normal(size=40)
    for node in tree.internal_nodes():
        prop = make_proposal(CHANGE, tree, node, tree.rule(node), X, HP, w)
        assert mh_log_ratio(prop, tree, prop.new_tree, resid, X, 0.5, HP, w) == pytest.approx(0, abs=1e-12)


def test_grow_then_prune_negates(rng):
    X = rng.uniform(size=(40, 3))
    w = np.array([1.0, 2.0, 3.0])
    resid = rng.normal(size=40)
    for _ in range(10):
        tree = _random_tree(X, w, rng, grows=4)
        options = [(lf, draw_rule(X[tree.leaf_of(X) == lf], w, rng)) for lf in tree.leaves()]
        leaf, rule = next((lf, r) for lf, r in options if r is not None)
        grow = make_proposal(GROW, tree, leaf, rule, X, HP, w)
        prune = make_proposal(PRUNE, grow.new_tree, leaf, None, X, HP, w)
        a = mh_log_ratio(grow, tree, grow.new_tree, resid, X, 0.3, HP, w)
        b = mh_log_ratio(prune, grow.new_tree, prune.new_tree, resid, X, 0.3, HP, w)
        assert a == pytest.approx(-b, abs=1e-10)
        # pruning the grown tree gives back the original tree
        back = prune.new_tree.compact()
        np.testing.assert_array_equal(back.var, tree.compact().var)


@pytest.mark.parametrize("discrete", [False, True])
def test_local_ratio_matches_full_tree_recomputation(discrete):
    rng = np.random.default_rng(11 + discrete)
    X = rng.integers(0, 5, size=(60, 3)).astype(float) if discrete else rng.uniform(size=(60, 3))
    w = np.array([1.0, 0.5, 2.0])
    resid = rng.normal(size=60)
    s2 = 0.4
    checked = 0
    for _ in range(8):
        tree = _random_tree(X, w, rng, grows=7)
        for prop in _all_proposals(tree, X, w, rng):
            local = mh_log_ratio(prop, tree, prop.new_tree, resid, X, s2, HP, w)
            full = (_full_log_target(prop.new_tree, X, resid, s2, w) - _full_log_target(tree, X, resid, s2, w)
                    + prop.log_reverse - prop.log_forward)
            if full == -math.inf or math.isnan(full):
                assert local == -math.inf
            else:
                assert local == pytest.approx(full, abs=1e-8)
                checked += 1
    assert checked > 50


@pytest.mark.parametrize("discrete", [False, True])
@pytest.mark.parametrize("use_lik", [True, False])
def test_kernel_ratio_matches_reference(discrete, use_lik):
    rng = np.random.default_rng(3 + discrete)
    ds = make_dataset(n=60, K=3, seed=4, discrete=discrete)
    X = ds.predictors
    w = np.array([1.0, 3.0, 0.5])
    hp = Hyperparams(m=2)
    data = prepare(ds, hp)
    resid = rng.normal(scale=0.2, size=60)
    checked = 0
    for _ in range(8):
        tree = _random_tree(X, w, rng, grows=8)
        state = ChainState.initial(data, hp, seed=1)
        state.load_tree(0, tree)
        for prop in _all_proposals(tree, X, w, rng):
            ref = mh_log_ratio(prop, tree, prop.new_tree, resid, X, state.sigma_sq, hp, w, use_lik)
            ker = kernel_log_ratio(state, 0, prop, resid, w, use_lik)
            if ref == -math.inf:
                assert ker == -math.inf
            else:
                assert ker == pytest.approx(ref, abs=1e-9)
                checked += 1
    assert checked > 50


# --- conjugate draws ---------------------------------------------------------

def test_leaf_draw_hand_moments(rng):
    tree = DecisionTree.stump()
    X = np.zeros((1, 1))
    draws = np.array([draw_leaf_values(tree, [2.0], X, 1.0, 1.0, rng).value[0] for _ in range(10_000)])
    se = math.sqrt(0.5 / draws.size)
    assert abs(draws.mean() - 1.0) < 3 * se
    assert draws.var() == pytest.approx(0.5, rel=0.05)


def test_leaf_draw_flat_prior_limit(rng):
    tree = DecisionTree.from_nested((0, 0.5, 0.0, 0.0))
    X = np.array([[0.1], [0.2], [0.7], [0.9], [0.8]])
    r = np.array([1.0, 2.0, -1.0, -2.0, 0.0])
    draws = np.array([draw_leaf_values(tree, r, X, 1e-6, 1e12, rng).value[[1, 2]] for _ in range(50)])
    np.testing.assert_allclose(draws.mean(axis=0), [1.5, -1.0], atol=1e-3)


def test_leaf_draw_empty_leaf_errors(rng):
    tree = DecisionTree.from_nested((0, 5.0, 0.0, 0.0))
    with pytest.raises(ValueError, match="no observations"):
        draw_leaf_values(tree, [1.0], np.zeros((1, 1)), 1.0, 1.0, rng)


def test_sigma_draw_concentrates_for_zero_residuals(rng):
    n, nu, lam = 100_000, 3.0, 0.7
    draws = [draw_sigma_sq(np.zeros(n), nu, lam, rng) for _ in range(20)]
    np.testing.assert_allclose(draws, nu * lam / (nu + n), rtol=0.03)


def test_sigma_draw_mean_matches_scaled_inverse_chi2(rng):
    r = rng.normal(size=30)
    nu, lam = 3.0, 0.5
    draws = np.array([draw_sigma_sq(r, nu, lam, rng) for _ in range(10_000)])
    df = nu + r.size
    mean = (nu * lam + r @ r) / (df - 2)
    sd = mean * math.sqrt(2 / (df - 4))
    assert abs(draws.mean() - mean) < 3 * sd / math.sqrt(draws.size)


def test_sigma_draw_deterministic_and_validated():
    r = np.arange(5.0)
    a = draw_sigma_sq(r, 3, 1, np.random.default_rng(1))
    b = draw_sigma_sq(r, 3, 1, np.random.default_rng(1))
    assert a == b
    with pytest.raises(ValueError):
        draw_sigma_sq(r, 0, 1, np.random.default_rng(1))


# --- calibration -------------------------------------------------------------

def test_sigma_hat_is_ols_residual_variance(rng):
    X = rng.normal(size=(50, 3))
    y = X @ [1.0, -2.0, 0.5] + rng.normal(size=50)
    A = np.column_stack([np.ones(50), X])
    resid = y - A @ np.linalg.lstsq(A, y, rcond=None)[0]
    assert estimate_sigma_sq(X, y) == pytest.approx(resid @ resid / 46)


def test_sigma_hat_falls_back_to_response_variance(rng):
    X = rng.normal(size=(5, 10))
    y = rng.normal(size=5)
    assert estimate_sigma_sq(X, y) == pytest.approx(np.var(y, ddof=1))


def test_lambda_puts_mass_q_below_sigma_hat():
    lam = calibrate_lambda(0.8, 3.0, 0.9)
    # sigma^2 = nu * lam / X with X ~ chi2_nu
    assert stats.chi2(3).sf(3 * lam / 0.8) == pytest.approx(0.9)


# --- chains ------------------------------------------------------------------

def test_run_chain_is_deterministic(short_hp):
    ds = make_dataset()
    a = run_chain(ds, short_hp, np.ones(3), 17)
    b = run_chain(ds, short_hp, np.ones(3), 17)
    c = run_chain(ds, short_hp, np.ones(3), 18)
    assert a.sigma_sq_draws.tobytes() == b.sigma_sq_draws.tobytes()
    np.testing.assert_array_equal(a.split_counts, b.split_counts)
    assert not np.array_equal(a.sigma_sq_draws, c.sigma_sq_draws)


def test_run_chain_errors(short_hp):
    with pytest.raises(ValueError, match="no retained samples"):
        run_chain(make_dataset(), short_hp.replace(n_post=0), np.ones(3), 0)
    flat = Dataset(np.random.default_rng(0).normal(size=(10, 2)), np.ones(10))
    with pytest.raises(DataError, match="degenerate response"):
        run_chain(flat, short_hp, np.ones(2), 0)
    with pytest.raises(ValueError, match="positive"):
        run_chain(make_dataset(), short_hp, [1.0, 0.0, 1.0], 0)


def test_snapshots_agree_with_counts_and_predictions(short_hp):
    ds = make_dataset(n=50, K=4, discrete=True)
    s = run_chain(ds, short_hp, np.ones(4), 3)
    assert len(s) == short_hp.n_post == len(s.forests)
    X = ds.predictors[:7]
    raw = s.predict_raw(X)
    for j in (0, 17, len(s) - 1):
        f = s.forests[j]
        assert f.sigma_sq == s.sigma_sq_draws[j]
        np.testing.assert_allclose(raw[j], [f.raw_predict(x) for x in X], atol=1e-12)
        counts = np.zeros(4, dtype=int)
        for tree in f.trees:
            counts += np.bincount(tree.var[tree.var >= 0], minlength=4)
            assert len(tree.leaves()) == len(tree.internal_nodes()) + 1
        np.testing.assert_array_equal(counts, s.split_counts[j])
    np.testing.assert_allclose(s.mean_prediction(X), s.std.invert(raw).mean(axis=0))
    props = s.inclusion_per_sample
    flagged = s.split_counts.sum(axis=1) == 0
    np.testing.assert_allclose(props[~flagged].sum(axis=1), 1.0, atol=1e-12)


def test_gibbs_iteration_cache_coherence_and_nonempty_leaves():
    ds = make_dataset(n=80, K=3, discrete=True, seed=9)
    hp = Hyperparams(m=8)
    data = prepare(ds, hp)
    state = ChainState.initial(data, hp, seed=2)
    w = np.ones(3)
    for it in range(60):
        gibbs_iteration(state, ds, hp, w)
        assert state.iteration == it + 1
        assert state.residual_cache_error() < 1e-8
        for t in range(hp.m):
            tree = state.tree(t)
            occupied = np.bincount(tree.leaf_of(ds.predictors), minlength=tree.n_nodes)
            assert all(occupied[lf] > 0 for lf in tree.leaves())
    assert state.sigma_sq > 0


def test_gibbs_iteration_rejects_mismatched_hyperparams():
    ds = make_dataset()
    hp = Hyperparams(m=2)
    state = ChainState.initial(prepare(ds, hp), hp, 0)
    with pytest.raises(ValueError):
        gibbs_iteration(state, ds, hp.replace(m=3), np.ones(3))


def test_interleaved_chains_match_solo_runs():
    ds = make_dataset(n=30)
    hp = Hyperparams(m=3)
    data = prepare(ds, hp)
    solo = ChainState.initial(data, hp, 5)
    for _ in range(10):
        gibbs_iteration(solo, ds, hp, np.ones(3))
    a, b = ChainState.initial(data, hp, 5), ChainState.initial(data, hp, 6)
    for _ in range(10):
        gibbs_iteration(a, ds, hp, np.ones(3))
        gibbs_iteration(b, ds, hp, np.ones(3))
    assert a.sigma_sq == solo.sigma_sq
    np.testing.assert_array_equal(a.total_fit, solo.total_fit)


def test_node_capacity_caps_tree_size():
    ds = make_dataset(n=60)
    hp = Hyperparams(m=3, max_nodes=3, n_burn=20, n_post=30)
    s = run_chain(ds, hp, np.ones(3), 1)
    assert all(t.n_nodes <= 3 for f in s.forests for t in f.trees)
    assert s.split_counts.sum(axis=1).max() <= 3


def test_frozen_structure_keeps_stumps():
    ds = make_dataset()
    s = run_chain(ds, Hyperparams(m=2, n_burn=5, n_post=20, sample_structure=False), np.ones(3), 0)
    assert s.split_counts.sum() == 0
    assert s.move_stats.sum() == 0


def test_acceptance_rate_on_null_data_is_strictly_between_0_and_1():
    g = np.random.default_rng(0)
    ds = Dataset(g.normal(size=(250, 40)), g.normal(size=250))
    s = run_chain(ds, Hyperparams(n_burn=0, n_post=1000), np.ones(40), 4, keep_forests=False)
    assert 0 < s.acceptance_rate < 1
    assert (s.move_stats[:, 1] > 0).all()
