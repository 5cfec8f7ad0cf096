import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bartvs.model import DecisionTree, Hyperparams
from bartvs.sampler import log_tree_structure_prior
from bartvs.split_prior import (
    C_GRID, PriorSpec, compute_weights, doubled_weight_spec, read_prior_file,
    selection_probabilities, uniform_weights,
)


def test_c_zero_gives_uniform():
    np.testing.assert_array_equal(compute_weights(PriorSpec([0.3, 0.9, 0.0], 0.0)), [1, 1, 1])


def test_weights_hand_value():
    np.testing.assert_array_equal(compute_weights(PriorSpec([0.5, 0.0], 2.0)), [2.0, 1.0])


def test_large_c_ratio():
    w = compute_weights(PriorSpec([0.95, 0.05], 10_000))
    assert w[0] / w[1] == pytest.approx(9501 / 501)


def test_prior_spec_validation():
    for bad in ([1.2], [-0.1], [np.nan]):
        with pytest.raises(ValueError):
            PriorSpec(bad, 1.0)
    with pytest.raises(ValueError):
        PriorSpec([0.5], -1.0)
    assert PriorSpec([0.5], 1).with_c(3).c == 3.0


def test_uniform_weights():
    np.testing.assert_array_equal(uniform_weights(3), [1, 1, 1])
    np.testing.assert_array_equal(uniform_weights(1), [1])
    with pytest.raises(ValueError):
        uniform_weights(0)


def test_doubled_weights():
    np.testing.assert_allclose(selection_probabilities(doubled_weight_spec({0}, 4)), [0.4, 0.2, 0.2, 0.2])
    np.testing.assert_allclose(selection_probabilities(doubled_weight_spec(set(), 5)), 0.2)
    probs = selection_probabilities(doubled_weight_spec({3, 7}, 200))
    assert probs[3] == pytest.approx(2 / 202)
    with pytest.raises(ValueError):
        doubled_weight_spec({4}, 4)


def test_doubled_weights_equal_indicator_prior_with_c_one():
    ind = np.zeros(6)
    ind[[1, 4]] = 1
    np.testing.assert_array_equal(compute_weights(PriorSpec(ind, 1.0)), doubled_weight_spec({1, 4}, 6))


def test_grid_is_the_six_point_grid():
    assert C_GRID == (0.0, 0.5, 1.0, 2.0, 4.0, 10000.0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(0.01, 100)), st.floats(0.01, 1000))
def test_scale_invariance(w, scale):
    X = np.random.default_rng(0).uniform(size=(25, 4))
    tree = DecisionTree.from_nested((1, X[3, 1], (3, X[7, 3], 0, 0), (0, X[2, 0], 0, 0)))
    hp = Hyperparams()
    a = log_tree_structure_prior(tree, X, hp, w)
    b = log_tree_structure_prior(tree, X, hp, w * scale)
    assert a == pytest.approx(b, abs=1e-12)
    np.testing.assert_allclose(selection_probabilities(w), selection_probabilities(w * scale), rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(0, 1)),
       st.floats(0, 100), st.floats(0.01, 100))
def test_monotone_in_c_above_weighted_mean(m, c, dc):
    p1 = selection_probabilities(compute_weights(PriorSpec(m, c)))
    p2 = selection_probabilities(compute_weights(PriorSpec(m, c + dc)))
    w1 = compute_weights(PriorSpec(m, c))
    weighted_mean = float(m @ w1 / w1.sum())
    for k in range(m.size):
        if m[k] > weighted_mean + 1e-9:
            assert p2[k] > p1[k]


def test_read_prior_file(tmp_path):
    path = tmp_path / "prior.csv"
    path.write_text("name,probability\nb,0.99\na,0.01\nc,0.5\n")
    np.testing.assert_allclose(read_prior_file(path, ["a", "b", "c"]), [0.01, 0.99, 0.5])
    np.testing.assert_allclose(read_prior_file(path, ["a", "b", "c"], clamp=True), [0.05, 0.95, 0.5])


def test_read_prior_file_tab_no_header(tmp_path):
    path = tmp_path / "prior.tsv"
    path.write_text("a\t0.2\nb\t0.3\n")
    np.testing.assert_allclose(read_prior_file(path, ["a", "b"]), [0.2, 0.3])


@pytest.mark.parametrize("body, msg", [
    ("a,0.1\nzz,0.2\n", "unknown variable"),
    ("a,0.1\n", "no prior probability"),
    ("a,0.1\nb,1.5\n", "outside"),
    ("a,0.1\nb,x\n", "non-numeric"),
    ("a,0.1\na,0.2\nb,0.1\n", "duplicate"),
    ("a,0.1,3\nb,0.2\n", "2 fields"),
])
def test_read_prior_file_errors(tmp_path, body, msg):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(ValueError, match=msg):
        read_prior_file(path, ["a", "b"])


def test_read_prior_file_default_for_missing(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("a,0.4\n")
    np.testing.assert_allclose(read_prior_file(path, ["a", "b"], default=0.0), [0.4, 0.0])
    assert math.isfinite(read_prior_file(path, ["a", "b"], default=0.0).sum())
