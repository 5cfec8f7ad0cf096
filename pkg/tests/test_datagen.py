import math

import numpy as np
import pytest

from bartvs.datagen import (
    FRIEDMAN, LINEAR, NULL, ScenarioSpec, friedman_mean, gen_friedman, gen_linear, gen_null,
    linear_mean,
)
from bartvs.model import read_dataset, write_dataset


def test_null_shape_and_reproducibility():
    a, b = gen_null(250, 40, 3), gen_null(250, 40, 3)
    assert (a.n, a.K) == (250, 40)
    np.testing.assert_array_equal(a.predictors, b.predictors)
    np.testing.assert_array_equal(a.response, b.response)
    assert not np.array_equal(a.predictors, gen_null(250, 40, 4).predictors)


def test_null_column_means_within_clt_bound():
    ds = gen_null(250, 40, 1)
    assert np.all(np.abs(ds.predictors.mean(axis=0)) < 4 / math.sqrt(250))
    assert abs(ds.response.mean()) < 4 / math.sqrt(250)


def test_linear_beta_and_true_set():
    ds, true = gen_linear(50, 5, 2, 0.0, 0)
    assert true == {0, 1}
    np.testing.assert_allclose(ds.response, ds.predictors @ [1, 1, 0, 0, 0], atol=1e-12)


def test_linear_noiseless_single_true_variable():
    ds, _ = gen_linear(30, 4, 1, 0.0, 2)
    np.testing.assert_array_equal(ds.response, ds.predictors[:, 0])


def test_linear_least_squares_recovers_beta():
    ds, _ = gen_linear(1000, 6, 3, 1.0, 5)
    A = np.column_stack([np.ones(1000), ds.predictors])
    coef = np.linalg.lstsq(A, ds.response, rcond=None)[0][1:]
    np.testing.assert_allclose(coef, [1, 1, 1, 0, 0, 0], atol=0.1)


def test_friedman_hand_values():
    X = np.vstack([np.full(7, 0.5), np.zeros(7)])
    np.testing.assert_allclose(friedman_mean(X), [10 * math.sin(math.pi / 4) + 7.5, 5.0], atol=1e-12)
    assert friedman_mean(X)[0] == pytest.approx(14.5711, abs=1e-4)


def test_friedman_noiseless_and_inactive_columns():
    ds, true = gen_friedman(100, 10, 0.0, 8)
    assert true == set(range(5))
    assert ds.predictors.min() >= 0 and ds.predictors.max() < 1
    np.testing.assert_allclose(ds.response, friedman_mean(ds.predictors), atol=1e-12)
    X = ds.predictors.copy()
    X[:, 5:] = np.random.default_rng(0).uniform(size=(100, 5))
    np.testing.assert_array_equal(friedman_mean(X), friedman_mean(ds.predictors))


def test_true_set_contract_linear():
    ds, _ = gen_linear(40, 6, 2, 1.0, 1)
    X = ds.predictors.copy()
    X[:, 4] += 10.0
    np.testing.assert_array_equal(linear_mean(X, 2), linear_mean(ds.predictors, 2))


def test_scenario_spec_validation_and_generate():
    with pytest.raises(ValueError):
        ScenarioSpec(NULL, p=5, p0=1)
    with pytest.raises(ValueError):
        ScenarioSpec(FRIEDMAN, p=4, p0=5)
    with pytest.raises(ValueError):
        ScenarioSpec(FRIEDMAN, p=10, p0=3)
    with pytest.raises(ValueError):
        ScenarioSpec(LINEAR, p=3, p0=4)
    with pytest.raises(ValueError):
        ScenarioSpec("other")
    spec = ScenarioSpec(LINEAR, n=30, p=8, p0=2, sigma_sq=1.0, seed=4)
    (a, ta), (b, tb) = spec.generate(), spec.generate()
    assert ta == tb == spec.true_set == {0, 1}
    np.testing.assert_array_equal(a.response, b.response)
    assert spec.n == 30 and ScenarioSpec(NULL).n == 250


def test_generated_data_roundtrips_through_csv(tmp_path):
    ds, _ = gen_friedman(20, 6, 5.0, 2)
    write_dataset(ds, tmp_path / "f.csv")
    back = read_dataset(tmp_path / "f.csv", "y")
    np.testing.assert_array_equal(back.predictors, ds.predictors)
    np.testing.assert_array_equal(back.response, ds.response)
