import math

import numpy as np
import pytest
from scipy.optimize import minimize

from mlgee.data_model import Level
from mlgee.exceptions import DimensionMismatch, Separation
from mlgee.formulas import parse_formula
from mlgee.propensity import (
    MomentTargets,
    PropensityFit,
    PropensityModelSet,
    evaluate_ps,
    expit,
    fit_logistic,
    moment_targets,
    probability_matrices,
    unit_probabilities,
)

from conftest import make_two_level


def logit(p):
    return math.log(p / (1.0 - p))


def test_intercept_only_symmetric():
    X = np.ones((4, 1))
    fit = fit_logistic(X, np.array([1.0, 1.0, 0.0, 0.0]))
    assert fit.converged
    assert abs(fit.coefficients[0]) < 1e-9


def test_two_group_saturated():
    X = np.column_stack([np.ones(8), np.repeat([0.0, 1.0], 4)])
    y = np.array([0, 0, 0, 1, 1, 1, 1, 0], dtype=float)   # means .25 and .75
    fit = fit_logistic(X, y)
    np.testing.assert_allclose(
        fit.coefficients, [logit(0.25), logit(0.75) - logit(0.25)], atol=1e-8)


def negative_loglik(beta, X, y, w):
    p = np.clip(expit(X @ beta), 1e-12, 1 - 1e-12)
    return -np.sum(w * (y * np.log(p) + (1 - y) * np.log(1 - p)))


def test_against_direct_maximization(rng):
    # independent oracle: derivative-free maximization of the likelihood
    for _ in range(20):
        n = 50
        X = np.column_stack([np.ones(n), rng.normal(size=n),
                             rng.integers(0, 2, n).astype(float)])
        truth = rng.normal(scale=0.8, size=3)
        y = (rng.random(n) < expit(X @ truth)).astype(float)
        w = np.ones(n)
        fit = fit_logistic(X, y)
        res = minimize(negative_loglik, fit.coefficients + 0.05,
                       args=(X, y, w), method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-12,
                                "maxiter": 20000})
        np.testing.assert_allclose(fit.coefficients, res.x, atol=1e-6)


def test_score_below_tolerance_and_permutation_invariance(rng):
    n = 80
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = (rng.random(n) < 0.6).astype(float)
    fit = fit_logistic(X, y)
    p = expit(X @ fit.coefficients)
    score = X.T @ (y - p)
    assert np.max(np.abs(score)) < 1e-8

    perm = rng.permutation(n)
    fit2 = fit_logistic(X[perm], y[perm])
    np.testing.assert_allclose(fit.coefficients, fit2.coefficients, atol=1e-9)


def test_fractional_response_equals_expanded_rows(rng):
    n = 30
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = rng.random(n)                     # fractional responses
    fit_frac = fit_logistic(X, y)
    X2 = np.vstack([X, X])
    y2 = np.concatenate([np.ones(n), np.zeros(n)])
    w2 = np.concatenate([y, 1.0 - y])
    fit_split = fit_logistic(X2, y2, weights=w2)
    np.testing.assert_allclose(fit_frac.coefficients, fit_split.coefficients,
                               atol=1e-9)


def test_separation_raises():
    X = np.column_stack([np.ones(6), np.arange(6.0)])
    y = np.array([0, 0, 0, 1, 1, 1], dtype=float)   # perfectly separated
    with pytest.raises(Separation):
        fit_logistic(X, y)


def test_evaluate_ps_cases():
    fit = PropensityFit(None, np.zeros(2), True, 0, 0.0)
    X = np.column_stack([np.ones(3), np.arange(3.0)])
    np.testing.assert_allclose(evaluate_ps(fit, X), 0.5)

    fit8 = PropensityFit(None, np.array([logit(0.8)]), True, 0, 0.0)
    np.testing.assert_allclose(evaluate_ps(fit8, np.ones((4, 1))), 0.8)

    big = PropensityFit(None, np.array([40.0]), True, 0, 0.0)
    p = evaluate_ps(big, np.ones((1, 1)))
    assert p[0] == 1.0 - 1e-10

    with pytest.raises(DimensionMismatch):
        evaluate_ps(fit, np.ones((2, 3)))


@pytest.fixture
def three_cluster_ds():
    return make_two_level([
        (0, [1.0, None], {"z1": 0.4, "x1": [0.3, -1.2]}),
        (1, [2.0, 3.0], {"z1": -0.8, "x1": [0.5, 0.1]}),
        (1, [None, None], {"z1": 1.5, "x1": [-0.6, 0.9]}),
    ])


def constant_fit(level_formula, p):
    return PropensityFit(level_formula, np.array([logit(p)]), True, 0, 0.0)


def test_moment_targets_constant(three_cluster_ds):
    unit_f = parse_formula("R ~ 1", Level.INDIVIDUAL)
    group_f = parse_formula("C ~ 1", Level.CLUSTER)
    model_set = PropensityModelSet(
        (constant_fit(unit_f, 0.5),), (constant_fit(group_f, 0.8),))
    targets = moment_targets(model_set, three_cluster_ds)
    np.testing.assert_allclose(targets.values, [[0.4]], atol=1e-12)


def test_moment_targets_reduction_when_unit_model_is_one(three_cluster_ds):
    unit_f = parse_formula("R ~ 1", Level.INDIVIDUAL)
    group_f = parse_formula("C ~ 1 + z1", Level.CLUSTER)
    saturating = PropensityFit(unit_f, np.array([60.0]), True, 0, 0.0)
    lam_fit = PropensityFit(group_f, np.array([0.3, -0.7]), True, 0, 0.0)
    model_set = PropensityModelSet(
        (constant_fit(unit_f, 0.5), saturating), (lam_fit,))
    targets = moment_targets(model_set, three_cluster_ds)
    lam_unit = unit_probabilities(lam_fit, three_cluster_ds)
    # second unit-level model is ~1 everywhere, so the target is mean(lambda)
    np.testing.assert_allclose(targets.values[1, 0], lam_unit.mean(),
                               rtol=1e-8)
    assert np.all((targets.values > 0) & (targets.values < 1))


def test_moment_targets_match_naive_double_sum(rng, three_cluster_ds):
    ds = three_cluster_ds
    unit_f = parse_formula("R ~ 1 + A + x1", Level.INDIVIDUAL)
    group_f = parse_formula("C ~ 1 + z1", Level.CLUSTER)
    unit_fit = PropensityFit(unit_f, rng.normal(size=3), True, 0, 0.0)
    group_fit = PropensityFit(group_f, rng.normal(size=2), True, 0, 0.0)
    model_set = PropensityModelSet((unit_fit,), (group_fit,))
    targets = moment_targets(model_set, ds)

    phi, lam = probability_matrices(model_set, ds)
    total = 0.0
    for i in range(ds.n_units):
        total += phi[i, 0] * lam[i, 0]
    np.testing.assert_allclose(targets.values[0, 0], total / ds.n_units,
                               rtol=1e-12)
