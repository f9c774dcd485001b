#!/usr/bin/env python3
"""
Test the ridge-logit propensity solver
"""

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.special import expit, logit

from models.schemas import PropensityFit
from services import ridge_logit
from services.featurize import DesignMatrix
from utils.errors import DegenerateLabelsError, DimensionMismatchError, NumericalError, UsageError


def make_design(X, labels, center=None, domain_id="d0"):
    X = np.asarray(X, dtype=float)
    return DesignMatrix(
        matrix=sp.csr_matrix(X),
        columns=[f"x{j}" for j in range(X.shape[1])],
        rows=np.arange(X.shape[0]),
        labels=np.asarray(labels, dtype=float),
        domain_id=domain_id,
        center=center,
    )


def random_problem(rng, n, p, sparsity=0.3):
    X = rng.normal(size=(n, p)) * (rng.random((n, p)) < sparsity)
    truth = rng.normal(scale=0.5, size=p)
    labels = (rng.random(n) < expit(X @ truth - 0.5)).astype(float)
    labels[0], labels[1] = 1.0, 0.0
    return X, labels


def test_gradient_matches_finite_differences():
    """Penalized gradient vs central differences on 20 random problems"""
    rng = np.random.default_rng(11)
    step = 1e-6
    for trial in range(20):
        n = int(rng.integers(20, 201))
        p = int(rng.integers(1, 51))
        X, labels = random_problem(rng, n, p)
        center = rng.normal(scale=0.1, size=p) if trial % 2 else None
        design = make_design(X, labels, center)
        weights = rng.uniform(0.5, 2.0, size=n)
        beta = rng.normal(scale=0.3, size=p)
        intercept = float(rng.normal())
        penalty = float(rng.uniform(0.0, 5.0))

        grad, grad_intercept = ridge_logit.penalized_gradient(design, labels, beta, intercept, penalty, weights)
        numeric = np.zeros(p)
        for j in range(p):
            shift = np.zeros(p)
            shift[j] = step
            plus = ridge_logit.penalized_objective(design, labels, beta + shift, intercept, penalty, weights)
            minus = ridge_logit.penalized_objective(design, labels, beta - shift, intercept, penalty, weights)
            numeric[j] = (plus - minus) / (2 * step)
        numeric_intercept = (
            ridge_logit.penalized_objective(design, labels, beta, intercept + step, penalty, weights)
            - ridge_logit.penalized_objective(design, labels, beta, intercept - step, penalty, weights)
        ) / (2 * step)

        analytic = np.concatenate([grad, [grad_intercept]])
        finite = np.concatenate([numeric, [numeric_intercept]])
        relative = np.linalg.norm(analytic - finite) / max(np.linalg.norm(analytic), 1.0)
        assert relative < 1e-5


def test_large_penalty_recovers_null_model():
    rng = np.random.default_rng(3)
    X, labels = random_problem(rng, 150, 12)
    fit = ridge_logit.fit(make_design(X, labels), labels, penalty=1e12)
    assert fit.converged
    assert np.max(np.abs(fit.coefficients)) < 1e-6
    assert fit.intercept == pytest.approx(float(logit(labels.mean())), abs=1e-6)


def _newton_reference(x, labels):
    """Two-parameter Newton iteration for the unpenalized logistic MLE"""
    a, b = 0.0, 0.0
    for _ in range(100):
        p = expit(a + b * x)
        gradient = np.array([np.sum(p - labels), np.sum((p - labels) * x)])
        h = p * (1 - p)
        hessian = np.array([[h.sum(), np.sum(h * x)], [np.sum(h * x), np.sum(h * x * x)]])
        delta = np.linalg.solve(hessian, gradient)
        a, b = a - delta[0], b - delta[1]
        if np.max(np.abs(delta)) < 1e-14:
            break
    return a, b


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_univariate_fit_matches_newton_reference(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=300)
    labels = (rng.random(300) < expit(0.4 + 1.1 * x)).astype(float)
    fit = ridge_logit.fit(make_design(x[:, np.newaxis], labels), labels, penalty=0.0)
    a, b = _newton_reference(x, labels)
    assert fit.converged
    assert fit.intercept == pytest.approx(a, abs=1e-6)
    assert fit.coefficients[0] == pytest.approx(b, abs=1e-6)


def test_objective_history_is_nonincreasing():
    rng = np.random.default_rng(5)
    X, labels = random_problem(rng, 200, 30)
    fit = ridge_logit.fit(make_design(X, labels), labels, penalty=0.5)
    history = np.array(fit.objective_history)
    assert np.all(np.diff(history) <= 1e-9 * np.abs(history[:-1]))
    assert fit.iterations == len(history) - 1


def test_conjugate_gradient_path_matches_direct_solve(monkeypatch):
    rng = np.random.default_rng(8)
    X, labels = random_problem(rng, 180, 25)
    center = X.mean(axis=0)
    direct = ridge_logit.fit(make_design(X, labels, center), labels, penalty=1.0)
    monkeypatch.setattr(ridge_logit, "DENSE_SOLVE_MAX_COLUMNS", 0)
    iterative = ridge_logit.fit(make_design(X, labels, center), labels, penalty=1.0)
    assert iterative.converged
    np.testing.assert_allclose(iterative.coefficients, direct.coefficients, atol=1e-6)
    assert iterative.intercept == pytest.approx(direct.intercept, abs=1e-6)


def test_implicit_centering_matches_explicit_centering():
    rng = np.random.default_rng(9)
    X, labels = random_problem(rng, 160, 10)
    center = X.mean(axis=0)
    implicit = ridge_logit.fit(make_design(X, labels, center), labels, penalty=2.0)
    explicit = ridge_logit.fit(make_design(X - center, labels), labels, penalty=2.0)
    np.testing.assert_allclose(implicit.coefficients, explicit.coefficients, atol=1e-7)
    assert implicit.intercept == pytest.approx(explicit.intercept, abs=1e-7)


def test_integer_weights_match_duplicated_rows():
    rng = np.random.default_rng(12)
    X, labels = random_problem(rng, 80, 6)
    weights = rng.integers(0, 3, size=80).astype(float)
    weights[:2] = 1.0
    weighted = ridge_logit.fit(make_design(X, labels), labels, penalty=0.7, weights=weights)
    repeat = np.repeat(np.arange(80), weights.astype(int))
    duplicated = ridge_logit.fit(make_design(X[repeat], labels[repeat]), labels[repeat], penalty=0.7)
    np.testing.assert_allclose(weighted.coefficients, duplicated.coefficients, atol=1e-7)
    assert weighted.intercept == pytest.approx(duplicated.intercept, abs=1e-7)


def test_per_observation_penalty_scales_with_total_weight():
    rng = np.random.default_rng(13)
    X, labels = random_problem(rng, 100, 4)
    fit = ridge_logit.fit(make_design(X, labels), labels, penalty=0.01, penalty_scale="per_observation")
    assert fit.penalty == pytest.approx(1.0)


def test_degenerate_labels_are_rejected():
    X = np.ones((5, 2))
    with pytest.raises(DegenerateLabelsError):
        ridge_logit.fit(make_design(X, np.ones(5)), np.ones(5), penalty=1.0)
    with pytest.raises(DegenerateLabelsError):
        ridge_logit.fit(make_design(X, np.zeros(5)), np.zeros(5), penalty=1.0)


def test_invalid_inputs():
    X = np.array([[0.0], [1.0], [2.0]])
    labels = np.array([0.0, 1.0, 1.0])
    with pytest.raises(UsageError):
        ridge_logit.fit(make_design(X, labels), labels, penalty=-1.0)
    with pytest.raises(DimensionMismatchError):
        ridge_logit.fit(make_design(X, labels), labels[:2], penalty=1.0)
    bad = np.array([[0.0], [np.inf], [2.0]])
    with pytest.raises(NumericalError):
        ridge_logit.fit(make_design(bad, labels), labels, penalty=1.0)


def test_zero_coefficients_score_one_half():
    design = make_design(np.arange(8, dtype=float).reshape(4, 2), [0, 1, 0, 1])
    fit = PropensityFit(columns=design.columns, coefficients=[0.0, 0.0], intercept=0.0, penalty=1.0,
                        iterations=0, converged=True, gradient_norm=0.0)
    scores = ridge_logit.predict_scores(fit, design)
    np.testing.assert_array_equal(scores.scores, np.full(4, 0.5))
    np.testing.assert_array_equal(scores.rows, design.rows)


def test_scores_stay_inside_unit_interval():
    design = make_design(np.array([[-1000.0], [1000.0]]), [0, 1])
    fit = PropensityFit(columns=design.columns, coefficients=[1.0], intercept=0.0, penalty=1.0,
                        iterations=0, converged=True, gradient_norm=0.0)
    scores = ridge_logit.predict_scores(fit, design).scores
    assert np.all(scores > 0.0) and np.all(scores < 1.0)


def test_predict_rejects_mismatched_columns():
    design = make_design(np.ones((3, 2)), [0, 1, 1])
    fit = PropensityFit(columns=["x0"], coefficients=[0.0], intercept=0.0, penalty=1.0,
                        iterations=0, converged=True, gradient_norm=0.0)
    with pytest.raises(DimensionMismatchError):
        ridge_logit.predict_scores(fit, design)


def test_products_and_gradient_match_dense_arithmetic():
    """100x20 design: sparse products and the penalized gradient against plain numpy"""
    rng = np.random.default_rng(31)
    X, labels = random_problem(rng, 100, 20)
    center = X.mean(axis=0)
    design = make_design(X, labels, center)
    Z = X - center
    beta = rng.normal(scale=0.4, size=20)
    residual = rng.normal(size=100)
    np.testing.assert_allclose(design.matvec(beta), Z @ beta, atol=1e-12)
    np.testing.assert_allclose(design.rmatvec(residual), Z.T @ residual, atol=1e-12)

    weights = rng.uniform(0.5, 2.0, size=100)
    grad, grad_intercept = ridge_logit.penalized_gradient(design, labels, beta, 0.3, 2.5, weights)
    expected = weights * (expit(Z @ beta + 0.3) - labels)
    np.testing.assert_allclose(grad, Z.T @ expected + 2.5 * beta, atol=1e-12)
    assert grad_intercept == pytest.approx(expected.sum(), abs=1e-12)


def test_newton_system_is_built_without_densifying():
    rng = np.random.default_rng(32)
    X, labels = random_problem(rng, 120, 15)
    h = rng.uniform(0.01, 0.25, size=120)
    for center in (None, X.mean(axis=0)):
        design = make_design(X, labels, center)
        augmented = np.column_stack([design.to_dense(), np.ones(120)])
        system = ridge_logit._NewtonSystem(design, 1.0).gram(h)
        np.testing.assert_allclose(system, augmented.T @ (h[:, np.newaxis] * augmented), rtol=1e-10, atol=1e-10)


def test_scores_follow_a_row_permutation():
    rng = np.random.default_rng(33)
    X, labels = random_problem(rng, 150, 8)
    design = make_design(X, labels, X.mean(axis=0))
    order = rng.permutation(150)
    shuffled = design.take_rows(order)
    np.testing.assert_array_equal(shuffled.labels, design.labels[order])

    fit = ridge_logit.fit(design, design.labels, penalty=1.0)
    refit = ridge_logit.fit(shuffled, shuffled.labels, penalty=1.0)
    np.testing.assert_allclose(refit.coefficients, fit.coefficients, atol=1e-6)
    scores = ridge_logit.predict_scores(fit, design)
    permuted = ridge_logit.predict_scores(refit, shuffled)
    np.testing.assert_allclose(permuted.scores, scores.scores[order], rtol=1e-6)
    np.testing.assert_array_equal(permuted.rows, scores.rows[order])
