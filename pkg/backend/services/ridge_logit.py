# backend/services/ridge_logit.py
"""
L2-penalized logistic regression (damped Newton / IRLS) for propensity scores
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as slinalg
from scipy.special import expit, logit

from models.schemas import PropensityFit, ScalingRecord
from services.featurize import DesignMatrix
from utils.errors import DegenerateLabelsError, DimensionMismatchError, NumericalError, UsageError

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-8
DEFAULT_MAX_ITERATIONS = 100
# Newton systems up to this many unknowns are solved directly, larger ones by CG
DENSE_SOLVE_MAX_COLUMNS = 400
ARMIJO_FRACTION = 1e-4
MAX_STEP_HALVINGS = 50


@dataclass(frozen=True, eq=False)
class ScoreVector:
    """Estimated propensities aligned to design rows, plus the linear predictor used for ranking"""
    scores: np.ndarray
    linear_predictor: np.ndarray
    rows: np.ndarray


def effective_penalty(penalty: float, penalty_scale: str, total_weight: float) -> float:
    if penalty_scale == "per_observation":
        return penalty * total_weight
    return penalty


def _weights(weights: Optional[np.ndarray], n: int) -> np.ndarray:
    return np.ones(n) if weights is None else np.asarray(weights, dtype=float)


def penalized_objective(
    design: DesignMatrix,
    labels: np.ndarray,
    coefficients: np.ndarray,
    intercept: float,
    penalty: float,
    weights: Optional[np.ndarray] = None,
) -> float:
    """Weighted negative log-likelihood plus (penalty/2)*||coefficients||^2; intercept unpenalized"""
    w = _weights(weights, design.n_rows)
    eta = design.matvec(coefficients) + intercept
    nll = np.sum(w * (np.logaddexp(0.0, eta) - labels * eta))
    return float(nll + 0.5 * penalty * float(coefficients @ coefficients))


def penalized_gradient(
    design: DesignMatrix,
    labels: np.ndarray,
    coefficients: np.ndarray,
    intercept: float,
    penalty: float,
    weights: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, float]:
    w = _weights(weights, design.n_rows)
    eta = design.matvec(coefficients) + intercept
    residual = w * (expit(eta) - labels)
    return design.rmatvec(residual) + penalty * coefficients, float(residual.sum())


def _check_inputs(design: DesignMatrix, labels: np.ndarray, weights: np.ndarray, penalty: float) -> None:
    if penalty < 0:
        raise UsageError(f"penalty must be >= 0, got {penalty}")
    if design.n_rows < 2:
        raise DegenerateLabelsError(f"domain {design.domain_id}: need at least 2 design rows")
    if len(labels) != design.n_rows or len(weights) != design.n_rows:
        raise DimensionMismatchError("labels and weights must align with design rows")
    if not np.all(np.isfinite(design.matrix.data)) or (design.center is not None and not np.all(np.isfinite(design.center))):
        raise NumericalError(f"domain {design.domain_id}: non-finite feature values")
    positive = float(np.sum(weights * labels))
    negative = float(np.sum(weights * (1.0 - labels)))
    if positive <= 0 or negative <= 0:
        raise DegenerateLabelsError(f"domain {design.domain_id}: exposure labels are all one value")


class _NewtonSystem:
    """[X 1]^T H [X 1] + diag(penalty, ..., penalty, 0) for one Newton step"""

    def __init__(self, design: DesignMatrix, penalty: float):
        self.design = design
        self.penalty = penalty
        self.p = design.n_columns
        self.direct = self.p <= DENSE_SOLVE_MAX_COLUMNS
        if not self.direct:
            self.squares = design.matrix.multiply(design.matrix).T.tocsr()

    def solve(self, hessian_weights: np.ndarray, gradient: np.ndarray) -> np.ndarray:
        if self.direct:
            return self._solve_dense(hessian_weights, gradient)
        return self._solve_cg(hessian_weights, gradient)

    def gram(self, h: np.ndarray) -> np.ndarray:
        """[Z 1]^T H [Z 1] for Z = matrix - center, built from the sparse storage"""
        design, p = self.design, self.p
        matrix = design.matrix
        weighted = sp.diags(h) @ matrix
        cross = np.asarray((matrix.T @ weighted).toarray(), dtype=float)
        linear = np.asarray(matrix.T @ h, dtype=float).ravel()
        total = float(h.sum())
        if design.center is not None:
            center = design.center
            cross = cross - np.outer(center, linear) - np.outer(linear, center) + total * np.outer(center, center)
            linear = linear - center * total
        system = np.empty((p + 1, p + 1))
        system[:p, :p] = cross
        system[:p, p] = linear
        system[p, :p] = linear
        system[p, p] = total
        return system

    def _solve_dense(self, h: np.ndarray, gradient: np.ndarray) -> np.ndarray:
        system = self.gram(h)
        system[np.arange(self.p), np.arange(self.p)] += self.penalty
        try:
            return np.linalg.solve(system, -gradient)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(system, -gradient, rcond=None)[0]

    def _solve_cg(self, h: np.ndarray, gradient: np.ndarray) -> np.ndarray:
        design, p, penalty = self.design, self.p, self.penalty

        def matvec(vector):
            vector = np.asarray(vector, dtype=float).ravel()
            inner = h * (design.matvec(vector[:p]) + vector[p])
            return np.concatenate([design.rmatvec(inner) + penalty * vector[:p], [inner.sum()]])

        diagonal = np.asarray(self.squares @ h, dtype=float).ravel()
        if design.center is not None:
            linear = np.asarray(design.matrix.T @ h, dtype=float).ravel()
            diagonal = diagonal - 2.0 * design.center * linear + design.center ** 2 * h.sum()
        diagonal = np.concatenate([diagonal + penalty, [h.sum()]])
        diagonal = np.where(diagonal > 0, diagonal, 1.0)
        operator = slinalg.LinearOperator((p + 1, p + 1), matvec=matvec, dtype=float)
        preconditioner = slinalg.LinearOperator((p + 1, p + 1), matvec=lambda v: np.ravel(v) / diagonal, dtype=float)
        step, info = slinalg.cg(operator, -gradient, rtol=1e-10, maxiter=max(10 * (p + 1), 1000), M=preconditioner)
        if info < 0:
            raise NumericalError(f"domain {design.domain_id}: conjugate gradient breakdown")
        return step


def fit(
    design: DesignMatrix,
    labels: np.ndarray,
    penalty: float,
    weights: Optional[np.ndarray] = None,
    penalty_scale: str = "total",
    tolerance: float = DEFAULT_TOLERANCE,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    scaling: Optional[ScalingRecord] = None,
) -> PropensityFit:
    """
    Minimize NLL(beta) + (penalty/2)*||beta||^2 with an unpenalized intercept

    Args:
        design: rows x columns design (exposed and NECG rows of one domain)
        labels: 1 for exposed, 0 for NECG
        penalty: L2 penalty
        weights: optional nonnegative observation weights (bootstrap replicates)
        penalty_scale: "total" or "per_observation" (penalty times total weight)
        tolerance: stop when ||gradient|| <= tolerance * total weight
        max_iterations: cap on Newton iterations; converged=False when reached

    Returns:
        PropensityFit with convergence diagnostics
    """
    labels = np.asarray(labels, dtype=float)
    w = _weights(weights, design.n_rows)
    _check_inputs(design, labels, w, penalty)
    total_weight = float(w.sum())
    lam = effective_penalty(penalty, penalty_scale, total_weight)

    p = design.n_columns
    coefficients = np.zeros(p)
    intercept = float(logit(np.sum(w * labels) / total_weight))
    eta = design.matvec(coefficients) + intercept

    def objective_at(eta_values, coef):
        return float(np.sum(w * (np.logaddexp(0.0, eta_values) - labels * eta_values)) + 0.5 * lam * float(coef @ coef))

    objective = objective_at(eta, coefficients)
    history = [objective]
    system = _NewtonSystem(design, lam)
    converged = False
    iterations = 0
    gradient_norm = np.inf

    for iterations in range(max_iterations + 1):
        probabilities = expit(eta)
        residual = w * (probabilities - labels)
        gradient = np.concatenate([design.rmatvec(residual) + lam * coefficients, [residual.sum()]])
        gradient_norm = float(np.linalg.norm(gradient))
        if gradient_norm <= tolerance * total_weight:
            converged = True
            break
        if iterations == max_iterations:
            break

        step = system.solve(w * probabilities * (1.0 - probabilities), gradient)
        step_eta = design.matvec(step[:p]) + step[p]
        slope = float(gradient @ step)
        if slope >= 0:
            # not a descent direction (ill-conditioned solve); fall back to steepest descent
            step = -gradient
            step_eta = design.matvec(step[:p]) + step[p]
            slope = float(gradient @ step)

        size = 1.0
        for _ in range(MAX_STEP_HALVINGS):
            candidate = objective_at(eta + size * step_eta, coefficients + size * step[:p])
            if candidate <= objective + ARMIJO_FRACTION * size * slope:
                break
            size *= 0.5
        else:
            logger.debug(f"Domain {design.domain_id}: line search stalled at iteration {iterations}")
            break

        coefficients = coefficients + size * step[:p]
        intercept = intercept + size * float(step[p])
        eta = eta + size * step_eta
        objective = candidate
        history.append(objective)

    if not np.all(np.isfinite(coefficients)) or not np.isfinite(intercept):
        raise NumericalError(f"domain {design.domain_id}: solver produced non-finite coefficients")
    if not converged:
        logger.warning(
            f"Domain {design.domain_id}: ridge-logit did not converge after {iterations} iterations "
            f"(gradient norm {gradient_norm:.3e})"
        )

    return PropensityFit(
        domain_id=design.domain_id,
        columns=list(design.columns),
        coefficients=coefficients.tolist(),
        intercept=intercept,
        penalty=lam,
        iterations=iterations,
        converged=converged,
        gradient_norm=gradient_norm,
        objective_history=history,
        scaling=scaling,
    )


def predict_scores(fit_result: PropensityFit, design: DesignMatrix) -> ScoreVector:
    """Elementwise inverse-logit of intercept + X beta"""
    if list(design.columns) != list(fit_result.columns):
        raise DimensionMismatchError(
            f"design has {design.n_columns} columns but the fit expects {len(fit_result.columns)}"
        )
    eta = design.matvec(np.asarray(fit_result.coefficients, dtype=float)) + fit_result.intercept
    scores = np.clip(expit(eta), np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    return ScoreVector(scores=scores, linear_predictor=eta, rows=design.rows)
