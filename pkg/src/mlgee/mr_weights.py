"""Empirical-likelihood calibration weights over candidate model sets.

Given K individual-level and L group-level candidate observation models, the
multiply robust weights maximize the product of per-observed-unit weights
subject to normalization and to K*L moment constraints: the weighted average
of each candidate probability product must equal its population average over
all units.  The Lagrange-dual reduces this to an unconstrained convex
minimization in a K*L multiplier; the weights follow in closed form.

A second, rescaled version of the same program yields the empirical
probabilities of the observed sample; the two solutions are linked by an
exact algebraic identity that serves as a cross-check of both solvers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data_model import ClusteredDataset, MissingnessSummary
from .exceptions import NoInteriorSolution
from .propensity import MomentTargets, PropensityModelSet, probability_matrices

GRAD_TOL = 1e-9
MAX_NEWTON_ITER = 200
FEASIBILITY_MARGIN = 1e-12
RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class ConstraintVectors:
    """Stacked constraint evaluations for the observed units.

    ``values[i, (k, l)]`` is the k-th individual-level probability times the
    l-th group-level probability minus the corresponding target, flattened
    row-major over (k, l).  By construction the mean over ALL units of each
    product equals its target, so the population-level residual is zero.
    """

    values: np.ndarray            # (n_observed, K*L)
    targets: MomentTargets
    n_individual: int
    n_cluster: int
    observed_products: np.ndarray  # (n_observed, K*L) raw probability products

    @property
    def pair_order(self) -> tuple:
        return tuple((k, l)
                     for k in range(self.n_individual)
                     for l in range(self.n_cluster))


def constraint_vectors(model_set: PropensityModelSet, targets: MomentTargets,
                       ds: ClusteredDataset,
                       ms: MissingnessSummary) -> ConstraintVectors:
    """Build the per-observed-unit constraint vectors."""
    phi, lam = probability_matrices(model_set, ds)
    obs = ms.unit_observed == 1
    products = phi[obs][:, :, None] * lam[obs][:, None, :]
    products = products.reshape(obs.sum(), -1)
    values = products - targets.values.reshape(1, -1)
    return ConstraintVectors(
        values=values,
        targets=targets,
        n_individual=model_set.n_individual,
        n_cluster=model_set.n_cluster,
        observed_products=products,
    )


def _independent_columns(G: np.ndarray) -> np.ndarray:
    """Indices of a maximal linearly independent column subset of G."""
    if G.shape[1] == 1:
        return np.array([0]) if np.linalg.norm(G[:, 0]) > 0 else np.array([], int)
    from scipy.linalg import qr

    _, R, piv = qr(G, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return np.array([], dtype=int)
    keep = diag > RANK_TOL * diag[0]
    return np.sort(piv[: int(keep.sum())])


def _newton_step(G, x, t, obj):
    inv_t = 1.0 / t
    grad = -G.T @ inv_t
    H = (G * (inv_t * inv_t)[:, None]).T @ G
    try:
        step = np.linalg.solve(H, -grad)
    except np.linalg.LinAlgError:
        step = np.linalg.lstsq(H, -grad, rcond=None)[0]
    scale = 1.0
    for _ in range(60):
        cand = x + scale * step
        t_cand = 1.0 + G @ cand
        if np.min(t_cand) > FEASIBILITY_MARGIN:
            obj_cand = -np.sum(np.log(t_cand))
            if obj_cand <= obj + 1e-14 * abs(obj):
                return cand, t_cand, obj_cand, grad
        scale *= 0.5
    return None, None, None, grad


def _newton_el(G: np.ndarray, grad_tol: float = GRAD_TOL,
               max_iter: int = MAX_NEWTON_ITER):
    """Minimize -sum log(1 + G @ x) over the region where all arguments stay
    positive.  Returns (x, objective_trace).  Raises NoInteriorSolution when
    no interior stationary point exists or can be reached.
    """
    n, d = G.shape
    x = np.zeros(d)
    t = np.ones(n)          # 1 + G @ x
    obj = 0.0               # -sum log t at x = 0
    trace = [obj]
    converged = False
    for _ in range(max_iter):
        if np.max(np.abs(-G.T @ (1.0 / t))) < grad_tol:
            converged = True
            break
        cand, t_cand, obj_cand, _ = _newton_step(G, x, t, obj)
        if cand is None:
            raise NoInteriorSolution(
                "line search stalled at the feasibility boundary",
                boundary_margin=float(np.min(t)),
            )
        x, t, obj = cand, t_cand, obj_cand
        trace.append(obj)
    if not converged:
        raise NoInteriorSolution(
            f"convex minimization did not reach gradient tolerance "
            f"{grad_tol} in {max_iter} iterations",
            boundary_margin=float(np.min(t)),
        )
    # polish: full Newton steps judged on the gradient norm push it to the
    # float noise floor, which the normalization identity of the weights
    # needs (the weight-sum error is x' grad / n)
    for _ in range(5):
        grad_now = -G.T @ (1.0 / t)
        gnorm = np.max(np.abs(grad_now))
        if gnorm < 1e-14:
            break
        H = (G * ((1.0 / t) ** 2)[:, None]).T @ G
        try:
            step = np.linalg.solve(H, -grad_now)
        except np.linalg.LinAlgError:
            break
        t_cand = 1.0 + G @ (x + step)
        if np.min(t_cand) <= FEASIBILITY_MARGIN:
            break
        if np.max(np.abs(-G.T @ (1.0 / t_cand))) >= gnorm:
            break
        x = x + step
        t = t_cand
        trace.append(-np.sum(np.log(t)))
    # at an interior stationary point, sum 1/(1 + G x) equals the row count
    # exactly; a vanishing gradient "at infinity" (target outside the convex
    # hull of the constraints) fails this identity
    total = float(np.sum(1.0 / t))
    if abs(total / n - 1.0) > 1e-6:
        raise NoInteriorSolution(
            "stationarity reached only in the limit: the calibration "
            "target lies outside the convex hull of the observed values",
            boundary_margin=float(np.min(t)),
        )
    return x, trace


def _solve_el(G_full: np.ndarray):
    """EL inner solver with rank-deficiency handling.

    Returns (multiplier, dropped_column_indices, objective_trace); dependent
    constraint columns get zero multiplier entries.
    """
    d = G_full.shape[1]
    scale = np.max(np.abs(G_full), axis=0)
    zero_cols = scale == 0.0
    if zero_cols.all():
        return np.zeros(d), tuple(), [0.0]
    keep = _independent_columns(G_full[:, ~zero_cols])
    keep_idx = np.nonzero(~zero_cols)[0][keep]
    dropped = tuple(int(j) for j in range(d) if j not in set(keep_idx.tolist()))
    x_sub, trace = _newton_el(G_full[:, keep_idx])
    x = np.zeros(d)
    x[keep_idx] = x_sub
    return x, dropped, trace


def solve_multiplier(cv: ConstraintVectors, n_observed: int):
    """Solve for the Lagrange multiplier of the weight program.

    The stationarity condition of the convex objective is exactly the
    estimating equation sum_i g_i / (1 + rho' g_i) = 0, so the returned
    multiplier satisfies it to the gradient tolerance.  Returns
    ``(multiplier, dropped_constraints)``.
    """
    if cv.values.shape[0] == 0:
        raise NoInteriorSolution("no observed units")
    if cv.values.shape[0] != n_observed:
        raise ValueError("n_observed does not match constraint rows")
    multiplier, dropped, _ = _solve_el(cv.values)
    return multiplier, dropped


def calibrated_weights(multiplier: np.ndarray, cv: ConstraintVectors,
                       n_observed: int) -> np.ndarray:
    """Closed-form weights from the multiplier: 1/((1 + rho' g) * n_obs)."""
    t = 1.0 + cv.values @ multiplier
    if np.min(t) <= 0:
        raise NoInteriorSolution("multiplier is not interior feasible",
                                 boundary_margin=float(np.min(t)))
    return 1.0 / (t * n_observed)


def solve_conditional_probabilities(cv: ConstraintVectors,
                                    base_products: np.ndarray,
                                    n_observed: int):
    """Empirical probabilities of the observed sample (the rescaled program).

    ``base_products`` are the per-observed-unit probability products of the
    designated first model pair; the constraints are the original ones
    divided elementwise by them.  Returns ``(probabilities, multiplier)``.
    """
    base = np.asarray(base_products, dtype=np.float64)
    if base.shape[0] != cv.values.shape[0]:
        raise ValueError("base products do not align with constraint rows")
    H = cv.values / base[:, None]
    eps, _, _ = _solve_el(H)
    t = 1.0 + H @ eps
    probs = 1.0 / (t * n_observed)
    return probs, eps


def multiplier_from_dual(eps: np.ndarray, target_11: float) -> np.ndarray:
    """Map the dual multiplier back to the weight-program multiplier.

    The first component maps as (eps_11 + 1)/target and every other one as
    eps/target, an exact algebraic correspondence between the two programs.
    """
    rho = np.asarray(eps, dtype=np.float64) / target_11
    rho = rho.copy()
    rho[0] = (eps[0] + 1.0) / target_11
    return rho


@dataclass(frozen=True, eq=False)
class MRWeightSolution:
    """Multiplier, weights, and diagnostics of the calibration solve."""

    multiplier: np.ndarray          # (K*L,)
    weights: np.ndarray             # per observed unit, sums to 1
    objective_trace: tuple
    dropped_constraints: tuple
    boundary_margin: float          # min over units of 1 + rho' g
    dual_probabilities: Optional[np.ndarray] = None
    dual_multiplier: Optional[np.ndarray] = None

    def constraint_residuals(self, cv: ConstraintVectors) -> np.ndarray:
        """Weighted moment-constraint residuals, one per (k, l) pair."""
        return self.weights @ cv.observed_products - cv.targets.values.ravel()


def solve_mr_weights(model_set: PropensityModelSet, ds: ClusteredDataset,
                     ms: MissingnessSummary, *, targets=None,
                     include_dual: bool = False) -> "tuple":
    """End-to-end calibration: targets, constraints, multiplier, weights.

    Returns ``(solution, cv)`` so callers can audit the constraint system.
    """
    from .propensity import moment_targets

    if targets is None:
        targets = moment_targets(model_set, ds)
    cv = constraint_vectors(model_set, targets, ds, ms)
    n_obs = cv.values.shape[0]
    multiplier, dropped, trace = _solve_el(cv.values)
    weights = calibrated_weights(multiplier, cv, n_obs)
    margin = float(np.min(1.0 + cv.values @ multiplier))
    dual_probs = dual_eps = None
    if include_dual:
        dual_probs, dual_eps = solve_conditional_probabilities(
            cv, cv.observed_products[:, 0], n_obs)
    solution = MRWeightSolution(
        multiplier=multiplier,
        weights=weights,
        objective_trace=tuple(trace),
        dropped_constraints=dropped,
        boundary_margin=margin,
        dual_probabilities=dual_probs,
        dual_multiplier=dual_eps,
    )
    return solution, cv
