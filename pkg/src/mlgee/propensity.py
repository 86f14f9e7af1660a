"""Logistic observation-probability models and calibration moment targets.

Fits are plain maximum likelihood by Newton-Raphson with step-halving.
Responses may be fractional in [0, 1] and rows may carry nonnegative case
weights; both are needed by the misclassification-correcting EM, whose
maximization step reduces to exactly such weighted fits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data_model import ClusteredDataset, Level
from .exceptions import (
    DimensionMismatch,
    NotConverged,
    Separation,
    SingularInformation,
)
from .formulas import DesignMatrix, Formula, build_design_matrix

PROB_FLOOR = 1e-10
PROB_CEIL = 1.0 - 1e-10
SCORE_TOL = 1e-8
MAX_ITER = 100
COEF_BOUND = 30.0


def expit(x) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def clamp_probabilities(p: np.ndarray) -> np.ndarray:
    """Bound probabilities away from 0 and 1 before weighting by inverses."""
    return np.clip(p, PROB_FLOOR, PROB_CEIL)


@dataclass(frozen=True)
class PropensityFit:
    """A fitted logistic observation-probability model."""

    formula: Optional[Formula]
    coefficients: np.ndarray
    converged: bool
    iterations: int
    loglik: float

    @property
    def n_parameters(self) -> int:
        return self.coefficients.shape[0]


@dataclass(frozen=True)
class PropensityModelSet:
    """Candidate model sets: individual-level fits and (sub)cluster-level fits."""

    individual_models: tuple   # K fits, evaluated per unit
    cluster_models: tuple      # L fits, evaluated per (sub)cluster

    @property
    def n_individual(self) -> int:
        return len(self.individual_models)

    @property
    def n_cluster(self) -> int:
        return len(self.cluster_models)


@dataclass(frozen=True, eq=False)
class MomentTargets:
    """Population-average products of candidate model probabilities.

    Entry (k, l) averages, over every unit in the data (missing or not), the
    k-th individual-level probability times the l-th group-level probability.
    These are the calibration targets of the multiply robust constraints.
    """

    values: np.ndarray  # (K, L)


def _loglik(y, p, w):
    # y may be fractional; p is kept strictly inside (0, 1)
    return float(np.sum(w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def fit_logistic(X, y, weights=None, *, tol=SCORE_TOL, max_iter=MAX_ITER,
                 coef_bound=COEF_BOUND, start=None) -> PropensityFit:
    """Weighted Bernoulli maximum likelihood with a logit link.

    Parameters
    ----------
    X : DesignMatrix or ndarray of shape (n, p)
    y : responses in [0, 1]; fractional values are allowed.
    weights : optional nonnegative case weights, default all ones.
    start : optional warm-start coefficients (default: zeros).

    Newton-Raphson with step-halving: the step shrinks until the
    log-likelihood does not decrease.  Converged when the score max-norm
    drops below ``tol``; any coefficient passing ``coef_bound`` during
    iteration raises :class:`Separation`.
    """
    formula = X.formula if isinstance(X, DesignMatrix) else None
    Xv = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=np.float64)
    if Xv.ndim != 2:
        raise DimensionMismatch("design must be two-dimensional")
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != Xv.shape[0]:
        raise DimensionMismatch(
            f"{Xv.shape[0]} design rows but {y.shape[0]} responses"
        )
    if np.any((y < 0) | (y > 1)):
        raise ValueError("responses must lie in [0, 1]")
    if weights is None:
        w = np.ones_like(y)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape[0] != y.shape[0]:
            raise DimensionMismatch("weights length does not match responses")
        if np.any(w < 0):
            raise ValueError("case weights must be nonnegative")

    n, p = Xv.shape
    beta = np.zeros(p) if start is None else np.asarray(start, dtype=np.float64).copy()
    prob = clamp_probabilities(expit(Xv @ beta))
    ll = _loglik(y, prob, w)
    # per-column float floor of the score sum: below it, zero and noise are
    # indistinguishable (|y - p| <= 1 bounds each term by w|x|); the constant
    # absorbs accumulation error growth in very long sums
    score_floor = np.maximum(
        tol, 1024.0 * np.finfo(np.float64).eps * (np.abs(Xv).T @ w))

    for it in range(1, max_iter + 1):
        score = Xv.T @ (w * (y - prob))
        if np.all(np.abs(score) <= score_floor):
            return PropensityFit(formula, beta, True, it - 1, ll)
        fisher_w = w * prob * (1.0 - prob)
        info = Xv.T @ (Xv * fisher_w[:, None])
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SingularInformation(
                "singular information matrix; design may be rank deficient"
            ) from None
        if not np.all(np.isfinite(step)):
            raise SingularInformation("non-finite Newton step")
        if np.max(np.abs(step)) < 1e-12:
            # parameters have stopped moving: the score is at the float
            # accumulation floor for this data size
            return PropensityFit(formula, beta, True, it - 1, ll)

        # step-halving: shrink until the log-likelihood does not decrease
        # (up to float noise in the sum, hence the relative slack)
        slack = 1e-12 * max(1.0, abs(ll))
        scale = 1.0
        for _ in range(40):
            cand = beta + scale * step
            cand_prob = clamp_probabilities(expit(Xv @ cand))
            cand_ll = _loglik(y, cand_prob, w)
            if cand_ll >= ll - slack:
                break
            scale *= 0.5
        beta, prob, ll = cand, cand_prob, cand_ll
        if np.max(np.abs(beta)) > coef_bound:
            raise Separation(coef_bound)

    score = Xv.T @ (w * (y - prob))
    if np.all(np.abs(score) <= score_floor):
        return PropensityFit(formula, beta, True, max_iter, ll)
    raise NotConverged(
        f"logistic fit did not converge in {max_iter} iterations "
        f"(score max-norm {np.max(np.abs(score)):.3e})"
    )


def evaluate_ps(fit: PropensityFit, X) -> np.ndarray:
    """Fitted probabilities for a design, clamped inside (0, 1)."""
    Xv = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=np.float64)
    if Xv.shape[1] != fit.n_parameters:
        raise DimensionMismatch(
            f"design has {Xv.shape[1]} columns, fit has {fit.n_parameters}"
        )
    return clamp_probabilities(expit(Xv @ fit.coefficients))


def unit_probabilities(fit: PropensityFit, ds: ClusteredDataset) -> np.ndarray:
    """Evaluate a fitted model on a dataset, expanded to one value per unit.

    Cluster- and subcluster-level fits are evaluated per group and broadcast
    to the units of each group.
    """
    if fit.formula is None:
        raise ValueError("fit carries no formula; evaluate against a design")
    X = build_design_matrix(fit.formula, ds)
    p = evaluate_ps(fit, X)
    if fit.formula.level is Level.INDIVIDUAL:
        return p
    if fit.formula.level is Level.CLUSTER:
        return p[ds.cluster_index]
    return p[ds.subcluster_index]


def group_probabilities(fit: PropensityFit, ds: ClusteredDataset) -> np.ndarray:
    """Evaluate a (sub)cluster-level fit, one value per group."""
    if fit.formula is None:
        raise ValueError("fit carries no formula; evaluate against a design")
    X = build_design_matrix(fit.formula, ds)
    return evaluate_ps(fit, X)


def probability_matrices(model_set: PropensityModelSet,
                         ds: ClusteredDataset):
    """Per-unit probabilities for all candidate models.

    Returns ``(phi, lam)`` with shapes (n_units, K) and (n_units, L); the
    group-level probabilities in ``lam`` are broadcast to units.
    """
    n = ds.n_units
    phi = np.empty((n, len(model_set.individual_models)))
    for k, fit in enumerate(model_set.individual_models):
        phi[:, k] = unit_probabilities(fit, ds)
    lam = np.empty((n, len(model_set.cluster_models)))
    for l, fit in enumerate(model_set.cluster_models):
        lam[:, l] = unit_probabilities(fit, ds)
    return phi, lam


def moment_targets(model_set: PropensityModelSet,
                   ds: ClusteredDataset) -> MomentTargets:
    """Average product of each model pair's probabilities over all units."""
    phi, lam = probability_matrices(model_set, ds)
    values = phi.T @ lam / ds.n_units
    return MomentTargets(values=values)
