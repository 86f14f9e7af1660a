"""EM correction for misclassified (sub)cluster-level missingness indicators.

A group whose outcomes are all missing is observationally indistinguishable
from a group that dropped out: the observed group indicator misclassifies the
former.  Treating the true indicator as latent, the EM below alternates a
closed-form posterior for each fully-missing group with two weighted logistic
fits, and returns observation-model parameters that are consistent despite
the misclassification.

Groups are clusters in two-level data and subclusters in three-level data;
``group_formula`` models the group-level observation probability (on
group-constant variables only) and ``unit_formula`` the individual-level
probability conditional on the group remaining.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import ClusteredDataset, MissingnessSummary
from .exceptions import NotConverged
from .formulas import Formula, build_design_matrix
from .propensity import PropensityFit, clamp_probabilities, expit, fit_logistic

DEFAULT_TOL = 1e-6
DEFAULT_COEF_TOL = 1e-6
DEFAULT_MAX_ITER = 500


@dataclass(frozen=True, eq=False)
class EMFit:
    """Result of the EM run.

    ``group_posteriors`` holds, per group, the posterior probability that the
    group truly remained in the study; it is exactly 1 wherever at least one
    outcome was observed.  ``loglik_trace`` records the observed-data
    log-likelihood at the initial parameters and after each iteration and is
    non-decreasing up to numerical slack.
    """

    group_fit: PropensityFit      # group-level model parameters
    unit_fit: PropensityFit       # individual-level model parameters
    group_posteriors: np.ndarray
    loglik_trace: tuple
    converged: bool
    iterations: int

    @property
    def group_coefficients(self) -> np.ndarray:
        return self.group_fit.coefficients

    @property
    def unit_coefficients(self) -> np.ndarray:
        return self.unit_fit.coefficients


def _group_log_survivor(unit_eta: np.ndarray, ms: MissingnessSummary) -> np.ndarray:
    """Per-group sum of log(1 - unit probability), computed in log space."""
    p = clamp_probabilities(expit(unit_eta))
    log1m = np.log1p(-p)
    return np.bincount(ms.group_index, weights=log1m,
                       minlength=ms.group_observed.shape[0])


def _posteriors(group_eta, unit_eta, ms) -> np.ndarray:
    lam = clamp_probabilities(expit(group_eta))
    log_all_missing = _group_log_survivor(unit_eta, ms)
    log_num = np.log(lam) + log_all_missing
    log_den = np.logaddexp(np.log1p(-lam), log_num)
    w = np.exp(log_num - log_den)
    return np.where(ms.group_observed == 1, 1.0, w)


def e_step_posteriors(group_coef, unit_coef, ds: ClusteredDataset,
                      ms: MissingnessSummary, group_formula: Formula,
                      unit_formula: Formula) -> np.ndarray:
    """Posterior probability that each fully-missing group truly remained.

    For a group with observed outcomes the posterior is 1.  Otherwise it is
    the retention probability times the probability all its outcomes are
    missing, normalized against the drop-out alternative.
    """
    Z = build_design_matrix(group_formula, ds).values
    X = build_design_matrix(unit_formula, ds).values
    return _posteriors(Z @ np.asarray(group_coef), X @ np.asarray(unit_coef), ms)


def _m_step_arrays(posteriors, Z, X, unit_observed, ms, group_formula,
                   unit_formula, group_start=None, unit_start=None):
    group_fit = fit_logistic(Z, posteriors, start=group_start)
    unit_weights = np.where(ms.group_observed[ms.group_index] == 1,
                            1.0, posteriors[ms.group_index])
    unit_fit = fit_logistic(X, unit_observed.astype(np.float64),
                            weights=unit_weights, start=unit_start)
    group_fit = PropensityFit(group_formula, group_fit.coefficients,
                              group_fit.converged, group_fit.iterations,
                              group_fit.loglik)
    unit_fit = PropensityFit(unit_formula, unit_fit.coefficients,
                             unit_fit.converged, unit_fit.iterations,
                             unit_fit.loglik)
    return group_fit, unit_fit


def m_step(posteriors, ds: ClusteredDataset, ms: MissingnessSummary,
           group_formula: Formula, unit_formula: Formula):
    """Maximize the expected complete-data log-likelihood.

    The objective separates: the group-level parameters solve a logistic fit
    with the posteriors as fractional responses, and the unit-level
    parameters solve a logistic fit in which units of fully-missing groups
    enter as failures weighted by their group's posterior.
    """
    Z = build_design_matrix(group_formula, ds).values
    X = build_design_matrix(unit_formula, ds).values
    return _m_step_arrays(posteriors, Z, X, ms.unit_observed, ms,
                          group_formula, unit_formula)


def _expected_complete_loglik(group_coef, unit_coef, posteriors, Z, X, ms):
    lam = clamp_probabilities(expit(Z @ group_coef))
    p = clamp_probabilities(expit(X @ unit_coef))
    r = ms.unit_observed
    obs_group = ms.group_observed == 1
    unit_ll = r * np.log(p) + (1 - r) * np.log1p(-p)
    per_group_unit = np.bincount(ms.group_index, weights=unit_ll,
                                 minlength=lam.shape[0])
    survivor = np.bincount(ms.group_index, weights=np.log1p(-p),
                           minlength=lam.shape[0])
    q_obs = np.log(lam[obs_group]).sum() + per_group_unit[obs_group].sum()
    w = posteriors[~obs_group]
    q_mis = np.sum((1.0 - w) * np.log1p(-lam[~obs_group])
                   + w * (np.log(lam[~obs_group]) + survivor[~obs_group]))
    return float(q_obs + q_mis)


def _observed_loglik_arrays(group_coef, unit_coef, Z, X, ms):
    lam = clamp_probabilities(expit(Z @ group_coef))
    p = clamp_probabilities(expit(X @ unit_coef))
    r = ms.unit_observed
    obs_group = ms.group_observed == 1
    unit_ll = r * np.log(p) + (1 - r) * np.log1p(-p)
    per_group_unit = np.bincount(ms.group_index, weights=unit_ll,
                                 minlength=lam.shape[0])
    survivor = np.bincount(ms.group_index, weights=np.log1p(-p),
                           minlength=lam.shape[0])
    ll_obs = np.log(lam[obs_group]).sum() + per_group_unit[obs_group].sum()
    ll_mis = np.logaddexp(np.log1p(-lam[~obs_group]),
                          np.log(lam[~obs_group]) + survivor[~obs_group]).sum()
    return float(ll_obs + ll_mis)


def observed_data_loglik(group_coef, unit_coef, ds: ClusteredDataset,
                         ms: MissingnessSummary, group_formula: Formula,
                         unit_formula: Formula) -> float:
    """Log-likelihood of the observed indicators, marginal over the latent one.

    Groups with an observed outcome contribute their retention probability
    and their units' Bernoulli terms; fully-missing groups contribute the
    mixture of dropping out versus remaining with every outcome missing.
    """
    Z = build_design_matrix(group_formula, ds).values
    X = build_design_matrix(unit_formula, ds).values
    return _observed_loglik_arrays(np.asarray(group_coef),
                                   np.asarray(unit_coef), Z, X, ms)


def naive_fits(ds: ClusteredDataset, ms: MissingnessSummary,
               group_formula: Formula, unit_formula: Formula):
    """Logistic fits that take the observed group indicator at face value.

    The group model regresses the observed indicator; the unit model uses
    only units belonging to groups with at least one observed outcome.
    """
    Z = build_design_matrix(group_formula, ds)
    X = build_design_matrix(unit_formula, ds)
    group_fit = fit_logistic(Z, ms.group_observed.astype(np.float64))
    in_observed = ms.group_observed[ms.group_index] == 1
    unit_fit = fit_logistic(X.values[in_observed],
                            ms.unit_observed[in_observed].astype(np.float64))
    return (
        PropensityFit(group_formula, group_fit.coefficients,
                      group_fit.converged, group_fit.iterations,
                      group_fit.loglik),
        PropensityFit(unit_formula, unit_fit.coefficients,
                      unit_fit.converged, unit_fit.iterations,
                      unit_fit.loglik),
    )


def fit_em(ds: ClusteredDataset, ms: MissingnessSummary,
           group_formula: Formula, unit_formula: Formula, *,
           tol: float = DEFAULT_TOL, coef_tol: float = DEFAULT_COEF_TOL,
           max_iter: int = DEFAULT_MAX_ITER) -> EMFit:
    """Run the EM until the expected objective and the coefficients settle.

    Starts from the naive fits.  Stops when the squared change in the
    expected complete-data objective falls below ``tol`` and the max-norm
    coefficient change falls below ``coef_tol`` (the objective criterion
    alone can plateau while parameters still drift), or fails after
    ``max_iter`` iterations with the trace attached.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    group_fit, unit_fit = naive_fits(ds, ms, group_formula, unit_formula)
    Z = build_design_matrix(group_formula, ds).values
    X = build_design_matrix(unit_formula, ds).values

    trace = [_observed_loglik_arrays(group_fit.coefficients,
                                     unit_fit.coefficients, Z, X, ms)]
    posteriors = _posteriors(Z @ group_fit.coefficients,
                             X @ unit_fit.coefficients, ms)
    if not np.any(ms.group_observed == 0):
        # nothing to reclassify: the EM is an exact no-op
        return EMFit(group_fit, unit_fit, posteriors, tuple(trace), True, 0)

    for it in range(1, max_iter + 1):
        posteriors = _posteriors(Z @ group_fit.coefficients,
                                 X @ unit_fit.coefficients, ms)
        q_before = _expected_complete_loglik(
            group_fit.coefficients, unit_fit.coefficients, posteriors, Z, X, ms)
        new_group, new_unit = _m_step_arrays(
            posteriors, Z, X, ms.unit_observed, ms, group_formula,
            unit_formula, group_start=group_fit.coefficients,
            unit_start=unit_fit.coefficients)
        q_after = _expected_complete_loglik(
            new_group.coefficients, new_unit.coefficients, posteriors, Z, X, ms)
        delta_coef = max(
            np.max(np.abs(new_group.coefficients - group_fit.coefficients)),
            np.max(np.abs(new_unit.coefficients - unit_fit.coefficients)),
        )
        group_fit, unit_fit = new_group, new_unit
        trace.append(_observed_loglik_arrays(group_fit.coefficients,
                                             unit_fit.coefficients, Z, X, ms))
        if (q_after - q_before) ** 2 <= tol and delta_coef < coef_tol:
            posteriors = _posteriors(Z @ group_fit.coefficients,
                                     X @ unit_fit.coefficients, ms)
            return EMFit(group_fit, unit_fit, posteriors, tuple(trace), True, it)

    raise NotConverged(
        f"EM did not converge in {max_iter} iterations", trace=tuple(trace)
    )
