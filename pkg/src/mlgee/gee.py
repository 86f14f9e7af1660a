"""Weighted generalized estimating equations for the marginal mean model.

The mean model is ``g(E[Y | A]) = b_I + b_A * A`` with an identity or logit
link.  The estimating equation stacks one term per cluster: the mean-model
Jacobian times the inverse working covariance times a diagonal weight matrix
times the residual vector.  Unobserved outcomes carry weight zero, so their
rows contribute nothing; the working correlation still spans the full
cluster.

Working correlations: independence, exchangeable (one within-cluster
correlation), and block-exchangeable for three-level data (one correlation
within subclusters, another across subclusters of the same cluster).  For
exchangeable structures every quantity reduces to cluster sums, which keeps
the solver fully vectorized; the block structure falls back to small dense
solves per cluster.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .data_model import ClusteredDataset, MissingnessSummary, Nesting, derive_missingness
from .em_misclass import fit_em, naive_fits
from .exceptions import (
    ArmEmpty,
    ConfigError,
    MissingInput,
    NonPositiveDefiniteCorrelation,
    NotConverged,
    TooFewPairsWarning,
)
from .formulas import Formula, build_design_matrix
from .propensity import (
    PropensityModelSet,
    expit,
    fit_logistic,
    group_probabilities,
    unit_probabilities,
)

GEE_TOL = 1e-8
MAX_SWEEPS = 50
ALPHA_CEIL = 0.99


class Link(Enum):
    IDENTITY = "identity"
    LOGIT = "logit"


@dataclass(frozen=True)
class MarginalModel:
    """Two-parameter marginal mean model on the treatment indicator."""

    link: Link
    coefficients: Optional[np.ndarray] = None

    def mean(self, treated: np.ndarray, beta: np.ndarray) -> np.ndarray:
        eta = beta[0] + beta[1] * treated
        if self.link is Link.IDENTITY:
            return eta
        return expit(eta)

    def variance_function(self, mu: np.ndarray) -> np.ndarray:
        if self.link is Link.IDENTITY:
            return np.ones_like(mu)
        return mu * (1.0 - mu)


class CorrelationKind(Enum):
    INDEPENDENCE = "independence"
    EXCHANGEABLE = "exchangeable"
    BLOCK_EXCHANGEABLE = "block-exchangeable"


@dataclass(frozen=True)
class WorkingCorrelation:
    """Working correlation choice; ``None`` parameters are estimated."""

    kind: CorrelationKind
    alpha: Optional[float] = None           # exchangeable
    alpha_within: Optional[float] = None    # block: within subcluster
    alpha_between: Optional[float] = None   # block: across subclusters

    @staticmethod
    def independence() -> "WorkingCorrelation":
        return WorkingCorrelation(CorrelationKind.INDEPENDENCE)

    @staticmethod
    def exchangeable(alpha: Optional[float] = None) -> "WorkingCorrelation":
        return WorkingCorrelation(CorrelationKind.EXCHANGEABLE, alpha=alpha)

    @staticmethod
    def block(alpha_within: Optional[float] = None,
              alpha_between: Optional[float] = None) -> "WorkingCorrelation":
        return WorkingCorrelation(CorrelationKind.BLOCK_EXCHANGEABLE,
                                  alpha_within=alpha_within,
                                  alpha_between=alpha_between)


class WeightMethod(Enum):
    CC = "cc"
    IPW = "ipw"
    MIPW = "mipw"
    MMR = "mmr"


@dataclass(frozen=True, eq=False)
class WeightSpec:
    """Diagonal of the per-unit weight matrix; zero where unobserved."""

    method: WeightMethod
    diagonal: np.ndarray
    detail: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class FitResult:
    beta: np.ndarray
    score_norm: float
    iterations: int
    alpha: Optional[tuple]
    n_clusters_used: int
    weight_diagnostics: dict
    converged: bool = True
    extras: dict = field(default_factory=dict)

    @property
    def intercept(self) -> float:
        return float(self.beta[0])

    @property
    def effect(self) -> float:
        return float(self.beta[1])


# --------------------------------------------------------------- correlation


def estimate_alpha(residuals: np.ndarray, structure: WorkingCorrelation,
                   ms: MissingnessSummary):
    """Moment estimator of the working correlation from standardized residuals.

    The estimate is the average product over observed within-cluster pairs
    divided by the average squared residual; the block structure computes the
    pair average separately within and across subclusters.  Falls back to
    independence (with a warning) when there are no usable pairs.
    """
    obs = ms.unit_observed.astype(np.float64)
    e = np.where(ms.unit_observed == 1, residuals, 0.0)
    n_obs = obs.sum()
    denom = float(e @ e) / n_obs

    cl = ms.cluster_index
    n_clusters = int(cl[-1]) + 1 if cl.size else 0
    sum_c = np.bincount(cl, weights=e, minlength=n_clusters)
    sq_c = np.bincount(cl, weights=e * e, minlength=n_clusters)
    m_c = np.bincount(cl, weights=obs, minlength=n_clusters)

    if structure.kind is CorrelationKind.EXCHANGEABLE:
        pair_sum = float(((sum_c ** 2 - sq_c) / 2.0).sum())
        n_pairs = float((m_c * (m_c - 1) / 2.0).sum())
        if n_pairs <= 0:
            warnings.warn("no observed within-cluster pairs; "
                          "falling back to independence", TooFewPairsWarning)
            return 0.0
        alpha = (pair_sum / n_pairs) / denom
        n_max = int(ms.group_sizes.max()) if ms.group_sizes.size else 1
        lo = -ALPHA_CEIL / max(n_max - 1, 1)
        return float(np.clip(alpha, lo, ALPHA_CEIL))

    if structure.kind is CorrelationKind.BLOCK_EXCHANGEABLE:
        sub = ms.group_index
        n_sub = int(ms.group_sizes.shape[0])
        sum_s = np.bincount(sub, weights=e, minlength=n_sub)
        sq_s = np.bincount(sub, weights=e * e, minlength=n_sub)
        m_s = np.bincount(sub, weights=obs, minlength=n_sub)
        within_sum = float(((sum_s ** 2 - sq_s) / 2.0).sum())
        within_pairs = float((m_s * (m_s - 1) / 2.0).sum())
        sum_s_by_cluster = np.bincount(ms.group_cluster, weights=sum_s ** 2,
                                       minlength=n_clusters)
        m_s_by_cluster = np.bincount(ms.group_cluster, weights=m_s ** 2,
                                     minlength=n_clusters)
        between_sum = float(((sum_c ** 2 - sum_s_by_cluster) / 2.0).sum())
        between_pairs = float(((m_c ** 2 - m_s_by_cluster) / 2.0).sum())
        if within_pairs <= 0 and between_pairs <= 0:
            warnings.warn("no observed pairs at either level; "
                          "falling back to independence", TooFewPairsWarning)
            return (0.0, 0.0)
        q_max = int(ms.group_sizes.max()) if ms.group_sizes.size else 1
        lo = -ALPHA_CEIL / max(q_max - 1, 1)
        a_w = 0.0 if within_pairs <= 0 else \
            float(np.clip((within_sum / within_pairs) / denom, lo, ALPHA_CEIL))
        a_b = 0.0 if between_pairs <= 0 else \
            float(np.clip((between_sum / between_pairs) / denom,
                          -ALPHA_CEIL, ALPHA_CEIL))
        return (a_w, a_b)

    return 0.0


def _check_exchangeable_pd(alpha: float, n_max: int) -> None:
    if not (-1.0 / max(n_max - 1, 1) < alpha < 1.0):
        raise NonPositiveDefiniteCorrelation(
            f"exchangeable correlation {alpha} is not positive definite "
            f"for cluster size {n_max}"
        )


def block_correlation_matrix(sub_sizes: np.ndarray, alpha_within: float,
                             alpha_between: float) -> np.ndarray:
    """Dense block-exchangeable correlation for one cluster.

    ``sub_sizes`` are the subcluster sizes in within-cluster order.
    """
    n = int(sub_sizes.sum())
    C = np.full((n, n), alpha_between)
    start = 0
    for q in sub_sizes:
        q = int(q)
        C[start:start + q, start:start + q] = alpha_within
        start += q
    np.fill_diagonal(C, 1.0)
    return C


def _assert_pd(C: np.ndarray) -> None:
    try:
        np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise NonPositiveDefiniteCorrelation(
            "block-exchangeable correlation is not positive definite"
        ) from None


# -------------------------------------------------------------------- solver


def _score_and_info_exchangeable(ds, w, resid, f_arm, alpha):
    """Cluster-collapsed score and information for (block-free) structures.

    Uses the identity that the inverse compound-symmetry correlation has
    constant row sums 1/(1 + (n-1) alpha), so each cluster contributes its
    weighted residual sum scaled by that factor.
    """
    cl = ds.cluster_index
    M = ds.n_clusters
    sizes = ds.cluster_sizes
    k = 1.0 / (1.0 + (sizes - 1) * alpha)
    s_c = np.bincount(cl, weights=w * resid, minlength=M)
    w_c = np.bincount(cl, weights=w, minlength=M)
    a_c = ds.cluster_treatment.astype(np.float64)
    f_c = np.where(a_c == 1, f_arm[1], f_arm[0])

    u0 = float(np.sum(k * s_c))
    u1 = float(np.sum(a_c * k * s_c))
    j00 = float(np.sum(f_c * k * w_c))
    j01 = float(np.sum(a_c * f_c * k * w_c))
    score = np.array([u0, u1])
    info = np.array([[j00, j01], [j01, j01]])
    return score, info


def _score_and_info_block(ds, w, resid, f_arm, alpha_w, alpha_b):
    starts = ds.cluster_starts
    sizes = ds.cluster_sizes
    sub_of_unit = ds.subcluster_index
    score = np.zeros(2)
    info = np.zeros((2, 2))
    a_c = ds.cluster_treatment.astype(np.float64)
    for c in range(ds.n_clusters):
        lo = int(starts[c])
        hi = lo + int(sizes[c])
        subs = sub_of_unit[lo:hi]
        _, sub_sizes = np.unique(subs, return_counts=True)
        C = block_correlation_matrix(sub_sizes, alpha_w, alpha_b)
        _assert_pd(C)
        wv = w[lo:hi]
        rv = resid[lo:hi]
        rhs = np.column_stack((wv * rv, wv))
        sol = np.linalg.solve(C, rhs)
        one_cinv_wr = float(sol[:, 0].sum())
        one_cinv_w = float(sol[:, 1].sum())
        a = a_c[c]
        f = f_arm[1] if a == 1 else f_arm[0]
        score += np.array([one_cinv_wr, a * one_cinv_wr])
        info += f * np.array([[one_cinv_w, a * one_cinv_w],
                              [a * one_cinv_w, a * one_cinv_w]])
    return score, info


def _initial_beta(ds, ms, model):
    obs = ms.unit_observed == 1
    y = ds.outcome[obs]
    a = ds.treatment[obs]
    means = []
    for arm in (0, 1):
        sel = a == arm
        if not np.any(sel):
            raise ArmEmpty(arm)
        means.append(float(np.mean(y[sel])))
    if model.link is Link.IDENTITY:
        return np.array([means[0], means[1] - means[0]])
    p = np.clip(np.array(means), 1e-6, 1.0 - 1e-6)
    logits = np.log(p / (1.0 - p))
    return np.array([logits[0], logits[1] - logits[0]])


def solve_gee(ds: ClusteredDataset, ms: MissingnessSummary,
              model: MarginalModel, corr: WorkingCorrelation,
              wspec: WeightSpec, *, tol: float = GEE_TOL,
              max_sweeps: int = MAX_SWEEPS) -> FitResult:
    """Fisher scoring on the weighted estimating equation.

    Alternates one scoring sweep with one working-correlation moment update
    (when the correlation is being estimated) until the score max-norm drops
    below ``tol`` and the correlation settles.
    """
    w = wspec.diagonal
    if w.shape[0] != ds.n_units:
        raise MissingInput(wspec.method.value, "a weight per unit")
    obs_w = (w > 0) & (ms.unit_observed == 1)
    for arm in (0, 1):
        if not np.any(obs_w & (ds.treatment == arm)):
            raise ArmEmpty(arm)
    if corr.kind is CorrelationKind.BLOCK_EXCHANGEABLE and \
            ds.nesting is not Nesting.THREE_LEVEL:
        raise ConfigError("block-exchangeable correlation requires "
                          "three-level data")

    y = np.where(ms.unit_observed == 1, np.nan_to_num(ds.outcome), 0.0)
    treated = ds.treatment.astype(np.float64)
    beta = _initial_beta(ds, ms, model)
    n_max = int(ds.cluster_sizes.max())

    alpha_fixed = None
    if corr.kind is CorrelationKind.INDEPENDENCE:
        alpha_fixed = (0.0,)
    elif corr.kind is CorrelationKind.EXCHANGEABLE and corr.alpha is not None:
        _check_exchangeable_pd(corr.alpha, n_max)
        alpha_fixed = (float(corr.alpha),)
    elif corr.kind is CorrelationKind.BLOCK_EXCHANGEABLE and \
            corr.alpha_within is not None and corr.alpha_between is not None:
        alpha_fixed = (float(corr.alpha_within), float(corr.alpha_between))

    if alpha_fixed is not None:
        alpha = alpha_fixed
    elif corr.kind is CorrelationKind.BLOCK_EXCHANGEABLE:
        alpha = (0.0, 0.0)
    else:
        alpha = (0.0,)

    score = np.array([np.inf, np.inf])
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        mu_arm = model.mean(np.array([0.0, 1.0]), beta)
        mu = np.where(treated == 1, mu_arm[1], mu_arm[0])
        f_arm = model.variance_function(mu_arm)
        resid = np.where(ms.unit_observed == 1, y - mu, 0.0)

        new_alpha = alpha
        if alpha_fixed is None:
            sd = np.where(treated == 1, np.sqrt(f_arm[1]), np.sqrt(f_arm[0]))
            est = estimate_alpha(resid / sd, corr, ms)
            new_alpha = est if isinstance(est, tuple) else (est,)
            if corr.kind is CorrelationKind.EXCHANGEABLE:
                _check_exchangeable_pd(new_alpha[0], n_max)

        if corr.kind is CorrelationKind.BLOCK_EXCHANGEABLE:
            score, info = _score_and_info_block(
                ds, w, resid, f_arm, new_alpha[0], new_alpha[1])
        else:
            score, info = _score_and_info_exchangeable(
                ds, w, resid, f_arm, new_alpha[0])

        alpha_moved = (alpha_fixed is None and
                       max(abs(a - b) for a, b in zip(new_alpha, alpha)) > tol)
        alpha = new_alpha
        if np.max(np.abs(score)) < tol and not alpha_moved:
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise NotConverged("singular information in scoring step") from None
        beta = beta + step
    else:
        raise NotConverged(
            f"GEE did not converge in {max_sweeps} sweeps "
            f"(score max-norm {np.max(np.abs(score)):.3e})"
        )

    active = w[obs_w]
    diagnostics = {
        "min": float(active.min()),
        "max": float(active.max()),
        "mean": float(active.mean()),
    }
    used = np.unique(ds.cluster_index[obs_w]).size
    return FitResult(
        beta=beta,
        score_norm=float(np.max(np.abs(score))),
        iterations=sweeps,
        alpha=None if corr.kind is CorrelationKind.INDEPENDENCE else alpha,
        n_clusters_used=int(used),
        weight_diagnostics=diagnostics,
    )


# ------------------------------------------------------------- weight specs


def build_weight_spec(method: WeightMethod, ds: ClusteredDataset,
                      ms: MissingnessSummary, *, pi_unit=None, phi_unit=None,
                      lam_group=None, mr_weights=None) -> WeightSpec:
    """Assemble the diagonal weight vector for an estimator family.

    Complete-case weights are the observation indicator itself; inverse
    probability weights divide it by the fitted observation probabilities;
    calibration weights are placed on observed units and rescaled by the
    observed count so the diagonal stays O(1).
    """
    r = ms.unit_observed.astype(np.float64)
    if method is WeightMethod.CC:
        return WeightSpec(method, r)
    if method is WeightMethod.IPW:
        if pi_unit is None:
            raise MissingInput("ipw", "unconditional observation probabilities")
        return WeightSpec(method, r / pi_unit)
    if method is WeightMethod.MIPW:
        if phi_unit is None or lam_group is None:
            raise MissingInput(
                "mipw", "unit-level and group-level observation probabilities")
        lam_unit = lam_group[ms.group_index]
        return WeightSpec(method, r / (phi_unit * lam_unit))
    if method is WeightMethod.MMR:
        if mr_weights is None:
            raise MissingInput("mmr", "calibration weights")
        diag = np.zeros(ds.n_units)
        obs_idx = np.nonzero(ms.unit_observed == 1)[0]
        if mr_weights.shape[0] != obs_idx.shape[0]:
            raise MissingInput("mmr", "one calibration weight per observed unit")
        diag[obs_idx] = mr_weights * obs_idx.shape[0]
        return WeightSpec(method, diag)
    raise ConfigError(f"unknown weight method {method}")


# ----------------------------------------------------------- orchestration


@dataclass(frozen=True)
class FitConfig:
    """Everything needed to run one estimator on one dataset."""

    method: WeightMethod
    link: Link = Link.IDENTITY
    correlation: WorkingCorrelation = WorkingCorrelation.exchangeable()
    individual_formulas: tuple = ()    # candidate unit-level models
    cluster_formulas: tuple = ()       # candidate group-level models
    ipw_formula: Optional[Formula] = None
    use_em: bool = True

    def validate(self) -> None:
        if self.method is WeightMethod.IPW and self.ipw_formula is None:
            raise ConfigError("ipw requires one unconditional model formula")
        if self.method is WeightMethod.MIPW:
            if len(self.individual_formulas) != 1 or len(self.cluster_formulas) != 1:
                raise ConfigError(
                    "mipw requires exactly one individual-level and one "
                    "cluster-level model formula")
        if self.method is WeightMethod.MMR:
            if not self.individual_formulas or not self.cluster_formulas:
                raise ConfigError(
                    "mmr requires at least one formula in each candidate set")


def _estimate_ps_pairs(ds, ms, config):
    """Fit each candidate model pair, with or without the EM correction.

    Candidate sets are paired diagonally: the j-th individual-level formula
    runs jointly with the j-th group-level formula (the shorter set repeats
    its last formula), so every model gets exactly one parameter estimate.
    """
    K = len(config.individual_formulas)
    L = len(config.cluster_formulas)
    unit_fits = [None] * K
    group_fits = [None] * L
    extras = {}
    for j in range(max(K, L)):
        unit_f = config.individual_formulas[min(j, K - 1)]
        group_f = config.cluster_formulas[min(j, L - 1)]
        if config.use_em:
            em = fit_em(ds, ms, group_f, unit_f)
            gfit, ufit = em.group_fit, em.unit_fit
            extras[f"em_iterations_{j}"] = em.iterations
        else:
            gfit, ufit = naive_fits(ds, ms, group_f, unit_f)
        if j < K:
            unit_fits[j] = ufit
        if j < L:
            group_fits[j] = gfit
    return tuple(unit_fits), tuple(group_fits), extras


def fit_marginal(ds: ClusteredDataset, config: FitConfig) -> FitResult:
    """Run the full estimation pipeline for one method.

    Derives missingness, fits whatever observation models the method needs
    (running the EM correction when enabled), builds the weight diagonal,
    and solves the estimating equation.  Deterministic given its inputs.
    """
    config.validate()
    ms = derive_missingness(ds)
    model = MarginalModel(link=config.link)
    extras = {}

    if config.method is WeightMethod.CC:
        wspec = build_weight_spec(WeightMethod.CC, ds, ms)
    elif config.method is WeightMethod.IPW:
        X = build_design_matrix(config.ipw_formula, ds)
        pi_fit = fit_logistic(X, ms.unit_observed.astype(np.float64))
        pi = unit_probabilities(pi_fit, ds)
        wspec = build_weight_spec(WeightMethod.IPW, ds, ms, pi_unit=pi)
    elif config.method is WeightMethod.MIPW:
        unit_fits, group_fits, extras = _estimate_ps_pairs(ds, ms, config)
        phi = unit_probabilities(unit_fits[0], ds)
        lam = group_probabilities(group_fits[0], ds)
        wspec = build_weight_spec(WeightMethod.MIPW, ds, ms,
                                  phi_unit=phi, lam_group=lam)
    elif config.method is WeightMethod.MMR:
        from .mr_weights import solve_mr_weights

        unit_fits, group_fits, extras = _estimate_ps_pairs(ds, ms, config)
        model_set = PropensityModelSet(unit_fits, group_fits)
        solution, _ = solve_mr_weights(model_set, ds, ms)
        extras["mr_boundary_margin"] = solution.boundary_margin
        extras["mr_dropped_constraints"] = solution.dropped_constraints
        wspec = build_weight_spec(WeightMethod.MMR, ds, ms,
                                  mr_weights=solution.weights)
    else:  # pragma: no cover
        raise ConfigError(f"unknown method {config.method}")

    result = solve_gee(ds, ms, model, config.correlation, wspec)
    if extras:
        merged = dict(result.extras)
        merged.update(extras)
        result = FitResult(
            beta=result.beta, score_norm=result.score_norm,
            iterations=result.iterations, alpha=result.alpha,
            n_clusters_used=result.n_clusters_used,
            weight_diagnostics=result.weight_diagnostics,
            converged=result.converged, extras=merged,
        )
    return result
