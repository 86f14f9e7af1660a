"""Cluster-bootstrap standard errors and study-level summaries.

Each replicate draws whole clusters with replacement (duplicates become
fresh, distinct clusters) and reruns the entire estimation pipeline,
including observation-model fitting, the EM correction, and the calibration
solve, so the reported uncertainty reflects every estimation stage.
Replicate random streams are derived from (seed, replicate index), so
results are identical no matter how the replicates are scheduled.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data_model import ClusteredDataset
from .exceptions import AllReplicatesFailed, MlgeeError
from .gee import FitConfig, FitResult, fit_marginal

NORMAL_975 = 1.959963984540054
FAILURE_FLAG_FRACTION = 0.1


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Independent, order-insensitive stream for one replicate."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Replicate estimates and derived intervals.

    ``beta_replicates`` has one row per replicate with NaN rows where the
    refit failed; ``n_failed`` counts those, so successes + failures equal
    the requested replicate count.  ``unreliable`` flags runs where more
    than 10% of replicates failed.
    """

    point: FitResult
    n_replicates: int
    beta_replicates: np.ndarray       # (B, 2), NaN rows for failures
    se: np.ndarray                    # (2,)
    ci_normal: np.ndarray             # (2, 2) rows (lo, hi) per coefficient
    ci_percentile: np.ndarray         # (2, 2)
    n_failed: int
    unreliable: bool

    @property
    def effect_se(self) -> float:
        return float(self.se[1])


def _one_replicate(ds: ClusteredDataset, config: FitConfig, seed: int,
                   index: int) -> np.ndarray:
    rng = replicate_rng(seed, index)
    draw = rng.integers(0, ds.n_clusters, size=ds.n_clusters)
    try:
        fit = fit_marginal(ds.resample_clusters(draw), config)
        return fit.beta
    except MlgeeError:
        return np.array([np.nan, np.nan])


def _percentile_from_order_stats(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: always an element of ``values``."""
    ordered = np.sort(values)
    idx = int(round(q * (ordered.size - 1)))
    return float(ordered[idx])


def cluster_bootstrap(ds: ClusteredDataset, config: FitConfig,
                      n_replicates: int, seed: int, *,
                      threads: int = 1,
                      point: Optional[FitResult] = None) -> BootstrapResult:
    """Resample clusters, refit everything, and summarize the spread.

    ``threads`` controls a process pool; the result is identical for any
    worker count because each replicate's stream depends only on (seed,
    replicate index).  Failed replicates are dropped and counted rather
    than retried.
    """
    if n_replicates < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    if point is None:
        point = fit_marginal(ds, config)

    betas = np.empty((n_replicates, 2))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = pool.map(
                _one_replicate,
                (ds,) * n_replicates,
                (config,) * n_replicates,
                (seed,) * n_replicates,
                range(n_replicates),
                chunksize=max(1, n_replicates // (threads * 4)),
            )
            for b, beta in enumerate(results):
                betas[b] = beta
    else:
        for b in range(n_replicates):
            betas[b] = _one_replicate(ds, config, seed, b)

    ok = ~np.isnan(betas[:, 0])
    n_failed = int(n_replicates - ok.sum())
    if ok.sum() == 0:
        raise AllReplicatesFailed("every bootstrap replicate failed")
    good = betas[ok]
    se = np.std(good, axis=0, ddof=1)
    ci_normal = np.stack([point.beta - NORMAL_975 * se,
                          point.beta + NORMAL_975 * se], axis=1)
    ci_percentile = np.stack(
        [[_percentile_from_order_stats(good[:, j], 0.025),
          _percentile_from_order_stats(good[:, j], 0.975)]
         for j in range(2)], axis=0)
    return BootstrapResult(
        point=point,
        n_replicates=n_replicates,
        beta_replicates=betas,
        se=se,
        ci_normal=ci_normal,
        ci_percentile=ci_percentile,
        n_failed=n_failed,
        unreliable=n_failed > FAILURE_FLAG_FRACTION * n_replicates,
    )


@dataclass(frozen=True)
class MethodSummary:
    """Monte Carlo operating characteristics of one estimator."""

    method: str
    bias: float
    empirical_se: float
    mean_estimated_se: float
    coverage: float        # percent of CIs containing the true effect
    n_replicates: int


def summarize_study(replicates, truth: float, method: str = "") -> MethodSummary:
    """Aggregate per-replicate (effect, se, ci) triples against the truth.

    ``replicates`` is an iterable of ``(effect, se, (lo, hi))``.  Coverage
    counts the intervals containing the true effect.
    """
    rows = list(replicates)
    if not rows:
        raise ValueError("need at least one replicate")
    effects = np.array([r[0] for r in rows], dtype=np.float64)
    ses = np.array([r[1] for r in rows], dtype=np.float64)
    los = np.array([r[2][0] for r in rows], dtype=np.float64)
    his = np.array([r[2][1] for r in rows], dtype=np.float64)
    bias = float(np.mean(effects) - truth)
    emp_se = float(np.std(effects, ddof=1)) if effects.size > 1 else 0.0
    covered = float(np.mean((los <= truth) & (truth <= his)) * 100.0)
    return MethodSummary(
        method=method,
        bias=bias,
        empirical_se=emp_se,
        mean_estimated_se=float(np.mean(ses)),
        coverage=covered,
        n_replicates=effects.size,
    )
