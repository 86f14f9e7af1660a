import numpy as np
import pytest
from scipy.optimize import root

from mlgee.data_model import Level, Nesting, derive_missingness
from mlgee.exceptions import (
    ArmEmpty,
    ConfigError,
    MissingInput,
    NonPositiveDefiniteCorrelation,
    TooFewPairsWarning,
)
from mlgee.formulas import parse_formula
from mlgee.gee import (
    CorrelationKind,
    FitConfig,
    Link,
    MarginalModel,
    WeightMethod,
    WeightSpec,
    WorkingCorrelation,
    block_correlation_matrix,
    build_weight_spec,
    estimate_alpha,
    fit_marginal,
    solve_gee,
)
from mlgee.simulate import generate_dataset, get_scenario, method_config

from conftest import make_two_level, random_missing_dataset


def exchangeable_matrix(n, alpha):
    C = np.full((n, n), alpha)
    np.fill_diagonal(C, 1.0)
    return C


def stacked_equation_factory(ds, ms, alpha, weights, link=Link.IDENTITY):
    """Direct dense evaluation of the estimating equation (the oracle)."""
    model = MarginalModel(link=link)
    y = np.where(ms.unit_observed == 1, np.nan_to_num(ds.outcome), 0.0)
    treated = ds.treatment.astype(float)
    starts = ds.cluster_starts
    sizes = ds.cluster_sizes

    def equation(beta):
        mu_arm = model.mean(np.array([0.0, 1.0]), np.asarray(beta))
        f_arm = model.variance_function(mu_arm)
        total = np.zeros(2)
        for c in range(ds.n_clusters):
            lo, hi = int(starts[c]), int(starts[c] + sizes[c])
            a = treated[lo]
            mu = mu_arm[1] if a == 1 else mu_arm[0]
            f = f_arm[1] if a == 1 else f_arm[0]
            n = hi - lo
            D = np.column_stack([np.ones(n), np.full(n, a)]) * f
            V = f * exchangeable_matrix(n, alpha)
            W = np.diag(weights[lo:hi])
            resid = (y[lo:hi] - mu) * ms.unit_observed[lo:hi]
            total += D.T @ np.linalg.solve(V, W @ resid)
        return total

    return equation


def test_unweighted_independence_equals_arm_means():
    ds = make_two_level([
        (0, [1.0, 2.0, 3.0], {"z1": 0.0, "x1": [0, 0, 0]}),
        (1, [5.0, 7.0], {"z1": 0.0, "x1": [0, 0]}),
        (0, [2.0], {"z1": 0.0, "x1": [0]}),
        (1, [6.0, 6.0, 9.0], {"z1": 0.0, "x1": [0, 0, 0]}),
    ])
    ms = derive_missingness(ds)
    wspec = build_weight_spec(WeightMethod.CC, ds, ms)
    fit = solve_gee(ds, ms, MarginalModel(Link.IDENTITY),
                    WorkingCorrelation.independence(), wspec)
    y0 = np.mean([1, 2, 3, 2.0])
    y1 = np.mean([5, 7, 6, 6, 9.0])
    assert fit.intercept == pytest.approx(y0, abs=1e-10)
    assert fit.effect == pytest.approx(y1 - y0, abs=1e-10)
    assert fit.score_norm < 1e-8


def test_exchangeable_equal_sizes_no_missing_matches_independence():
    clusters = [(i % 2, [float(i), float(i) + 1.0],
                 {"z1": 0.0, "x1": [0, 0]}) for i in range(6)]
    ds = make_two_level(clusters)
    ms = derive_missingness(ds)
    wspec = build_weight_spec(WeightMethod.CC, ds, ms)
    base = solve_gee(ds, ms, MarginalModel(Link.IDENTITY),
                     WorkingCorrelation.independence(), wspec)
    exch = solve_gee(ds, ms, MarginalModel(Link.IDENTITY),
                     WorkingCorrelation.exchangeable(0.4), wspec)
    np.testing.assert_allclose(exch.beta, base.beta, atol=1e-10)


def test_exchangeable_unequal_sizes_matches_root_finder(rng):
    ds = make_two_level([
        (0, [1.2, 0.7], {"z1": 0.0, "x1": [0, 0]}),
        (1, [2.0, 3.0, 2.5, 1.8, 2.2], {"z1": 0.0, "x1": [0] * 5}),
        (0, [0.9, 1.5, 1.1, 0.4, 1.3], {"z1": 0.0, "x1": [0] * 5}),
        (1, [2.8, 1.9], {"z1": 0.0, "x1": [0, 0]}),
    ])
    ms = derive_missingness(ds)
    wspec = build_weight_spec(WeightMethod.CC, ds, ms)
    fit = solve_gee(ds, ms, MarginalModel(Link.IDENTITY),
                    WorkingCorrelation.exchangeable(0.3), wspec)
    oracle = stacked_equation_factory(ds, ms, 0.3, wspec.diagonal)
    sol = root(oracle, x0=np.array([1.0, 1.0]), tol=1e-12)
    np.testing.assert_allclose(fit.beta, sol.x, atol=1e-8)
    np.testing.assert_allclose(oracle(fit.beta), 0.0, atol=1e-8)


def test_weighted_fit_matches_root_finder_with_missingness(rng):
    ds = random_missing_dataset(rng, n_clusters=12)
    ms = derive_missingness(ds)
    w = np.where(ms.unit_observed == 1, rng.uniform(0.5, 3.0, ds.n_units), 0.0)
    wspec = WeightSpec(WeightMethod.IPW, w)
    fit = solve_gee(ds, ms, MarginalModel(Link.IDENTITY),
                    WorkingCorrelation.exchangeable(0.2), wspec)
    oracle = stacked_equation_factory(ds, ms, 0.2, w)
    sol = root(oracle, x0=fit.beta + 0.5, tol=1e-12)
    np.testing.assert_allclose(fit.beta, sol.x, atol=1e-8)


def test_logit_link_matches_root_finder(rng):
    clusters = []
    for i in range(30):
        a = i % 2
        n = int(rng.integers(2, 5))
        p = 0.35 + 0.3 * a
        ys = [float(v) for v in (rng.random(n) < p).astype(float)]
        clusters.append((a, ys, {"z1": 0.0, "x1": [0.0] * n}))
    ds = make_two_level(clusters)
    ms = derive_missingness(ds)
    wspec = build_weight_spec(WeightMethod.CC, ds, ms)
    fit = solve_gee(ds, ms, MarginalModel(Link.LOGIT),
                    WorkingCorrelation.exchangeable(0.15), wspec)
    oracle = stacked_equation_factory(ds, ms, 0.15, wspec.diagonal,
                                      link=Link.LOGIT)
    sol = root(oracle, x0=fit.beta + 0.2, tol=1e-12)
    np.testing.assert_allclose(fit.beta, sol.x, atol=1e-7)


def test_weighted_independence_equals_weighted_arm_means(rng):
    ds = random_missing_dataset(rng)
    ms = derive_missingness(ds)
    w = np.where(ms.unit_observed == 1, rng.uniform(0.2, 5.0, ds.n_units), 0.0)
    wspec = WeightSpec(WeightMethod.IPW, w)
    fit = solve_gee(ds, ms, MarginalModel(Link.IDENTITY),
                    WorkingCorrelation.independence(), wspec)
    y = np.nan_to_num(ds.outcome)
    a = ds.treatment
    m0 = np.sum(w[a == 0] * y[a == 0]) / np.sum(w[a == 0])
    m1 = np.sum(w[a == 1] * y[a == 1]) / np.sum(w[a == 1])
    assert fit.intercept == pytest.approx(m0, abs=1e-10)
    assert fit.effect == pytest.approx(m1 - m0, abs=1e-10)


def test_all_weights_one_reproduces_unweighted(rng):
    ds = random_missing_dataset(rng)
    ms = derive_missingness(ds)
    cc = build_weight_spec(WeightMethod.CC, ds, ms)
    ones = WeightSpec(WeightMethod.IPW, ms.unit_observed.astype(float))
    f1 = solve_gee(ds, ms, MarginalModel(Link.IDENTITY),
                   WorkingCorrelation.exchangeable(), cc)
    f2 = solve_gee(ds, ms, MarginalModel(Link.IDENTITY),
                   WorkingCorrelation.exchangeable(), ones)
    np.testing.assert_allclose(f1.beta, f2.beta, atol=1e-12)


def test_permutation_within_clusters_leaves_beta_unchanged(rng):
    clusters = []
    for i in range(8):
        n = int(rng.integers(2, 5))
        ys = [float(rng.normal()) if rng.random() < 0.8 else None
              for _ in range(n)]
        clusters.append((i % 2, ys,
                         {"z1": float(rng.normal()),
                          "x1": [float(rng.normal()) for _ in range(n)]}))
    ds = make_two_level(clusters)
    permuted = [(a, list(reversed(ys)),
                 {"z1": covs["z1"], "x1": list(reversed(covs["x1"]))})
                for a, ys, covs in clusters]
    ds2 = make_two_level(permuted)
    ms, ms2 = derive_missingness(ds), derive_missingness(ds2)
    f1 = solve_gee(ds, ms, MarginalModel(Link.IDENTITY),
                   WorkingCorrelation.exchangeable(),
                   build_weight_spec(WeightMethod.CC, ds, ms))
    f2 = solve_gee(ds2, ms2, MarginalModel(Link.IDENTITY),
                   WorkingCorrelation.exchangeable(),
                   build_weight_spec(WeightMethod.CC, ds2, ms2))
    np.testing.assert_allclose(f1.beta, f2.beta, atol=1e-10)


# ------------------------------------------------------- correlation pieces


def test_estimate_alpha_perfect_correlation():
    ds = make_two_level([
        (0, [1.0, 1.0, 1.0], {"z1": 0.0, "x1": [0] * 3}),
        (1, [-1.0, -1.0, -1.0], {"z1": 0.0, "x1": [0] * 3}),
    ])
    ms = derive_missingness(ds)
    residuals = np.array([1.0, 1.0, 1.0, -1.0, -1.0, -1.0])
    alpha = estimate_alpha(residuals, WorkingCorrelation.exchangeable(), ms)
    assert alpha == pytest.approx(0.99)


def test_estimate_alpha_independent_residuals(rng):
    clusters = [(0, [0.0] * 4, {"z1": 0.0, "x1": [0] * 4})
                for _ in range(2500)]
    ds = make_two_level(clusters)
    ms = derive_missingness(ds)
    residuals = rng.normal(size=ds.n_units)
    alpha = estimate_alpha(residuals, WorkingCorrelation.exchangeable(), ms)
    assert abs(alpha) < 0.05


def test_estimate_alpha_hand_computed():
    ds = make_two_level([
        (0, [0.0, 0.0], {"z1": 0.0, "x1": [0, 0]}),
        (0, [0.0, 0.0], {"z1": 0.0, "x1": [0, 0]}),
        (1, [0.0, 0.0, None], {"z1": 0.0, "x1": [0, 0, 0]}),
    ])
    ms = derive_missingness(ds)
    e = np.array([1.0, 2.0, -1.0, 0.5, 2.0, -2.0, 77.0])  # last unobserved
    # observed pairs: (1,2), (-1,0.5), (2,-2) -> products 2, -0.5, -4
    # mean product = -2.5/3; mean square = (1+4+1+.25+4+4)/6
    expected = (-2.5 / 3.0) / (14.25 / 6.0)
    alpha = estimate_alpha(e, WorkingCorrelation.exchangeable(), ms)
    assert alpha == pytest.approx(expected, rel=1e-12)


def test_estimate_alpha_falls_back_without_pairs():
    ds = make_two_level([
        (0, [1.0], {"z1": 0.0, "x1": [0]}),
        (1, [2.0], {"z1": 0.0, "x1": [0]}),
    ])
    ms = derive_missingness(ds)
    with pytest.warns(TooFewPairsWarning):
        alpha = estimate_alpha(np.array([1.0, -1.0]),
                               WorkingCorrelation.exchangeable(), ms)
    assert alpha == 0.0


def test_compound_symmetry_inverse_closed_form(rng):
    # the solver relies on the constant row sums of the inverse; check the
    # full closed form against a dense inverse across sizes
    for n in (2, 3, 7, 20, 50):
        alpha = float(rng.uniform(-0.9 / (n - 1), 0.95))
        C = exchangeable_matrix(n, alpha)
        direct = np.linalg.inv(C)
        c = alpha / ((1 - alpha) * (1 + (n - 1) * alpha))
        closed = np.eye(n) / (1 - alpha) - c * np.ones((n, n))
        np.testing.assert_allclose(closed, direct, atol=1e-10)
        np.testing.assert_allclose(direct.sum(axis=1),
                                   1.0 / (1 + (n - 1) * alpha), atol=1e-10)


def test_block_correlation_positive_definite_and_violations():
    C = block_correlation_matrix(np.array([2, 3]), 0.5, 0.2)
    np.linalg.cholesky(C)      # must not raise
    assert C[0, 1] == 0.5 and C[0, 2] == 0.2

    ds3 = generate_dataset(get_scenario("three-level-demo"), 3)
    ms3 = derive_missingness(ds3)
    wspec = build_weight_spec(WeightMethod.CC, ds3, ms3)
    with pytest.raises(NonPositiveDefiniteCorrelation):
        solve_gee(ds3, ms3, MarginalModel(Link.IDENTITY),
                  WorkingCorrelation.block(-0.9, 0.8), wspec)


def test_block_exchangeable_matches_root_finder():
    sc = get_scenario("three-level-demo")
    ds = generate_dataset(sc, 11)
    ms = derive_missingness(ds)
    wspec = build_weight_spec(WeightMethod.CC, ds, ms)
    fit = solve_gee(ds, ms, MarginalModel(Link.IDENTITY),
                    WorkingCorrelation.block(0.3, 0.1), wspec)

    def equation(beta):
        total = np.zeros(2)
        starts = ds.cluster_starts
        sizes = ds.cluster_sizes
        y = np.nan_to_num(ds.outcome)
        for c in range(ds.n_clusters):
            lo, hi = int(starts[c]), int(starts[c] + sizes[c])
            subs = ds.subcluster_index[lo:hi]
            _, sub_sizes = np.unique(subs, return_counts=True)
            C = block_correlation_matrix(sub_sizes, 0.3, 0.1)
            a = float(ds.treatment[lo])
            n = hi - lo
            D = np.column_stack([np.ones(n), np.full(n, a)])
            resid = (y[lo:hi] - (beta[0] + beta[1] * a)) \
                * ms.unit_observed[lo:hi] * wspec.diagonal[lo:hi]
            total += D.T @ np.linalg.solve(C, resid)
        return total

    sol = root(equation, x0=fit.beta + 0.3, tol=1e-12)
    np.testing.assert_allclose(fit.beta, sol.x, atol=1e-8)


# ------------------------------------------------------------- weight specs


def test_weight_spec_values():
    ds = make_two_level([
        (0, [1.0, None], {"z1": 0.0, "x1": [0, 0]}),
        (1, [2.0], {"z1": 0.0, "x1": [0]}),
    ])
    ms = derive_missingness(ds)
    phi = np.array([0.5, 0.6, 0.8])
    lam = np.array([0.8, 0.9])
    spec = build_weight_spec(WeightMethod.MIPW, ds, ms,
                             phi_unit=phi, lam_group=lam)
    assert spec.diagonal[0] == pytest.approx(1.0 / (0.5 * 0.8))   # 2.5
    assert spec.diagonal[1] == 0.0                                # unobserved
    assert spec.diagonal[2] == pytest.approx(1.0 / (0.8 * 0.9))

    uniform = np.full(2, 1.0 / 2.0)
    mmr = build_weight_spec(WeightMethod.MMR, ds, ms, mr_weights=uniform)
    active = mmr.diagonal[ms.unit_observed == 1]
    np.testing.assert_allclose(active, active[0])

    with pytest.raises(MissingInput):
        build_weight_spec(WeightMethod.IPW, ds, ms)
    with pytest.raises(MissingInput):
        build_weight_spec(WeightMethod.MIPW, ds, ms, phi_unit=phi)


def test_mmr_rescaling_does_not_change_root(rng):
    ds = random_missing_dataset(rng)
    ms = derive_missingness(ds)
    n_obs = int(ms.unit_observed.sum())
    raw = rng.uniform(0.5, 2.0, size=n_obs)
    raw = raw / raw.sum()
    spec = build_weight_spec(WeightMethod.MMR, ds, ms, mr_weights=raw)
    unscaled = np.zeros(ds.n_units)
    unscaled[ms.unit_observed == 1] = raw
    f1 = solve_gee(ds, ms, MarginalModel(Link.IDENTITY),
                   WorkingCorrelation.exchangeable(), spec)
    f2 = solve_gee(ds, ms, MarginalModel(Link.IDENTITY),
                   WorkingCorrelation.exchangeable(),
                   WeightSpec(WeightMethod.MMR, unscaled))
    np.testing.assert_allclose(f1.beta, f2.beta, atol=1e-9)


# ------------------------------------------------------------ orchestration


def test_fit_marginal_cc_on_fully_observed_equals_unweighted():
    clusters = [(i % 2, [float(i), float(i) * 0.5 + 1.0],
                 {"z1": 0.1 * i, "x1": [0.0, 1.0]}) for i in range(10)]
    ds = make_two_level(clusters)
    ms = derive_missingness(ds)
    config = FitConfig(WeightMethod.CC)
    fit = fit_marginal(ds, config)
    ones = WeightSpec(WeightMethod.CC, np.ones(ds.n_units))
    ref = solve_gee(ds, ms, MarginalModel(Link.IDENTITY),
                    WorkingCorrelation.exchangeable(), ones)
    np.testing.assert_allclose(fit.beta, ref.beta, atol=1e-12)


def test_fit_marginal_validations():
    with pytest.raises(ConfigError):
        FitConfig(WeightMethod.IPW).validate()
    with pytest.raises(ConfigError):
        FitConfig(WeightMethod.MIPW).validate()
    with pytest.raises(ConfigError):
        FitConfig(WeightMethod.MMR).validate()
    uf = parse_formula("R ~ 1 + A", Level.INDIVIDUAL)
    gf = parse_formula("C ~ 1 + A", Level.CLUSTER)
    with pytest.raises(ConfigError):
        FitConfig(WeightMethod.MIPW, individual_formulas=(uf, uf),
                  cluster_formulas=(gf,)).validate()


def test_arm_empty():
    ds = make_two_level([
        (1, [1.0, 2.0], {"z1": 0.0, "x1": [0, 0]}),
        (1, [3.0], {"z1": 0.0, "x1": [0]}),
        (0, [None, None], {"z1": 0.0, "x1": [0, 0]}),
    ])
    ms = derive_missingness(ds)
    wspec = build_weight_spec(WeightMethod.CC, ds, ms)
    with pytest.raises(ArmEmpty):
        solve_gee(ds, ms, MarginalModel(Link.IDENTITY),
                  WorkingCorrelation.independence(), wspec)


def test_block_requires_three_level(rng):
    ds = random_missing_dataset(rng)
    ms = derive_missingness(ds)
    wspec = build_weight_spec(WeightMethod.CC, ds, ms)
    with pytest.raises(ConfigError):
        solve_gee(ds, ms, MarginalModel(Link.IDENTITY),
                  WorkingCorrelation.block(0.2, 0.1), wspec)
