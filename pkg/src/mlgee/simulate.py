"""Synthetic trial generators and the Monte Carlo study harness.

Six built-in two-level scenarios cover a null and a positive marginal effect
at three cluster-size/ICC settings, using published coefficient vectors for
the outcome and observation models.  Covariate moments are calibrated so the
marginal truths hold exactly; see each scenario's ``covariate_law`` for the
frozen constants.  A small three-level scenario (clearly synthetic, used by
the property tests) exercises subcluster-level missingness.

Replicate streams are derived from (seed, replicate index), so studies are
reproducible bit-for-bit regardless of how many workers run them.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.stats import truncnorm

from .data_model import ClusteredDataset, Level, Nesting, derive_missingness
from .exceptions import ConfigError, MlgeeError
from .formulas import parse_formula
from .gee import FitConfig, Link, WeightMethod, WorkingCorrelation
from .inference import cluster_bootstrap, summarize_study
from .propensity import expit

METHOD_TOKENS = ("cc", "ipw", "mipw-no-em", "mipw-em", "mmr")


@dataclass(frozen=True)
class SizeLaw:
    """Cluster (or subcluster) size distribution."""

    kind: str                 # "fixed" or "discrete-uniform"
    n: Optional[int] = None
    low: Optional[int] = None
    high: Optional[int] = None

    @staticmethod
    def fixed(n: int) -> "SizeLaw":
        return SizeLaw(kind="fixed", n=n)

    @staticmethod
    def discrete_uniform(low: int, high: int) -> "SizeLaw":
        return SizeLaw(kind="discrete-uniform", low=low, high=high)

    def draw(self, rng: np.random.Generator, count: int) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(count, int(self.n), dtype=np.int64)
        return rng.integers(int(self.low), int(self.high) + 1, size=count)

    def label(self) -> str:
        if self.kind == "fixed":
            return f"n={self.n}"
        return f"DU({self.low},{self.high})"


@dataclass(frozen=True)
class Scenario:
    """A complete data-generating configuration plus its analysis models."""

    name: str
    family: str                    # generator dispatch key
    n_clusters: int
    size_law: SizeLaw
    icc: float
    sigma_eps2: float
    outcome_params: dict
    ps_params: dict
    covariate_law: dict
    truth: tuple                   # (marginal intercept, marginal effect)
    formulas: dict                 # role -> formula text
    link: str = "identity"

    @property
    def sigma_delta2(self) -> float:
        return self.icc * self.sigma_eps2 / (1.0 - self.icc)

    @property
    def nesting(self) -> Nesting:
        return Nesting.THREE_LEVEL if self.family == "three-level" \
            else Nesting.TWO_LEVEL

    def group_level(self) -> Level:
        return Level.SUBCLUSTER if self.nesting is Nesting.THREE_LEVEL \
            else Level.CLUSTER

    def formula(self, role: str):
        text = self.formulas[role]
        level = self.group_level() if role.startswith("group") \
            else Level.INDIVIDUAL
        return parse_formula(text, level)

    def to_json(self) -> str:
        payload = asdict(self)
        payload["truth"] = list(self.truth)
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "Scenario":
        def tuplify(value):
            if isinstance(value, list):
                return tuple(tuplify(v) for v in value)
            if isinstance(value, dict):
                return {k: tuplify(v) for k, v in value.items()}
            return value

        payload = json.loads(text)
        payload["size_law"] = SizeLaw(**payload["size_law"])
        for key in ("outcome_params", "ps_params", "covariate_law",
                    "formulas", "truth"):
            payload[key] = tuplify(payload[key])
        return Scenario(**payload)


# ----------------------------------------------------------- null scenarios
#
# The observation-model and outcome coefficient vectors below are fixed
# inputs of the study design.  The free covariate moments (household-size
# range, education proportion, mean of the bounded age distribution) are
# calibrated so the marginal truths are exactly (63.5, 0); the remaining
# moments follow the anemia-trial summary table.

ANEMIA_OUTCOME = {
    "intercept": 43.5,
    "treatment": 0.5,
    # household size, household education, wealth
    "cluster_cov": (0.5, 0.8, 0.7),
    "cluster_cov_x_treatment": (0.3, -1.5, 0.2),
    # age, wasting, stunting
    "unit_cov": (0.8, 1.5, -0.5),
    "unit_cov_x_treatment": (-0.1, 0.5, -1.1),
}

ANEMIA_PS = {
    # 1, A, household size, education, wealth, A:size, A:educ, A:wealth
    "group": (1.10, -0.29, 0.18, -0.29, -0.22, 0.26, -0.51, -0.36),
    # 1, A, complementary foods, wasting, stunting, A:wasting, A:stunting
    "unit": (1.73, -0.36, 0.10, -0.11, 0.18, -0.36, 0.41),
}

ANEMIA_COVARIATES = {
    "hh_size": {"law": "discrete-uniform", "low": 2, "high": 11},
    "hh_educ": {"law": "bernoulli", "p": 0.7888392857142857},  # calibrated
    "wealth": {"law": "bernoulli", "p": 0.51},
    "comp_foods": {"law": "bernoulli", "p": 0.875},
    "age": {"law": "truncated-normal", "loc": 19.236352780858855,  # calibrated
            "scale": 8.6, "low": 6.0, "high": 46.0},
    "zscores": {"law": "multivariate-normal",
                "names": ("wasting", "stunting", "underweight"),
                "means": (-0.63, -0.89, -0.92),
                "sds": (0.97, 1.18, 0.98),
                "correlation": 0.1},
    "male": {"law": "bernoulli", "p": 0.51},
    "hemoglobin": {"law": "normal", "mean": 10.3, "sd": 1.3},
    "iron_food": {"law": "logistic-normal", "p": 0.023, "cluster_sd": 0.05},
}

ANEMIA_FORMULAS = {
    "group": "C ~ 1 + A + hh_size + hh_educ + wealth"
             " + A:hh_size + A:hh_educ + A:wealth",
    "unit": "R ~ 1 + A + comp_foods + wasting + stunting"
            " + A:wasting + A:stunting",
    "group_alt": "C ~ 1 + A + comp_foods + A:comp_foods",
    "unit_alt": "R ~ 1 + A + comp_foods + age + underweight",
    "ipw": "R ~ 1 + A + comp_foods + wasting + stunting"
           " + A:wasting + A:stunting",
}

# ---------------------------------------------------- alternative scenarios

ALT_OUTCOME = {
    "intercept": 0.0,
    "treatment": 1.5,
    "cluster_cov": (2.0, -2.5, 1.0, -1.0),        # z1..z4
    "cluster_cov_x_treatment": (0.8, -0.4, 1.0, -1.0),
    "unit_cov": (1.0, 1.2, 0.5, -0.5),            # x1..x4
    "unit_cov_x_treatment": (0.5, 0.3, 1.0, -1.0),
}

ALT_PS = {
    # 1, A, z3, z4, A:z3, A:z4
    "group": (2.44, 0.18, 0.12, -0.39, -0.22, -0.29),
    # 1, A, z3, x1..x4, A:z3, A:x1..A:x4
    "unit": (1.73, -0.22, -0.16, 0.18, 0.26, 0.03, 0.18,
             -0.05, 0.18, 0.26, -0.22, -0.29),
}

ALT_COVARIATES = {
    "x": {"law": "multivariate-normal", "names": ("x1", "x2", "x3"),
          "means": (0.0, 0.0, 0.0), "sds": (1.0, 1.2, 0.8),
          "correlation": 0.1},
    "x4": {"law": "centered-square-of", "base": "x1"},
    "z12": {"law": "cluster-means-of", "bases": ("x1", "x2")},
    "z3": {"law": "poisson", "rate": 1.2},
    "z4": {"law": "normal", "mean": 1.2, "sd": 1.0},
}

ALT_FORMULAS = {
    "group": "C ~ 1 + A + z3 + z4 + A:z3 + A:z4",
    "unit": "R ~ 1 + A + z3 + x1 + x2 + x3 + x4"
            " + A:z3 + A:x1 + A:x2 + A:x3 + A:x4",
    "group_alt": "C ~ 1 + A + z1 + A:z1",
    "unit_alt": "R ~ 1 + A + z1 + x2 + A:z1 + A:x2",
    "ipw": "R ~ 1 + A + z3 + x1 + x2 + x3 + x4"
           " + A:z3 + A:x1 + A:x2 + A:x3 + A:x4",
}

THREE_LEVEL_COVARIATES = {
    "zc": {"law": "normal", "mean": 0.0, "sd": 1.0, "level": "cluster"},
    "zs": {"law": "normal", "mean": 0.0, "sd": 1.0, "level": "subcluster"},
    "xu": {"law": "normal", "mean": 0.0, "sd": 1.0, "level": "unit"},
}

THREE_LEVEL_FORMULAS = {
    "group": "C ~ 1 + A + zs",
    "unit": "R ~ 1 + A + zs + xu",
    "group_alt": "C ~ 1 + A",
    "unit_alt": "R ~ 1 + A + xu",
    "ipw": "R ~ 1 + A + zs + xu",
}


def builtin_scenarios() -> list:
    """The six two-level study scenarios plus the synthetic three-level one."""
    out = [
        Scenario(
            name="null-du15", family="anemia-null", n_clusters=1552,
            size_law=SizeLaw.discrete_uniform(1, 5), icc=0.0804,
            sigma_eps2=0.5, outcome_params=ANEMIA_OUTCOME,
            ps_params=ANEMIA_PS, covariate_law=ANEMIA_COVARIATES,
            truth=(63.5, 0.0), formulas=ANEMIA_FORMULAS,
        ),
        Scenario(
            name="null-n3", family="anemia-null", n_clusters=1552,
            size_law=SizeLaw.fixed(3), icc=0.0804, sigma_eps2=0.5,
            outcome_params=ANEMIA_OUTCOME, ps_params=ANEMIA_PS,
            covariate_law=ANEMIA_COVARIATES, truth=(63.5, 0.0),
            formulas=ANEMIA_FORMULAS,
        ),
        Scenario(
            name="null-du3050", family="anemia-null", n_clusters=300,
            size_law=SizeLaw.discrete_uniform(30, 50), icc=0.2,
            sigma_eps2=5.0, outcome_params=ANEMIA_OUTCOME,
            ps_params=ANEMIA_PS, covariate_law=ANEMIA_COVARIATES,
            truth=(63.5, 0.0), formulas=ANEMIA_FORMULAS,
        ),
        Scenario(
            name="alt-du14", family="synthetic-alt", n_clusters=1552,
            size_law=SizeLaw.discrete_uniform(1, 4), icc=0.0804,
            sigma_eps2=0.5, outcome_params=ALT_OUTCOME, ps_params=ALT_PS,
            covariate_law=ALT_COVARIATES, truth=(0.0, 1.5),
            formulas=ALT_FORMULAS,
        ),
        Scenario(
            name="alt-n3", family="synthetic-alt", n_clusters=1552,
            size_law=SizeLaw.fixed(3), icc=0.2, sigma_eps2=5.0,
            outcome_params=ALT_OUTCOME, ps_params=ALT_PS,
            covariate_law=ALT_COVARIATES, truth=(0.0, 1.5),
            formulas=ALT_FORMULAS,
        ),
        Scenario(
            name="alt-du3050", family="synthetic-alt", n_clusters=300,
            size_law=SizeLaw.discrete_uniform(30, 50), icc=0.2,
            sigma_eps2=5.0, outcome_params=ALT_OUTCOME, ps_params=ALT_PS,
            covariate_law=ALT_COVARIATES, truth=(0.0, 1.5),
            formulas=ALT_FORMULAS,
        ),
        Scenario(
            name="three-level-demo", family="three-level", n_clusters=60,
            size_law=SizeLaw.discrete_uniform(2, 4), icc=0.15,
            sigma_eps2=0.49, outcome_params={"intercept": 1.0,
                                             "treatment": 0.8},
            ps_params={"group": (1.6, -0.4, 0.5),
                       "unit": (1.4, -0.3, 0.3, 0.25)},
            covariate_law=THREE_LEVEL_COVARIATES, truth=(1.0, 0.8),
            formulas=THREE_LEVEL_FORMULAS,
        ),
    ]
    return out


def get_scenario(name: str) -> Scenario:
    for sc in builtin_scenarios():
        if sc.name == name:
            return sc
    raise ConfigError(f"unknown scenario {name!r}; "
                      f"choose from {[s.name for s in builtin_scenarios()]}")


# ------------------------------------------------------------- generators


def _correlated_normals(rng, means, sds, corr, n):
    d = len(means)
    cov = np.full((d, d), corr)
    np.fill_diagonal(cov, 1.0)
    cov *= np.outer(sds, sds)
    L = np.linalg.cholesky(cov)
    z = rng.standard_normal((n, d))
    return z @ L.T + np.asarray(means)


def _generate_anemia_null(sc: Scenario, rng: np.random.Generator):
    M = sc.n_clusters
    sizes = sc.size_law.draw(rng, M)
    n = int(sizes.sum())
    cl = np.repeat(np.arange(M), sizes)

    a_cluster = rng.integers(0, 2, size=M).astype(np.int8)
    law = sc.covariate_law
    hh = rng.integers(law["hh_size"]["low"], law["hh_size"]["high"] + 1,
                      size=M).astype(np.float64)
    educ = (rng.random(M) < law["hh_educ"]["p"]).astype(np.float64)
    wealth = (rng.random(M) < law["wealth"]["p"]).astype(np.float64)
    comp = (rng.random(M) < law["comp_foods"]["p"]).astype(np.float64)

    age_law = law["age"]
    a_std = (age_law["low"] - age_law["loc"]) / age_law["scale"]
    b_std = (age_law["high"] - age_law["loc"]) / age_law["scale"]
    age = truncnorm.rvs(a_std, b_std, loc=age_law["loc"],
                        scale=age_law["scale"], size=n, random_state=rng)

    zl = law["zscores"]
    zmat = _correlated_normals(rng, zl["means"], zl["sds"],
                               zl["correlation"], n)
    wasting, stunting, underweight = zmat[:, 0], zmat[:, 1], zmat[:, 2]

    male = (rng.random(n) < law["male"]["p"]).astype(np.float64)
    hemoglobin = rng.normal(law["hemoglobin"]["mean"],
                            law["hemoglobin"]["sd"], size=n)
    il = law["iron_food"]
    base_logit = math.log(il["p"] / (1 - il["p"]))
    iron_logit = rng.normal(base_logit, il["cluster_sd"], size=M)
    iron = (rng.random(n) < expit(iron_logit)[cl]).astype(np.float64)

    op = sc.outcome_params
    bz = np.asarray(op["cluster_cov"])
    baz = np.asarray(op["cluster_cov_x_treatment"])
    bx = np.asarray(op["unit_cov"])
    bax = np.asarray(op["unit_cov_x_treatment"])
    au = a_cluster[cl].astype(np.float64)
    zpart = (bz[0] * hh + bz[1] * educ + bz[2] * wealth)[cl]
    zpart_a = (baz[0] * hh + baz[1] * educ + baz[2] * wealth)[cl]
    xpart = bx[0] * age + bx[1] * wasting + bx[2] * stunting
    xpart_a = bax[0] * age + bax[1] * wasting + bax[2] * stunting
    delta = rng.normal(0.0, math.sqrt(sc.sigma_delta2), size=M)
    eps = rng.normal(0.0, math.sqrt(sc.sigma_eps2), size=n)
    y = (op["intercept"] + op["treatment"] * au + zpart + xpart
         + au * (zpart_a + xpart_a) + delta[cl] + eps)

    g = np.asarray(sc.ps_params["group"])
    lam = expit(g[0] + g[1] * a_cluster + g[2] * hh + g[3] * educ
                + g[4] * wealth + a_cluster * (g[5] * hh + g[6] * educ
                                               + g[7] * wealth))
    e = np.asarray(sc.ps_params["unit"])
    phi = expit(e[0] + e[1] * au + e[2] * comp[cl] + e[3] * wasting
                + e[4] * stunting + au * (e[5] * wasting + e[6] * stunting))

    c_true = (rng.random(M) < lam).astype(np.int8)
    r_unit = ((rng.random(n) < phi) & (c_true[cl] == 1)).astype(np.int8)
    outcome = np.where(r_unit == 1, y, np.nan)

    covariates = np.column_stack([
        hh[cl], educ[cl], wealth[cl], comp[cl], age,
        wasting, stunting, underweight, male, hemoglobin, iron,
    ])
    names = ("hh_size", "hh_educ", "wealth", "comp_foods", "age",
             "wasting", "stunting", "underweight", "male", "hemoglobin",
             "iron_food")
    latent = {"true_group_observed": c_true, "full_outcome": y,
              "group_probs": lam, "unit_probs": phi}
    return ClusteredDataset(
        nesting=Nesting.TWO_LEVEL, treatment_name="A", outcome_name="Y",
        covariate_names=names, treatment=a_cluster[cl].astype(np.int8),
        outcome=outcome, covariates=covariates, cluster_index=cl,
        n_clusters=M, latent=latent,
    )


def _generate_synthetic_alt(sc: Scenario, rng: np.random.Generator):
    M = sc.n_clusters
    sizes = sc.size_law.draw(rng, M)
    n = int(sizes.sum())
    cl = np.repeat(np.arange(M), sizes)

    a_cluster = rng.integers(0, 2, size=M).astype(np.int8)
    law = sc.covariate_law
    xl = law["x"]
    x123 = _correlated_normals(rng, xl["means"], xl["sds"],
                               xl["correlation"], n)
    x1, x2, x3 = x123[:, 0], x123[:, 1], x123[:, 2]
    # squared covariate centered at its mean so the stated truths hold
    x4 = x1 * x1 - float(xl["sds"][0]) ** 2
    z1 = np.bincount(cl, weights=x1, minlength=M) / sizes
    z2 = np.bincount(cl, weights=x2, minlength=M) / sizes
    z3 = rng.poisson(law["z3"]["rate"], size=M).astype(np.float64)
    z4 = rng.normal(law["z4"]["mean"], law["z4"]["sd"], size=M)

    op = sc.outcome_params
    bz = np.asarray(op["cluster_cov"])
    baz = np.asarray(op["cluster_cov_x_treatment"])
    bx = np.asarray(op["unit_cov"])
    bax = np.asarray(op["unit_cov_x_treatment"])
    au = a_cluster[cl].astype(np.float64)
    zs = np.column_stack([z1[cl], z2[cl], z3[cl], z4[cl]])
    xs = np.column_stack([x1, x2, x3, x4])
    delta = rng.normal(0.0, math.sqrt(sc.sigma_delta2), size=M)
    eps = rng.normal(0.0, math.sqrt(sc.sigma_eps2), size=n)
    y = (op["intercept"] + op["treatment"] * au + zs @ bz + xs @ bx
         + au * (zs @ baz + xs @ bax) + delta[cl] + eps)

    g = np.asarray(sc.ps_params["group"])
    lam = expit(g[0] + g[1] * a_cluster + g[2] * z3 + g[3] * z4
                + a_cluster * (g[4] * z3 + g[5] * z4))
    e = np.asarray(sc.ps_params["unit"])
    phi = expit(e[0] + e[1] * au + e[2] * z3[cl]
                + xs @ np.asarray(e[3:7])
                + au * (e[7] * z3[cl] + xs @ np.asarray(e[8:12])))

    c_true = (rng.random(M) < lam).astype(np.int8)
    r_unit = ((rng.random(n) < phi) & (c_true[cl] == 1)).astype(np.int8)
    outcome = np.where(r_unit == 1, y, np.nan)

    covariates = np.column_stack([x1, x2, x3, x4,
                                  z1[cl], z2[cl], z3[cl], z4[cl]])
    names = ("x1", "x2", "x3", "x4", "z1", "z2", "z3", "z4")
    latent = {"true_group_observed": c_true, "full_outcome": y,
              "group_probs": lam, "unit_probs": phi}
    return ClusteredDataset(
        nesting=Nesting.TWO_LEVEL, treatment_name="A", outcome_name="Y",
        covariate_names=names, treatment=a_cluster[cl].astype(np.int8),
        outcome=outcome, covariates=covariates, cluster_index=cl,
        n_clusters=M, latent=latent,
    )


def _generate_three_level(sc: Scenario, rng: np.random.Generator):
    M = sc.n_clusters
    subs_per_cluster = sc.size_law.draw(rng, M)
    n_sub = int(subs_per_cluster.sum())
    sub_cluster = np.repeat(np.arange(M), subs_per_cluster)
    units_per_sub = rng.integers(2, 6, size=n_sub)
    n = int(units_per_sub.sum())
    sub_of_unit = np.repeat(np.arange(n_sub), units_per_sub)
    cl = sub_cluster[sub_of_unit]

    a_cluster = rng.integers(0, 2, size=M).astype(np.int8)
    zc = rng.normal(0.0, 1.0, size=M)
    zsub = rng.normal(0.0, 1.0, size=n_sub)
    xu = rng.normal(0.0, 1.0, size=n)

    op = sc.outcome_params
    au = a_cluster[cl].astype(np.float64)
    delta_c = rng.normal(0.0, 0.3, size=M)
    delta_s = rng.normal(0.0, 0.3, size=n_sub)
    eps = rng.normal(0.0, math.sqrt(sc.sigma_eps2), size=n)
    y = (op["intercept"] + op["treatment"] * au + 0.5 * zc[cl]
         + 0.4 * zsub[sub_of_unit] + 0.6 * xu
         + delta_c[cl] + delta_s[sub_of_unit] + eps)

    g = np.asarray(sc.ps_params["group"])
    lam = expit(g[0] + g[1] * a_cluster[sub_cluster] + g[2] * zsub)
    e = np.asarray(sc.ps_params["unit"])
    phi = expit(e[0] + e[1] * au + e[2] * zsub[sub_of_unit] + e[3] * xu)
    c_true = (rng.random(n_sub) < lam).astype(np.int8)
    r_unit = ((rng.random(n) < phi) & (c_true[sub_of_unit] == 1)).astype(np.int8)
    outcome = np.where(r_unit == 1, y, np.nan)

    covariates = np.column_stack([zc[cl], zsub[sub_of_unit], xu])
    latent = {"true_group_observed": c_true, "full_outcome": y,
              "group_probs": lam, "unit_probs": phi}
    return ClusteredDataset(
        nesting=Nesting.THREE_LEVEL, treatment_name="A", outcome_name="Y",
        covariate_names=("zc", "zs", "xu"),
        treatment=a_cluster[cl].astype(np.int8), outcome=outcome,
        covariates=covariates, cluster_index=cl, n_clusters=M,
        subcluster_index=sub_of_unit, subcluster_cluster=sub_cluster,
        latent=latent,
    )


_GENERATORS = {
    "anemia-null": _generate_anemia_null,
    "synthetic-alt": _generate_synthetic_alt,
    "three-level": _generate_three_level,
}


def generate_dataset(sc: Scenario, seed: int) -> ClusteredDataset:
    """Draw one synthetic trial; deterministic given (scenario, seed).

    The returned dataset carries a ``latent`` record (true group retention,
    pre-erasure outcomes, generating probabilities) for diagnostics only;
    estimators never read it.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    try:
        gen = _GENERATORS[sc.family]
    except KeyError:
        raise ConfigError(f"unknown scenario family {sc.family!r}") from None
    ds = gen(sc, rng)
    ds.validate()
    return ds


# ------------------------------------------------------------ study harness


def method_config(sc: Scenario, token: str) -> FitConfig:
    """Build the estimator configuration a scenario implies for a method."""
    token = token.lower()
    link = Link.IDENTITY if sc.link == "identity" else Link.LOGIT
    corr = WorkingCorrelation.exchangeable()
    if token == "cc":
        return FitConfig(WeightMethod.CC, link=link, correlation=corr)
    if token == "ipw":
        return FitConfig(WeightMethod.IPW, link=link, correlation=corr,
                         ipw_formula=sc.formula("ipw"))
    if token in ("mipw", "mipw-em", "mipw-no-em"):
        return FitConfig(
            WeightMethod.MIPW, link=link, correlation=corr,
            individual_formulas=(sc.formula("unit"),),
            cluster_formulas=(sc.formula("group"),),
            use_em=(token != "mipw-no-em"),
        )
    if token in ("mmr", "mmr-em", "mmr-no-em"):
        return FitConfig(
            WeightMethod.MMR, link=link, correlation=corr,
            individual_formulas=(sc.formula("unit"), sc.formula("unit_alt")),
            cluster_formulas=(sc.formula("group"), sc.formula("group_alt")),
            use_em=(token != "mmr-no-em"),
        )
    raise ConfigError(f"unknown method token {token!r}; "
                      f"expected one of {METHOD_TOKENS}")


@dataclass(frozen=True)
class StudySummary:
    """Aggregated Monte Carlo results, one row per method."""

    scenario: str
    seed: int
    n_replicates: int
    bootstrap_replicates: int
    rows: tuple                       # MethodSummary, in method order
    n_failed: dict                    # method -> failed replicate count
    misclassification_match_rate: float

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "bias", "emp_se", "est_se", "coverage"])
        for row in self.rows:
            writer.writerow([row.method, repr(row.bias),
                             repr(row.empirical_se),
                             repr(row.mean_estimated_se),
                             repr(row.coverage)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


def _study_replicate(args):
    sc, methods, bootstrap_b, seed, rep = args
    data_seed = int(np.random.SeedSequence(
        entropy=seed, spawn_key=(rep, 0)).generate_state(1)[0])
    ds = generate_dataset(sc, data_seed)
    ms = derive_missingness(ds)
    match_rate = float(np.mean(
        ds.latent["true_group_observed"] == ms.group_observed))
    out = {}
    for mi, token in enumerate(methods):
        config = method_config(sc, token)
        boot_seed = int(np.random.SeedSequence(
            entropy=seed, spawn_key=(rep, 1, mi)).generate_state(1)[0])
        try:
            boot = cluster_bootstrap(ds, config, bootstrap_b, boot_seed)
            ci = (float(boot.ci_normal[1, 0]), float(boot.ci_normal[1, 1]))
            out[token] = (boot.point.effect, boot.effect_se, ci)
        except MlgeeError:
            out[token] = None
    return rep, match_rate, out


def run_study(sc: Scenario, methods, n_replicates: int,
              bootstrap_replicates: int, seed: int, *,
              threads: int = 1) -> StudySummary:
    """Monte Carlo study: generate, fit every method, bootstrap, aggregate.

    Replicates run in a process pool when ``threads`` exceeds one; the
    summary is identical for any worker count.
    """
    methods = [m.lower() for m in methods]
    for token in methods:
        method_config(sc, token)  # validate early
    jobs = [(sc, tuple(methods), bootstrap_replicates, seed, r)
            for r in range(n_replicates)]
    results = [None] * n_replicates
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for rep, match, out in pool.map(_study_replicate, jobs,
                                            chunksize=1):
                results[rep] = (match, out)
    else:
        for job in jobs:
            rep, match, out = _study_replicate(job)
            results[rep] = (match, out)

    match_rate = float(np.mean([m for m, _ in results]))
    rows = []
    failed = {}
    truth_effect = float(sc.truth[1])
    for token in methods:
        triples = [out[token] for _, out in results if out[token] is not None]
        failed[token] = n_replicates - len(triples)
        rows.append(summarize_study(triples, truth_effect, method=token))
    return StudySummary(
        scenario=sc.name,
        seed=seed,
        n_replicates=n_replicates,
        bootstrap_replicates=bootstrap_replicates,
        rows=tuple(rows),
        n_failed=failed,
        misclassification_match_rate=match_rate,
    )


# ----------------------------------------------- observation-model recovery


@dataclass(frozen=True)
class PSRecoveryStudy:
    """Mean absolute bias of observation-model parameters, EM vs naive."""

    scenario: str
    n_replicates: int
    group_names: tuple
    unit_names: tuple
    group_bias_em: np.ndarray
    group_bias_naive: np.ndarray
    unit_bias_em: np.ndarray
    unit_bias_naive: np.ndarray
    unit_mean_abs_diff: np.ndarray     # |EM - naive| per coefficient
    group_mean_abs_diff: np.ndarray


def _recovery_replicate(args):
    sc, seed, rep = args
    from .em_misclass import fit_em, naive_fits

    data_seed = int(np.random.SeedSequence(
        entropy=seed, spawn_key=(rep, 0)).generate_state(1)[0])
    ds = generate_dataset(sc, data_seed)
    ms = derive_missingness(ds)
    gf, uf = sc.formula("group"), sc.formula("unit")
    g_naive, u_naive = naive_fits(ds, ms, gf, uf)
    em = fit_em(ds, ms, gf, uf)
    return rep, (em.group_coefficients, em.unit_coefficients,
                 g_naive.coefficients, u_naive.coefficients)


def ps_parameter_study(sc: Scenario, n_replicates: int, seed: int, *,
                       threads: int = 1) -> PSRecoveryStudy:
    """Empirical absolute bias of the fitted observation-model parameters."""
    jobs = [(sc, seed, r) for r in range(n_replicates)]
    results = [None] * n_replicates
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for rep, coefs in pool.map(_recovery_replicate, jobs, chunksize=1):
                results[rep] = coefs
    else:
        for job in jobs:
            rep, coefs = _recovery_replicate(job)
            results[rep] = coefs

    g_true = np.asarray(sc.ps_params["group"])
    u_true = np.asarray(sc.ps_params["unit"])
    g_em = np.array([r[0] for r in results])
    u_em = np.array([r[1] for r in results])
    g_nv = np.array([r[2] for r in results])
    u_nv = np.array([r[3] for r in results])
    gf, uf = sc.formula("group"), sc.formula("unit")
    return PSRecoveryStudy(
        scenario=sc.name,
        n_replicates=n_replicates,
        group_names=gf.column_names,
        unit_names=uf.column_names,
        group_bias_em=np.abs(g_em.mean(axis=0) - g_true),
        group_bias_naive=np.abs(g_nv.mean(axis=0) - g_true),
        unit_bias_em=np.abs(u_em.mean(axis=0) - u_true),
        unit_bias_naive=np.abs(u_nv.mean(axis=0) - u_true),
        unit_mean_abs_diff=np.mean(np.abs(u_em - u_nv), axis=0),
        group_mean_abs_diff=np.mean(np.abs(g_em - g_nv), axis=0),
    )
