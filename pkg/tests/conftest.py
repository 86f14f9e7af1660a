import numpy as np
import pytest

from mlgee.data_model import ClusteredDataset, Nesting, UnitRecord


def make_two_level(clusters, covariate_names=("z1", "x1"),
                   treatment_name="A", outcome_name="Y"):
    """Build a small dataset from [(treatment, [outcome or None], {cov: [vals]})].

    ``clusters`` is a list of (a, outcomes, covs) where covs maps names to
    per-unit value lists; cluster-level values may be given as scalars.
    """
    units = []
    for ci, (a, outcomes, covs) in enumerate(clusters):
        n = len(outcomes)
        for j in range(n):
            row = {}
            for name in covariate_names:
                v = covs.get(name, 0.0)
                row[name] = v[j] if isinstance(v, (list, tuple)) else v
            units.append(UnitRecord(
                cluster_id=f"c{ci}", subcluster_id=None, unit_id=f"c{ci}u{j}",
                treatment=a, outcome=outcomes[j], covariates=row,
            ))
    return ClusteredDataset.from_units(
        units, nesting=Nesting.TWO_LEVEL, treatment_name=treatment_name,
        outcome_name=outcome_name, covariate_names=covariate_names,
    )


def random_missing_dataset(rng, n_clusters=8, max_size=4, ensure_allmissing=True):
    """Random small two-level dataset with group- and unit-level missingness."""
    clusters = []
    for ci in range(n_clusters):
        n = int(rng.integers(1, max_size + 1))
        a = int(rng.integers(0, 2))
        z1 = float(rng.normal())
        x1 = rng.normal(size=n)
        y = rng.normal(loc=1.0 + a, size=n)
        if rng.random() < 0.25:
            obs = np.zeros(n, dtype=bool)       # whole group missing
        else:
            obs = rng.random(n) < 0.7
        outcomes = [float(v) if o else None for v, o in zip(y, obs)]
        clusters.append((a, outcomes, {"z1": z1, "x1": list(x1)}))
    # make sure both arms have at least one observed unit
    clusters.append((0, [0.5], {"z1": 0.1, "x1": [0.2]}))
    clusters.append((1, [1.5], {"z1": -0.1, "x1": [-0.2]}))
    if ensure_allmissing:
        clusters.append((0, [None, None], {"z1": 0.3, "x1": [0.1, -0.4]}))
    return make_two_level(clusters)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
