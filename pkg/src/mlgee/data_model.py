"""Clustered-trial data containers and missingness bookkeeping.

A dataset is a rectangle of unit records nested in clusters (two-level) or in
subclusters nested in clusters (three-level).  Treatment is assigned at the
cluster level, covariates are fully observed, and only the outcome may be
missing.  Internally everything is stored as numpy arrays sorted so that each
cluster (and subcluster) occupies a contiguous block, which lets every
group-wise reduction run as a vectorized ``bincount``/``reduceat``.

The "group" of a dataset is the level at which whole blocks of outcomes can
go missing together: the cluster for two-level data and the subcluster for
three-level data.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Optional

import numpy as np

from .exceptions import (
    BadOutcomeValue,
    DataError,
    DuplicateUnitId,
    MissingCovariateCell,
    TreatmentNotClusterConstant,
)

MISSING_TOKENS = ("", "NA")


class Nesting(Enum):
    TWO_LEVEL = "two-level"
    THREE_LEVEL = "three-level"


class Level(Enum):
    INDIVIDUAL = "individual"
    SUBCLUSTER = "subcluster"
    CLUSTER = "cluster"


@dataclass(frozen=True)
class UnitRecord:
    """One study participant."""

    cluster_id: str
    subcluster_id: Optional[str]
    unit_id: str
    treatment: int
    outcome: Optional[float]
    covariates: dict


def _starts_from_codes(codes: np.ndarray, n: int) -> np.ndarray:
    starts = np.zeros(n, dtype=np.int64)
    np.cumsum(np.bincount(codes, minlength=n)[:-1], out=starts[1:])
    return starts


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    """Immutable array-backed dataset.

    Units are stored sorted by (cluster, subcluster) first appearance, so
    ``cluster_index`` (and ``subcluster_index``) are non-decreasing.  All
    estimator code relies on that layout.  Label tuples may be ``None``, in
    which case synthetic labels are generated on demand.
    """

    nesting: Nesting
    treatment_name: str
    outcome_name: str
    covariate_names: tuple
    treatment: np.ndarray              # (n_units,) int8, cluster-constant
    outcome: np.ndarray                # (n_units,) float64, NaN where missing
    covariates: np.ndarray             # (n_units, P) float64
    cluster_index: np.ndarray          # (n_units,) int64, non-decreasing
    n_clusters: int
    subcluster_index: Optional[np.ndarray] = None
    subcluster_cluster: Optional[np.ndarray] = None  # cluster of each subcluster
    cluster_ids: Optional[tuple] = None     # label per cluster index
    subcluster_ids: Optional[tuple] = None  # label per subcluster index
    unit_ids: Optional[tuple] = None        # label per unit, normalized order
    latent: Optional[dict] = field(default=None, compare=False)

    # ------------------------------------------------------------------ sizes

    @property
    def n_units(self) -> int:
        return self.treatment.shape[0]

    @property
    def n_subclusters(self) -> int:
        return 0 if self.subcluster_cluster is None else len(self.subcluster_cluster)

    @cached_property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_index, minlength=self.n_clusters)

    # ----------------------------------------------------------------- groups

    @property
    def group_index(self) -> np.ndarray:
        """Missingness-bearing group of each unit (cluster or subcluster)."""
        if self.nesting is Nesting.THREE_LEVEL:
            return self.subcluster_index
        return self.cluster_index

    @property
    def n_groups(self) -> int:
        if self.nesting is Nesting.THREE_LEVEL:
            return self.n_subclusters
        return self.n_clusters

    @cached_property
    def group_sizes(self) -> np.ndarray:
        if self.nesting is Nesting.THREE_LEVEL:
            return np.bincount(self.subcluster_index, minlength=self.n_groups)
        return self.cluster_sizes

    @cached_property
    def group_cluster(self) -> np.ndarray:
        """Cluster index of each group."""
        if self.nesting is Nesting.THREE_LEVEL:
            return self.subcluster_cluster
        return np.arange(self.n_clusters)

    @cached_property
    def cluster_starts(self) -> np.ndarray:
        """Index of the first unit of each cluster."""
        return _starts_from_codes(self.cluster_index, self.n_clusters)

    @cached_property
    def group_starts(self) -> np.ndarray:
        """Index of the first unit of each group."""
        if self.nesting is Nesting.THREE_LEVEL:
            return _starts_from_codes(self.subcluster_index, self.n_groups)
        return self.cluster_starts

    @cached_property
    def cluster_treatment(self) -> np.ndarray:
        return self.treatment[self.cluster_starts]

    # -------------------------------------------------------------- variables

    def has_variable(self, name: str) -> bool:
        return name == self.treatment_name or name in self.covariate_names

    def variable(self, name: str) -> np.ndarray:
        """Per-unit column for the treatment or a covariate."""
        if name == self.treatment_name:
            return self.treatment.astype(np.float64)
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise KeyError(name) from None
        return self.covariates[:, j]

    def is_constant_within(self, name: str, level: Level) -> bool:
        """True if the variable takes one value per cluster/subcluster."""
        values = self.variable(name)
        if level is Level.CLUSTER:
            starts = self.cluster_starts
        else:
            if self.subcluster_index is None:
                return False
            starts = _starts_from_codes(self.subcluster_index, self.n_subclusters)
        lo = np.minimum.reduceat(values, starts)
        hi = np.maximum.reduceat(values, starts)
        return bool(np.all(lo == hi))

    # ----------------------------------------------------------------- labels

    def cluster_label(self, i: int) -> str:
        return f"c{i}" if self.cluster_ids is None else self.cluster_ids[i]

    def subcluster_label(self, i: int) -> str:
        return f"s{i}" if self.subcluster_ids is None else self.subcluster_ids[i]

    def unit_label(self, i: int) -> str:
        return f"u{i}" if self.unit_ids is None else self.unit_ids[i]

    # ------------------------------------------------------------ constructors

    @classmethod
    def from_units(cls, units, *, nesting, treatment_name, outcome_name,
                   covariate_names=None, latent=None) -> "ClusteredDataset":
        """Build a dataset from ``UnitRecord`` rows (any input order)."""
        if not units:
            raise DataError("dataset has no units")
        if covariate_names is None:
            covariate_names = tuple(sorted(units[0].covariates))
        else:
            covariate_names = tuple(covariate_names)

        cluster_order, cluster_code = {}, []
        sub_order, sub_code = {}, []
        for u in units:
            ci = cluster_order.setdefault(u.cluster_id, len(cluster_order))
            cluster_code.append(ci)
            if nesting is Nesting.THREE_LEVEL:
                if u.subcluster_id is None:
                    raise DataError(
                        f"unit {u.unit_id!r} lacks a subcluster id in a "
                        "three-level dataset"
                    )
                si = sub_order.setdefault((ci, u.subcluster_id), len(sub_order))
                sub_code.append(si)

        seen = set()
        for u in units:
            key = (u.cluster_id, u.subcluster_id, u.unit_id)
            if key in seen:
                raise DuplicateUnitId(key)
            seen.add(key)

        cluster_code = np.asarray(cluster_code, dtype=np.int64)
        if nesting is Nesting.THREE_LEVEL:
            sub_code = np.asarray(sub_code, dtype=np.int64)
            # renumber subclusters cluster-major so sorting nests correctly
            sub_keys = sorted(sub_order, key=sub_order.get)
            rank = np.argsort(
                np.array([k[0] for k in sub_keys], dtype=np.int64),
                kind="stable",
            )
            new_of_old = np.empty(len(sub_keys), dtype=np.int64)
            new_of_old[rank] = np.arange(len(sub_keys))
            sub_code = new_of_old[sub_code]
            order = np.lexsort((np.arange(len(units)), sub_code, cluster_code))
        else:
            order = np.lexsort((np.arange(len(units)), cluster_code))

        n = len(units)
        p = len(covariate_names)
        treatment = np.empty(n, dtype=np.int8)
        outcome = np.empty(n, dtype=np.float64)
        covs = np.empty((n, p), dtype=np.float64)
        unit_ids = []
        for pos, idx in enumerate(order):
            u = units[idx]
            if u.treatment not in (0, 1):
                raise DataError(
                    f"treatment must be 0 or 1, got {u.treatment!r} "
                    f"for unit {u.unit_id!r}"
                )
            treatment[pos] = u.treatment
            outcome[pos] = math.nan if u.outcome is None else float(u.outcome)
            for j, name in enumerate(covariate_names):
                if name not in u.covariates or u.covariates[name] is None:
                    raise MissingCovariateCell(int(idx), name)
                covs[pos, j] = float(u.covariates[name])
            unit_ids.append(u.unit_id)

        cluster_labels = tuple(sorted(cluster_order, key=cluster_order.get))
        kwargs = {}
        if nesting is Nesting.THREE_LEVEL:
            sub_labels = [None] * len(sub_keys)
            sub_clusters = np.empty(len(sub_keys), dtype=np.int64)
            for old, key in enumerate(sub_keys):
                sub_labels[new_of_old[old]] = key[1]
                sub_clusters[new_of_old[old]] = key[0]
            kwargs = dict(
                subcluster_index=sub_code[order],
                subcluster_cluster=sub_clusters,
                subcluster_ids=tuple(sub_labels),
            )
        ds = cls(
            nesting=nesting,
            treatment_name=treatment_name,
            outcome_name=outcome_name,
            covariate_names=covariate_names,
            treatment=treatment,
            outcome=outcome,
            covariates=covs,
            cluster_index=cluster_code[order],
            n_clusters=len(cluster_labels),
            cluster_ids=cluster_labels,
            unit_ids=tuple(unit_ids),
            latent=latent,
            **kwargs,
        )
        ds.validate()
        return ds

    # ------------------------------------------------------------- invariants

    def validate(self) -> None:
        if self.n_units == 0:
            raise DataError("dataset has no units")
        if np.any(np.diff(self.cluster_index) < 0):
            raise DataError("internal error: cluster index not normalized")
        t = self.treatment
        starts = self.cluster_starts
        lo = np.minimum.reduceat(t, starts)
        hi = np.maximum.reduceat(t, starts)
        bad = np.nonzero(lo != hi)[0]
        if bad.size:
            raise TreatmentNotClusterConstant(self.cluster_label(int(bad[0])))
        if not np.isin(t, (0, 1)).all():
            raise DataError("treatment values must be 0 or 1")
        if np.isnan(self.covariates).any():
            i, j = np.argwhere(np.isnan(self.covariates))[0]
            raise MissingCovariateCell(int(i), self.covariate_names[int(j)])
        if self.nesting is Nesting.THREE_LEVEL:
            if self.subcluster_index is None or self.subcluster_cluster is None:
                raise DataError("three-level dataset lacks subcluster structure")

    # ------------------------------------------------------------ conversions

    @property
    def units(self) -> list:
        """Materialize the rows as ``UnitRecord`` objects (normalized order)."""
        out = []
        for i in range(self.n_units):
            y = self.outcome[i]
            out.append(UnitRecord(
                cluster_id=self.cluster_label(self.cluster_index[i]),
                subcluster_id=None if self.subcluster_index is None
                else self.subcluster_label(self.subcluster_index[i]),
                unit_id=self.unit_label(i),
                treatment=int(self.treatment[i]),
                outcome=None if math.isnan(y) else float(y),
                covariates={name: float(self.covariates[i, j])
                            for j, name in enumerate(self.covariate_names)},
            ))
        return out

    def resample_clusters(self, draw: np.ndarray) -> "ClusteredDataset":
        """Bootstrap helper: rebuild the dataset from drawn cluster indices.

        Each drawn cluster becomes a fresh, distinct cluster in the result,
        so duplicated draws count as separate clusters.
        """
        draw = np.asarray(draw, dtype=np.int64)
        starts = self.cluster_starts
        sizes = self.cluster_sizes
        sizes_drawn = sizes[draw]
        total = int(sizes_drawn.sum())
        out_starts = np.concatenate(([0], np.cumsum(sizes_drawn)[:-1]))
        take = (np.arange(total)
                - np.repeat(out_starts, sizes_drawn)
                + np.repeat(starts[draw], sizes_drawn))
        new_cluster = np.repeat(np.arange(draw.size), sizes_drawn)
        kwargs = {}
        if self.nesting is Nesting.THREE_LEVEL:
            old_sub = self.subcluster_index[take]
            change = np.empty(take.size, dtype=bool)
            change[0] = True
            change[1:] = (old_sub[1:] != old_sub[:-1]) | \
                         (new_cluster[1:] != new_cluster[:-1])
            new_sub = np.cumsum(change) - 1
            kwargs = dict(
                subcluster_index=new_sub,
                subcluster_cluster=new_cluster[np.nonzero(change)[0]],
            )
        return ClusteredDataset(
            nesting=self.nesting,
            treatment_name=self.treatment_name,
            outcome_name=self.outcome_name,
            covariate_names=self.covariate_names,
            treatment=self.treatment[take],
            outcome=self.outcome[take],
            covariates=self.covariates[take],
            cluster_index=new_cluster,
            n_clusters=int(draw.size),
            **kwargs,
        )

    # -------------------------------------------------------------- equality

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClusteredDataset):
            return NotImplemented
        same_meta = (
            self.nesting is other.nesting
            and self.treatment_name == other.treatment_name
            and self.outcome_name == other.outcome_name
            and self.covariate_names == other.covariate_names
            and self.cluster_ids == other.cluster_ids
            and self.subcluster_ids == other.subcluster_ids
            and self.unit_ids == other.unit_ids
        )
        if not same_meta:
            return False
        return (
            np.array_equal(self.treatment, other.treatment)
            and np.array_equal(self.outcome, other.outcome, equal_nan=True)
            and np.array_equal(self.covariates, other.covariates)
            and np.array_equal(self.cluster_index, other.cluster_index)
        )


@dataclass(frozen=True, eq=False)
class MissingnessSummary:
    """Derived missingness indicators for a dataset.

    ``unit_observed`` is 1 where the outcome is present.  ``group_observed``
    is 1 for every (sub)cluster with at least one observed outcome: it is the
    observable proxy for the true drop-out indicator and may misclassify a
    retained group whose outcomes all happen to be missing.
    """

    unit_observed: np.ndarray      # (n_units,) int8
    group_observed: np.ndarray     # (n_groups,) int8
    observed_counts: np.ndarray    # (n_groups,) int64
    n_observed_groups: int
    group_index: np.ndarray        # per-unit group code
    group_sizes: np.ndarray
    group_cluster: np.ndarray      # cluster index per group
    cluster_index: np.ndarray      # per-unit cluster code

    @property
    def n_observed_units(self) -> int:
        return int(self.observed_counts.sum())


def derive_missingness(ds: ClusteredDataset) -> MissingnessSummary:
    """Compute per-unit and per-group observation indicators.

    Idempotent: depends only on which outcomes are present.
    """
    observed = (~np.isnan(ds.outcome)).astype(np.int8)
    counts = np.bincount(ds.group_index, weights=observed,
                         minlength=ds.n_groups).astype(np.int64)
    group_obs = (counts > 0).astype(np.int8)
    return MissingnessSummary(
        unit_observed=observed,
        group_observed=group_obs,
        observed_counts=counts,
        n_observed_groups=int(group_obs.sum()),
        group_index=ds.group_index,
        group_sizes=ds.group_sizes,
        group_cluster=ds.group_cluster,
        cluster_index=ds.cluster_index,
    )


# --------------------------------------------------------------------- CSV IO

DEFAULT_SCHEMA = {"cluster": "cluster", "subcluster": "subcluster", "id": "id"}


def _parse_outcome(token: str, row: int) -> float:
    token = token.strip()
    if token in MISSING_TOKENS:
        return math.nan
    try:
        return float(token)
    except ValueError:
        raise BadOutcomeValue(row, token) from None


def load_dataset(path, schema: dict, nesting: Nesting) -> ClusteredDataset:
    """Read a dataset from a CSV file.

    ``schema`` maps roles to column names and must provide at least
    ``treatment`` and ``outcome``; ``cluster``, ``subcluster`` and ``id``
    default to those literal column names.  Every remaining column is taken
    as a covariate.  Empty or ``NA`` outcome cells mean missing; anything
    else non-numeric is an error.
    """
    roles = dict(DEFAULT_SCHEMA)
    roles.update(schema)
    for role in ("treatment", "outcome"):
        if role not in roles:
            raise DataError(f"schema must name the {role} column")

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file or missing header")
        header = list(reader.fieldnames)
        needed = [roles["cluster"], roles["treatment"], roles["outcome"]]
        if nesting is Nesting.THREE_LEVEL:
            needed.append(roles["subcluster"])
        for col in needed:
            if col not in header:
                raise DataError(f"{path}: required column {col!r} not found")
        reserved = {roles["cluster"], roles["subcluster"], roles["id"],
                    roles["treatment"], roles["outcome"]}
        cov_names = tuple(c for c in header if c not in reserved)

        units = []
        for rownum, row in enumerate(reader):
            covs = {}
            for c in cov_names:
                cell = (row[c] or "").strip()
                if cell in MISSING_TOKENS:
                    raise MissingCovariateCell(rownum, c)
                try:
                    covs[c] = float(cell)
                except ValueError:
                    raise MissingCovariateCell(rownum, c) from None
            t_cell = (row[roles["treatment"]] or "").strip()
            try:
                treatment = int(float(t_cell))
            except ValueError:
                raise DataError(
                    f"row {rownum}: cannot parse treatment {t_cell!r}"
                ) from None
            y = _parse_outcome(row[roles["outcome"]] or "", rownum)
            units.append(UnitRecord(
                cluster_id=row[roles["cluster"]],
                subcluster_id=row.get(roles["subcluster"])
                if nesting is Nesting.THREE_LEVEL else None,
                unit_id=row.get(roles["id"], str(rownum)) or str(rownum),
                treatment=treatment,
                outcome=None if math.isnan(y) else y,
                covariates=covs,
            ))

    return ClusteredDataset.from_units(
        units,
        nesting=nesting,
        treatment_name=roles["treatment"],
        outcome_name=roles["outcome"],
        covariate_names=cov_names,
    )


def serialize_dataset(ds: ClusteredDataset, path=None) -> str:
    """Write the dataset back to CSV (normalized row order).

    Returns the CSV text; writes it to ``path`` when given.  Loading the
    result with the same schema reproduces an identical dataset.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["cluster"]
    if ds.nesting is Nesting.THREE_LEVEL:
        header.append("subcluster")
    header += ["id", ds.treatment_name, ds.outcome_name, *ds.covariate_names]
    writer.writerow(header)
    for i in range(ds.n_units):
        row = [ds.cluster_label(ds.cluster_index[i])]
        if ds.nesting is Nesting.THREE_LEVEL:
            row.append(ds.subcluster_label(ds.subcluster_index[i]))
        y = ds.outcome[i]
        row += [ds.unit_label(i), int(ds.treatment[i]),
                "" if math.isnan(y) else repr(float(y))]
        row += [repr(float(v)) for v in ds.covariates[i]]
        writer.writerow(row)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
