"""Shared data types: samples, matched designs, test results.

Also holds design validation, CSV ingestion, design serialization and the
standardized-difference balance table.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from carinf.errors import (
    DuplicateUnit,
    EmptySet,
    InvalidSample,
    WrongTreatedCount,
)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Sample:
    """Unit-level data: covariates, binary treatment and (optional) outcome.

    Parameters
    ----------
    unit_ids : sequence
        Opaque unique identifiers, kept as strings.
    covariates : ndarray, shape (n, p)
    treatment : ndarray of {0, 1}, shape (n,)
    outcome : ndarray, shape (n,), optional
        May be attached after matching.
    covariate_names : tuple of str
    """

    unit_ids: tuple
    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray | None = None
    covariate_names: tuple = ()

    def __post_init__(self):
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        z = np.asarray(self.treatment)
        n = len(z)
        ids = tuple(str(u) for u in self.unit_ids)
        if n < 2:
            raise InvalidSample("a sample needs at least two units")
        if x.shape[0] != n or len(ids) != n:
            raise InvalidSample("covariates, treatment and unit ids differ in length")
        if not np.all(np.isin(z, (0, 1))):
            raise InvalidSample("treatment must be coded 0/1")
        z = z.astype(np.int8)
        if z.sum() == 0 or z.sum() == n:
            raise InvalidSample("need at least one treated and one control unit")
        if not np.all(np.isfinite(x)):
            raise InvalidSample("covariate matrix has non-finite entries")
        if len(set(ids)) != n:
            raise InvalidSample("unit ids are not unique")
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise InvalidSample("covariate_names does not match the covariate columns")
        object.__setattr__(self, "unit_ids", ids)
        object.__setattr__(self, "covariates", _readonly(x))
        object.__setattr__(self, "treatment", _readonly(z))
        object.__setattr__(self, "covariate_names", names)
        if self.outcome is not None:
            y = np.asarray(self.outcome, dtype=float)
            if y.shape != (n,):
                raise InvalidSample("outcome length differs from sample size")
            object.__setattr__(self, "outcome", _readonly(y))

    @property
    def n(self) -> int:
        return len(self.treatment)

    @property
    def treated(self) -> np.ndarray:
        return np.flatnonzero(self.treatment == 1)

    @property
    def controls(self) -> np.ndarray:
        return np.flatnonzero(self.treatment == 0)

    def with_outcome(self, outcome) -> "Sample":
        return replace(self, outcome=np.asarray(outcome, dtype=float))

    def columns(self, names: Sequence[str] | None) -> np.ndarray:
        """Covariate submatrix for `names` (all columns when None)."""
        if names is None:
            return self.covariates
        idx = [self.covariate_names.index(c) for c in names]
        return self.covariates[:, idx]

    @classmethod
    def from_frame(cls, df: pd.DataFrame, treatment_col: str, outcome_col: str | None = None,
                   id_col: str | None = None, exclude: Iterable[str] = ()) -> "Sample":
        """Build a sample from a data frame; every other numeric column is a covariate."""
        skip = {treatment_col, outcome_col, id_col, *exclude} - {None}
        for c in {treatment_col, outcome_col, id_col} - {None}:
            if c not in df.columns:
                raise InvalidSample(f"column {c!r} not found")
        cov_cols = [c for c in df.columns if c not in skip]
        bad = [c for c in cov_cols if not pd.api.types.is_numeric_dtype(df[c])]
        if bad:
            raise InvalidSample(f"non-numeric covariate columns: {bad}")
        ids = df[id_col].astype(str).tolist() if id_col else [str(i) for i in range(len(df))]
        y = df[outcome_col].to_numpy(float) if outcome_col else None
        return cls(unit_ids=tuple(ids), covariates=df[cov_cols].to_numpy(float),
                   treatment=df[treatment_col].to_numpy(), outcome=y,
                   covariate_names=tuple(cov_cols))


def read_sample_csv(path, treatment_col: str, outcome_col: str | None = None,
                    id_col: str | None = None, exclude: Iterable[str] = ()) -> Sample:
    """Read a header-bearing CSV into a :class:`Sample`."""
    return Sample.from_frame(pd.read_csv(path), treatment_col, outcome_col, id_col, exclude)


@dataclass(frozen=True)
class MatchedDesign:
    """Disjoint matched sets of unit indices, treated unit first in each set.

    ``probs``, when present, is a parallel tuple giving the within-set
    probability that each unit is the treated one.
    """

    sets: tuple
    probs: tuple | None = None

    def __post_init__(self):
        sets = tuple(_readonly(np.asarray(s, dtype=np.int64)) for s in self.sets)
        object.__setattr__(self, "sets", sets)
        if self.probs is not None:
            probs = tuple(_readonly(np.asarray(p, dtype=float)) for p in self.probs)
            if len(probs) != len(sets) or any(len(p) != len(s) for p, s in zip(probs, sets)):
                raise ValueError("probs must parallel the set structure")
            object.__setattr__(self, "probs", probs)

    @classmethod
    def from_sets(cls, sets, treatment, probs=None) -> "MatchedDesign":
        """Canonicalize so the treated unit comes first; control order is kept."""
        z = np.asarray(treatment)
        out_sets, out_probs = [], []
        for k, s in enumerate(sets):
            s = np.asarray(s, dtype=np.int64)
            t = np.flatnonzero(z[s] == 1)
            order = np.r_[t, np.flatnonzero(z[s] != 1)] if len(t) == 1 else np.arange(len(s))
            out_sets.append(s[order])
            if probs is not None:
                out_probs.append(np.asarray(probs[k], dtype=float)[order])
        return cls(tuple(out_sets), tuple(out_probs) if probs is not None else None)

    @property
    def n_sets(self) -> int:
        return len(self.sets)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self.sets], dtype=np.int64)

    @property
    def units(self) -> np.ndarray:
        return np.concatenate(self.sets) if self.sets else np.empty(0, dtype=np.int64)

    def with_probs(self, probs) -> "MatchedDesign":
        return MatchedDesign(self.sets, tuple(probs))

    def uniform(self) -> "MatchedDesign":
        """Same sets with p_ki = 1/n_k (the classical permutation distribution)."""
        return self.with_probs([np.full(len(s), 1.0 / len(s)) for s in self.sets])

    def padded(self, values=None):
        """Pack per-set data into a rectangular (K, max n_k) layout.

        Returns ``(index, mask)`` or, when `values` (a unit-indexed array) is
        given, ``(values_padded, mask)``. Padding slots hold 0.
        """
        m = int(self.sizes.max())
        mask = np.arange(m)[None, :] < self.sizes[:, None]
        idx = np.zeros((self.n_sets, m), dtype=np.int64)
        idx[mask] = self.units
        if values is None:
            return idx, mask
        vals = np.where(mask, np.asarray(values)[idx], 0)
        return vals, mask

    def padded_probs(self) -> np.ndarray:
        if self.probs is None:
            from carinf.errors import MissingProbs
            raise MissingProbs("design has no assignment probabilities attached")
        _, mask = self.padded()
        out = np.zeros(mask.shape)
        out[mask] = np.concatenate(self.probs)
        return out

    def treated_positions(self, treatment) -> np.ndarray:
        """Position of the treated unit within each set under `treatment`."""
        z, mask = self.padded(np.asarray(treatment))
        z = np.where(mask, z, 0)
        if np.any(z.sum(axis=1) != 1):
            raise WrongTreatedCount("every set needs exactly one treated unit")
        return np.argmax(z, axis=1)


def validate_design(sample: Sample, design: MatchedDesign, atol: float = 1e-9) -> None:
    """Raise if `design` is not a valid one-treated-per-set design on `sample`.

    Raises
    ------
    EmptySet, DuplicateUnit, WrongTreatedCount, ValueError
    """
    seen = set()
    for k, s in enumerate(design.sets):
        if len(s) == 0:
            raise EmptySet(f"set {k} is empty")
        if len(s) < 2:
            raise WrongTreatedCount(f"set {k} has no control unit")
        if np.any(s < 0) or np.any(s >= sample.n):
            raise ValueError(f"set {k} refers to units outside the sample")
        for u in s.tolist():
            if u in seen:
                raise DuplicateUnit(f"unit {sample.unit_ids[u]} appears in more than one set")
            seen.add(u)
        n_treated = int(sample.treatment[s].sum())
        if n_treated != 1:
            raise WrongTreatedCount(f"set {k} has {n_treated} treated units")
    if design.probs is not None:
        for k, p in enumerate(design.probs):
            if np.any(p <= 0) or abs(p.sum() - 1.0) > atol:
                raise ValueError(f"probabilities in set {k} are not a positive distribution")


@dataclass(frozen=True)
class TestResult:
    """Outcome of a randomization test of the sharp null."""

    statistic: float
    null_mean: float
    null_variance: float
    p_value: float
    sided: str
    method: str
    draws: int | None = None
    mc_std_error: float | None = None
    seed: int | None = None

    __test__ = False  # keep pytest from collecting this class

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError("p_value outside [0, 1]")
        if self.null_variance < 0:
            raise ValueError("negative null variance")
        if (self.method == "monte_carlo") != (self.mc_std_error is not None):
            raise ValueError("mc_std_error is reported exactly for Monte Carlo tests")

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class BalanceTable:
    """Standardized differences per covariate; `zero_variance` flags constant columns."""

    names: tuple
    before: np.ndarray
    after: np.ndarray | None = None
    zero_variance: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"covariate": self.names, "before": self.before})
        if self.after is not None:
            df["after"] = self.after
        df["zero_variance"] = self.zero_variance
        return df


def standardized_differences(sample: Sample, design: MatchedDesign | None = None,
                             columns: Sequence[str] | None = None) -> BalanceTable:
    """Treated-minus-control mean differences in units of the pooled pre-match SD.

    The pooled SD is the square root of the average of the two group
    variances on the full (unmatched) sample, so before/after columns share
    a denominator.
    """
    x = sample.columns(columns)
    z = sample.treatment.astype(bool)
    names = tuple(columns) if columns is not None else sample.covariate_names
    sd = np.sqrt((x[z].var(axis=0, ddof=1) + x[~z].var(axis=0, ddof=1)) / 2.0)
    zero = ~(sd > 0)
    denom = np.where(zero, 1.0, sd)

    def diff(t_rows, c_rows):
        d = (x[t_rows].mean(axis=0) - x[c_rows].mean(axis=0)) / denom
        return np.where(zero, 0.0, d)

    before = diff(z, ~z)
    after = None
    if design is not None:
        units = design.units
        zu = z[units]
        after = diff(units[zu], units[~zu])
    return BalanceTable(names, before, after, zero)


# -- serialization ---------------------------------------------------------------

def design_to_text(design: MatchedDesign, sample: Sample) -> str:
    """Line format ``set_index,unit_id,role,p`` (p empty when absent)."""
    buf = io.StringIO()
    buf.write("set_index,unit_id,role,p\n")
    for k, s in enumerate(design.sets):
        for j, u in enumerate(s.tolist()):
            role = "T" if sample.treatment[u] == 1 else "C"
            p = repr(float(design.probs[k][j])) if design.probs is not None else ""
            buf.write(f"{k},{sample.unit_ids[u]},{role},{p}\n")
    return buf.getvalue()


def design_from_text(text: str, sample: Sample) -> MatchedDesign:
    lookup = {u: i for i, u in enumerate(sample.unit_ids)}
    rows = [ln.split(",") for ln in text.strip().splitlines()[1:] if ln.strip()]
    sets: dict[int, list] = {}
    probs: dict[int, list] = {}
    has_p = bool(rows) and rows[0][3] != ""
    for k, uid, role, p in rows:
        k = int(k)
        u = lookup[uid]
        if (role == "T") != (sample.treatment[u] == 1):
            raise ValueError(f"role {role} for unit {uid} disagrees with the sample")
        sets.setdefault(k, []).append(u)
        if has_p:
            probs.setdefault(k, []).append(float(p))
    keys = sorted(sets)
    return MatchedDesign(tuple(sets[k] for k in keys),
                         tuple(probs[k] for k in keys) if has_p else None)


def design_to_json(design: MatchedDesign, sample: Sample) -> str:
    out = []
    for k, s in enumerate(design.sets):
        entry = {"set_index": k, "units": [sample.unit_ids[u] for u in s.tolist()],
                 "roles": ["T" if sample.treatment[u] == 1 else "C" for u in s.tolist()]}
        if design.probs is not None:
            entry["p"] = [float(v) for v in design.probs[k]]
        out.append(entry)
    return json.dumps({"sets": out}, indent=1)


def design_from_json(text: str, sample: Sample) -> MatchedDesign:
    lookup = {u: i for i, u in enumerate(sample.unit_ids)}
    sets = json.loads(text)["sets"]
    idx = tuple([lookup[u] for u in s["units"]] for s in sets)
    probs = tuple(s["p"] for s in sets) if sets and "p" in sets[0] else None
    return MatchedDesign(idx, probs)


def sample_to_frame(sample: Sample, treatment_col="z", outcome_col="y", id_col="unit_id") -> pd.DataFrame:
    df = pd.DataFrame(sample.covariates, columns=list(sample.covariate_names))
    df.insert(0, id_col, list(sample.unit_ids))
    df[treatment_col] = sample.treatment.astype(int)
    if sample.outcome is not None:
        df[outcome_col] = sample.outcome
    return df


def sample_to_json(sample: Sample) -> str:
    return json.dumps({
        "unit_ids": list(sample.unit_ids),
        "covariate_names": list(sample.covariate_names),
        "covariates": sample.covariates.tolist(),
        "treatment": sample.treatment.astype(int).tolist(),
        "outcome": None if sample.outcome is None else sample.outcome.tolist(),
    })


def sample_from_json(text: str) -> Sample:
    d = json.loads(text)
    return Sample(unit_ids=tuple(d["unit_ids"]), covariates=np.array(d["covariates"], dtype=float),
                  treatment=np.array(d["treatment"]), outcome=d["outcome"],
                  covariate_names=tuple(d["covariate_names"]))
