"""Optimal pair matching on a rank-based (robust) Mahalanobis distance."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from carinf.core import MatchedDesign, Sample
from carinf.errors import Infeasible

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistanceSpec:
    """What to match on.

    Parameters
    ----------
    covariate_columns : tuple of str, optional
        Columns entering the distance; all columns when None.
    caliper : float, optional
        Caliper width in standard deviations of `propensity_scores`.
    caliper_mode : {'hard', 'soft'}
    penalty : float, optional
        Soft-caliper cost per unit of score beyond the caliper. Defaults to
        1000 times the mean covariate distance.
    propensity_scores : ndarray, optional
        Unit-indexed fitted scores; required with a caliper.
    """

    covariate_columns: tuple | None = None
    caliper: float | None = None
    caliper_mode: str = "hard"
    penalty: float | None = None
    propensity_scores: np.ndarray | None = None

    def __post_init__(self):
        if self.caliper is not None:
            if self.propensity_scores is None:
                raise ValueError("a caliper needs propensity scores")
            if not self.caliper > 0:
                raise ValueError("caliper width must be positive")
            if self.caliper_mode not in ("hard", "soft"):
                raise ValueError("caliper_mode must be 'hard' or 'soft'")
        if self.penalty is not None and not self.penalty > 0:
            raise ValueError("penalty must be positive")


@dataclass(frozen=True)
class DistanceMatrix:
    """Treated-by-control costs; ``inf`` marks forbidden pairs."""

    rows: np.ndarray
    cols: np.ndarray
    entries: np.ndarray
    singular: bool = False
    caliper_width: float | None = None

    def __post_init__(self):
        if self.entries.shape != (len(self.rows), len(self.cols)):
            raise ValueError("distance matrix shape does not match treated/control counts")
        if np.any(np.isnan(self.entries)):
            raise ValueError("distance matrix contains NaN")


def rank_covariance(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Ranks of each column and their tie-corrected covariance.

    The diagonal is rescaled so every column carries the variance of untied
    ranks 1..n; heavily tied columns are therefore not up-weighted.
    Returns ``(ranks, inverse_covariance, singular)``.
    """
    n = x.shape[0]
    ranks = np.column_stack([rankdata(x[:, j]) for j in range(x.shape[1])])
    cov = np.atleast_2d(np.cov(ranks, rowvar=False))
    untied = np.var(np.arange(1, n + 1), ddof=1)
    d = np.sqrt(np.diag(cov))
    ok = d > 0
    scale = np.where(ok, np.sqrt(untied) / np.where(ok, d, 1.0), 0.0)
    cov = cov * scale[:, None] * scale[None, :]
    singular = bool(np.linalg.matrix_rank(cov) < cov.shape[0])
    icov = np.linalg.pinv(cov, hermitian=True)
    return ranks, icov, singular


def robust_mahalanobis(sample: Sample, spec: DistanceSpec | None = None) -> DistanceMatrix:
    """Rank-based Mahalanobis distances between every treated and control unit.

    Entries are squared Mahalanobis distances between rank vectors; ranks are
    taken over the full sample with ties averaged. A caliper on the
    propensity score either forbids (``inf``, hard mode) or linearly
    penalizes (soft mode) pairs further apart than ``caliper * sd(score)``.
    """
    spec = spec or DistanceSpec()
    x = sample.columns(spec.covariate_columns)
    if not np.any(np.ptp(x, axis=0) > 0):
        raise ValueError("no selected covariate takes two distinct values")
    ranks, icov, singular = rank_covariance(x)
    if singular:
        log.warning("rank covariance is singular; using its pseudo-inverse")
    t, c = sample.treated, sample.controls
    diff = ranks[t][:, None, :] - ranks[c][None, :, :]
    dist = np.einsum("ijk,kl,ijl->ij", diff, icov, diff)
    dist = np.maximum(dist, 0.0)

    width = None
    if spec.caliper is not None:
        ps = np.asarray(spec.propensity_scores, dtype=float)
        width = spec.caliper * np.std(ps, ddof=1)
        gap = np.abs(ps[t][:, None] - ps[c][None, :])
        excess = gap - width
        if spec.caliper_mode == "hard":
            dist = np.where(excess > 0, np.inf, dist)
        else:
            penalty = spec.penalty
            if penalty is None:
                penalty = 1000.0 * (dist.mean() if dist.mean() > 0 else 1.0)
            dist = dist + penalty * np.maximum(excess, 0.0)
    return DistanceMatrix(t, c, dist, singular, width)


@dataclass(frozen=True)
class MatchResult:
    """Pairs (row, col) into the distance matrix plus exclusion bookkeeping."""

    pairs: tuple
    excluded: tuple
    total_cost: float
    design: MatchedDesign


def solve_assignment(cost: np.ndarray, allow_exclusion: bool = False):
    """Min-cost injection of rows into columns; ``inf`` entries are forbidden.

    With `allow_exclusion`, each row may instead go unmatched at a price
    exceeding the sum of all finite entries, so the solution first minimizes
    the number of unmatched rows and then the total cost.

    Returns ``(pairs, excluded_rows, total_cost)`` with pairs as (row, col).
    """
    cost = np.asarray(cost, dtype=float)
    n_r, n_c = cost.shape
    if n_r == 0:
        return [], [], 0.0
    finite = np.isfinite(cost)
    if allow_exclusion:
        exclusion = float(cost[finite].sum()) + 1.0
        aug = np.hstack([cost, np.full((n_r, n_r), exclusion)])
        rows, cols = linear_sum_assignment(aug)
        pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if c < n_c]
        excluded = sorted(int(r) for r, c in zip(rows, cols) if c >= n_c)
    else:
        if n_c < n_r:
            raise Infeasible("fewer controls than treated units")
        if not finite.any(axis=1).all():
            raise Infeasible("a treated unit has no admissible control")
        try:
            rows, cols = linear_sum_assignment(cost)
        except ValueError as exc:
            raise Infeasible("no complete matching with finite cost exists") from exc
        pairs = [(int(r), int(c)) for r, c in zip(rows, cols)]
        excluded = []
    total = float(sum(cost[r, c] for r, c in pairs))
    return pairs, excluded, total


def match_optimal(dist: DistanceMatrix, allow_exclusion: bool = False) -> MatchResult:
    """Optimal 1:1 match minimizing total distance.

    Raises
    ------
    Infeasible
        When `allow_exclusion` is False and some treated unit cannot be
        matched at finite cost.
    """
    pairs, excluded, total = solve_assignment(dist.entries, allow_exclusion)
    sets = tuple((int(dist.rows[r]), int(dist.cols[c])) for r, c in pairs)
    design = MatchedDesign(sets)
    return MatchResult(tuple(pairs), tuple(int(dist.rows[r]) for r in excluded), total, design)


def match_sample(sample: Sample, spec: DistanceSpec | None = None,
                 allow_exclusion: bool = False) -> MatchResult:
    """Distance construction followed by the optimal match."""
    return match_optimal(robust_mahalanobis(sample, spec), allow_exclusion)
