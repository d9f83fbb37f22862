import itertools

import numpy as np
import pytest

from carinf.core import Sample, validate_design
from carinf.errors import Infeasible
from carinf.matching import (
    DistanceMatrix,
    DistanceSpec,
    match_optimal,
    match_sample,
    robust_mahalanobis,
    solve_assignment,
)


def dm(cost):
    cost = np.asarray(cost, dtype=float)
    return DistanceMatrix(np.arange(cost.shape[0]), np.arange(cost.shape[0], sum(cost.shape)), cost)


def best_by_enumeration(cost):
    """(fewest exclusions, least cost) over every partial injection, by DP over used columns."""
    n_r, n_c = cost.shape

    from functools import lru_cache

    @lru_cache(maxsize=None)
    def go(i, used):
        if i == n_r:
            return (0, 0.0)
        ex, c = go(i + 1, used)
        best = (ex + 1, c)
        for j in range(n_c):
            if not used >> j & 1 and np.isfinite(cost[i, j]):
                ex2, c2 = go(i + 1, used | 1 << j)
                cand = (ex2, c2 + cost[i, j])
                if cand[0] < best[0] or (cand[0] == best[0] and cand[1] < best[1]):
                    best = cand
        return best

    return go(0, 0)


class TestRobustMahalanobis:
    def test_identical_rows_zero(self):
        x = np.array([[1.0, 2.0], [1.0, 2.0], [3.0, 0.0], [5.0, 1.0]])
        s = Sample(unit_ids=range(4), covariates=x, treatment=np.array([1, 0, 0, 1]))
        d = robust_mahalanobis(s)
        assert d.entries[0, 0] == 0.0

    def test_rank_monotone(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        s = Sample(unit_ids=range(4), covariates=x, treatment=np.array([1, 0, 0, 0]))
        d = robust_mahalanobis(s).entries[0]
        assert d[0] < d[2]

    def test_invariant_to_monotone_transform(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(40, 3))
        z = (rng.random(40) < 0.4).astype(int)
        a = robust_mahalanobis(Sample(unit_ids=range(40), covariates=x, treatment=z)).entries
        x2 = x.copy()
        x2[:, 0] = np.exp(x2[:, 0])
        x2[:, 2] = x2[:, 2] ** 3
        b = robust_mahalanobis(Sample(unit_ids=range(40), covariates=x2, treatment=z)).entries
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_hard_caliper_infinite(self):
        x = np.array([0.0, 1.0, 2.0, 3.0])
        ps = np.array([0.9, 0.1, 0.5, 0.5])
        s = Sample(unit_ids=range(4), covariates=x, treatment=np.array([1, 0, 0, 0]))
        d = robust_mahalanobis(s, DistanceSpec(caliper=0.2, propensity_scores=ps))
        assert np.isinf(d.entries[0, 0])

    def test_soft_caliper_penalizes_linearly(self):
        x = np.array([0.0, 1.0, 2.0, 3.0])
        ps = np.array([0.9, 0.1, 0.5, 0.5])
        s = Sample(unit_ids=range(4), covariates=x, treatment=np.array([1, 0, 0, 0]))
        plain = robust_mahalanobis(s).entries
        soft = robust_mahalanobis(s, DistanceSpec(caliper=0.2, caliper_mode="soft", penalty=10.0,
                                                  propensity_scores=ps))
        width = 0.2 * np.std(ps, ddof=1)
        expected = plain + 10.0 * np.maximum(np.abs(0.9 - ps[1:]) - width, 0)
        np.testing.assert_allclose(soft.entries, expected)

    def test_caliper_requires_scores(self):
        with pytest.raises(ValueError):
            DistanceSpec(caliper=0.2)


class TestMatchOptimal:
    def test_two_by_two(self):
        res = match_optimal(dm([[1, 10], [10, 1]]))
        assert res.pairs == ((0, 0), (1, 1))
        assert res.total_cost == 2

    def test_forced_single(self):
        res = match_optimal(dm([[3.5]]))
        assert res.pairs == ((0, 0),)

    def test_exclusion(self):
        res = match_optimal(dm([[np.inf, np.inf], [1, 2]]), allow_exclusion=True)
        assert res.excluded == (0,)
        assert res.pairs == ((1, 0),)

    def test_infeasible_without_exclusion(self):
        with pytest.raises(Infeasible):
            match_optimal(dm([[np.inf, np.inf], [1, 2]]))
        with pytest.raises(Infeasible):
            match_optimal(dm([[1.0, np.inf], [2.0, np.inf]]))

    def test_against_enumeration(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            nr, nc = rng.integers(1, 6, size=2)
            cost = rng.integers(0, 20, size=(nr, nc)).astype(float)
            cost[rng.random((nr, nc)) < 0.3] = np.inf
            pairs, excluded, total = solve_assignment(cost, allow_exclusion=True)
            ex, c = best_by_enumeration(cost)
            assert len(excluded) == ex
            assert total == pytest.approx(c)

    def test_complete_matching_matches_permutations(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            n = int(rng.integers(1, 6))
            cost = rng.random((n, n + 1))
            best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n + 1), n))
            assert match_optimal(dm(cost)).total_cost == pytest.approx(best)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(10)
        cost = rng.random((5, 7))
        perm = rng.permutation(7)
        a = match_optimal(dm(cost))
        b = match_optimal(dm(cost[:, perm]))
        assert a.total_cost == pytest.approx(b.total_cost)
        assert {(r, c) for r, c in a.pairs} == {(r, perm[c]) for r, c in b.pairs}


class TestMatchSample:
    def test_design_valid_and_caliper_respected(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = rng.normal(size=(60, 2))
            z = (rng.random(60) < 0.3).astype(int)
            s = Sample(unit_ids=range(60), covariates=x, treatment=z)
            ps = 1 / (1 + np.exp(-(x[:, 0] - 0.8)))
            spec = DistanceSpec(caliper=0.2, propensity_scores=ps)
            res = match_sample(s, spec, allow_exclusion=True)
            validate_design(s, res.design)
            width = 0.2 * np.std(ps, ddof=1)
            for t, c in res.design.sets:
                assert abs(ps[t] - ps[c]) <= width
