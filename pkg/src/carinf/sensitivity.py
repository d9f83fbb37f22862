"""Worst-case p-value bounds under an unobserved binary confounder.

Within a matched set the odds of being the treated unit are multiplied by
Gamma for units with u = 1, so under the covariate-adaptive law unit i of
set k is treated with probability proportional to p_ki * Gamma**u_ki. For a
sum statistic sum_k sum_i Z_ki f_ki with scores sorted ascending within each
set, the extreme p-values are attained at monotone binary patterns: u equal
to 0 on the ell lowest scores and 1 above (upper bound), or the reverse
(lower bound).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import norm

from carinf.core import MatchedDesign
from carinf.errors import DegenerateVariance, NoRejectionAtOne, SupportTooLarge

DIRECTIONS = ("upper", "lower")


@dataclass(frozen=True)
class SensitivityProblem:
    """Scores f_ki (ascending within each set), their probabilities p_ki, and Gamma."""

    gamma: float
    scores: tuple
    probs: tuple
    direction: str = "upper"

    def __post_init__(self):
        if not self.gamma >= 1.0:
            raise ValueError("gamma must be at least 1")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        scores, probs = [], []
        for f, p in zip(self.scores, self.probs):
            f = np.asarray(f, dtype=float)
            p = np.asarray(p, dtype=float)
            if f.shape != p.shape:
                raise ValueError("scores and probabilities differ in shape")
            order = np.argsort(f, kind="stable")
            scores.append(f[order])
            probs.append(p[order])
        object.__setattr__(self, "scores", tuple(scores))
        object.__setattr__(self, "probs", tuple(probs))

    @property
    def n_sets(self) -> int:
        return len(self.scores)

    def with_gamma(self, gamma: float) -> "SensitivityProblem":
        return replace(self, gamma=float(gamma))

    @classmethod
    def from_design(cls, design: MatchedDesign, outcomes, gamma: float = 1.0,
                    direction: str = "upper") -> "SensitivityProblem":
        """Difference-in-means problem: f_ki = n_k y_ki / (n_k - 1).

        With these scores sum_k sum_i Z_ki f_ki = K * D + sum_k sum_i y_ki / (n_k - 1),
        where D is the difference in means, so the shift is fixed by the data.
        """
        y = np.asarray(outcomes, dtype=float)
        if design.probs is None:
            design = design.uniform()
        scores = [len(s) * y[s] / (len(s) - 1.0) for s in design.sets]
        return cls(gamma, tuple(scores), design.probs, direction)


def observed_sum(design: MatchedDesign, outcomes, treatment) -> float:
    """Observed sum-form statistic matching :meth:`SensitivityProblem.from_design`."""
    y = np.asarray(outcomes, dtype=float)
    z = np.asarray(treatment)
    total = 0.0
    for s in design.sets:
        total += len(s) * float(y[s][z[s] == 1].sum()) / (len(s) - 1.0)
    return total


def _weights(n: int, ell: int, gamma: float, direction: str) -> np.ndarray:
    w = np.ones(n)
    if direction == "upper":
        w[ell:] = gamma
    else:
        w[:ell] = gamma
    return w


def _tilted(p: np.ndarray, ell: int, gamma: float, direction: str) -> np.ndarray:
    q = p * _weights(len(p), ell, gamma, direction)
    return q / q.sum()


@dataclass(frozen=True)
class StratumBoundTable:
    """mu[k][ell], nu[k][ell] for ell = 0..n_k."""

    mu: tuple
    nu: tuple


def stratum_bounds(problem: SensitivityProblem) -> StratumBoundTable:
    """Mean and variance of each set's contribution for every cut ell.

    For the upper direction the units above the cut (the n_k - ell largest
    scores) carry weight Gamma; for the lower direction the ell smallest do.
    """
    mus, nus = [], []
    for f, p in zip(problem.scores, problem.probs):
        n = len(f)
        mu = np.empty(n + 1)
        nu = np.empty(n + 1)
        for ell in range(n + 1):
            w = p * _weights(n, ell, problem.gamma, problem.direction)
            tot = w.sum()
            mu[ell] = np.dot(w, f) / tot
            nu[ell] = max(np.dot(w, (f - mu[ell]) ** 2) / tot, 0.0)
        mus.append(mu)
        nus.append(nu)
    return StratumBoundTable(tuple(mus), tuple(nus))


@dataclass(frozen=True)
class SensitivityBound:
    """Separable normal bound; `cuts` holds the chosen ell per set."""

    p_value: float
    mean: float
    variance: float
    cuts: tuple
    gamma: float


def _select(mu: np.ndarray, nu: np.ndarray, direction: str) -> int:
    target = mu.max() if direction == "upper" else mu.min()
    tol = 1e-12 * max(1.0, abs(target))
    ties = np.flatnonzero(np.abs(mu - target) <= tol)
    return int(ties[np.argmax(nu[ties])])


def worst_case_pvalue(problem: SensitivityProblem, observed: float) -> SensitivityBound:
    """Separable bound on the one-sided (greater) p-value.

    Each set independently takes the cut with the most extreme mean (largest
    for the upper bound, smallest for the lower bound), breaking ties toward
    larger variance. The bound is the upper normal tail of
    (observed - sum mu) / sqrt(sum nu), `observed` being the sum-form statistic.
    """
    table = stratum_bounds(problem)
    cuts = tuple(_select(mu, nu, problem.direction) for mu, nu in zip(table.mu, table.nu))
    mean = float(sum(mu[c] for mu, c in zip(table.mu, cuts)))
    var = float(sum(nu[c] for nu, c in zip(table.nu, cuts)))
    if not var > 0:
        raise DegenerateVariance("all selected stratum variances are zero")
    pv = float(norm.sf((observed - mean) / np.sqrt(var)))
    return SensitivityBound(pv, mean, var, cuts, problem.gamma)


@dataclass(frozen=True)
class BruteForceBound:
    """Exact extreme tail probability and extreme mean over monotone patterns."""

    p_value: float
    extreme_mean: float
    pattern: tuple
    mean_pattern: tuple


def brute_force_bound(problem: SensitivityProblem, observed: float, cap: int = 10**5,
                      support_cap: int = 10**6) -> BruteForceBound:
    """Enumerate every monotone binary pattern and every treatment assignment.

    For each pattern the exact law of the sum statistic is the product over
    sets of the tilted multinomials; the maximum (upper) or minimum (lower)
    of P(T >= observed) over patterns is returned together with the extreme
    expected value of T.

    Raises
    ------
    SupportTooLarge
        If the pattern count exceeds `cap` or the assignment count exceeds
        `support_cap`.
    """
    sizes = [len(f) for f in problem.scores]
    n_patterns = int(np.prod([n + 1 for n in sizes], dtype=float))
    n_assign = int(np.prod(sizes, dtype=float))
    if n_patterns > cap or n_assign > support_cap:
        raise SupportTooLarge(f"{n_patterns} patterns x {n_assign} assignments exceed the cap")

    total = np.zeros(())
    for f in problem.scores:
        total = np.add.outer(total, f)
    scale = max(1.0, float(np.abs(total).max()), abs(observed))
    tail = (total >= observed - 1e-9 * scale).astype(float)

    def contract(tensor):
        out = tensor
        for f, p in zip(problem.scores, problem.probs):
            q = np.array([_tilted(p, ell, problem.gamma, problem.direction)
                          for ell in range(len(f) + 1)])
            out = np.tensordot(out, q.T, axes=([0], [0]))
        return out

    tail_prob = contract(tail)
    means = contract(total)
    pick = np.argmax if problem.direction == "upper" else np.argmin
    i_p = np.unravel_index(pick(tail_prob), tail_prob.shape)
    i_m = np.unravel_index(pick(means), means.shape)
    return BruteForceBound(float(min(1.0, tail_prob[i_p])), float(means[i_m]),
                           tuple(int(i) for i in i_p), tuple(int(i) for i in i_m))


def threshold_gamma(problem: SensitivityProblem, observed: float, alpha: float = 0.05,
                    gamma_max: float = 20.0, tol: float = 1e-3) -> float:
    """Largest Gamma whose upper-bound p-value is still at most `alpha`.

    Raises
    ------
    NoRejectionAtOne
        If the test does not reject at Gamma = 1.
    """
    problem = replace(problem, direction="upper")

    def pval(g):
        return worst_case_pvalue(problem.with_gamma(g), observed).p_value

    if pval(1.0) > alpha:
        raise NoRejectionAtOne("no rejection at Gamma = 1")
    if pval(gamma_max) <= alpha:
        return float(gamma_max)
    lo, hi = 1.0, float(gamma_max)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if pval(mid) <= alpha:
            lo = mid
        else:
            hi = mid
    return lo


def sensitivity_table(problem: SensitivityProblem, observed: float, gammas) -> list[dict]:
    """Upper and lower p-value bounds over a grid of Gamma values."""
    rows = []
    for g in gammas:
        up = worst_case_pvalue(replace(problem, gamma=float(g), direction="upper"), observed)
        lo = worst_case_pvalue(replace(problem, gamma=float(g), direction="lower"), observed)
        rows.append({"gamma": float(g), "p_upper": up.p_value, "p_lower": lo.p_value})
    return rows
