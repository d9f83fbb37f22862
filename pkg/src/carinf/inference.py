"""Randomization tests, null moments and Hodges-Lehmann estimation.

Every function here works on the difference in means between the treated
unit and the mean of its controls, averaged over matched sets. Under the
sharp null the outcomes are fixed and only the identity of the treated unit
in each set is random: independently across sets, unit i of set k is the
treated one with probability p_ki (``design.probs``). Uniform inference is
the special case p_ki = 1/n_k (see :meth:`MatchedDesign.uniform`).

Outcomes and treatment vectors are always unit-indexed (length n).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from carinf.core import MatchedDesign, Sample, TestResult
from carinf.errors import (
    DegenerateVariance,
    MissingOutcome,
    RankDeficient,
    SupportTooLarge,
)
from carinf.propensity import kl_divergence_bound

SIDES = ("greater", "less", "two-sided")
_CHUNK = 8192


def _check_sided(sided: str) -> str:
    if sided == "two":
        sided = "two-sided"
    if sided not in SIDES:
        raise ValueError(f"sided must be one of {SIDES}")
    return sided


def _set_values(design: MatchedDesign, outcomes) -> tuple[np.ndarray, np.ndarray]:
    """Per-set contribution to K * statistic if unit i were the treated one.

    value_ki = (n_k y_ki - sum_j y_kj) / (n_k - 1). Padding slots are 0.
    """
    y = np.asarray(outcomes, dtype=float)
    if np.any(np.isnan(y[design.units])):
        raise MissingOutcome("outcome missing for a matched unit")
    yk, mask = design.padded(y)
    n = design.sizes[:, None].astype(float)
    vals = (n * yk - yk.sum(axis=1, keepdims=True)) / (n - 1.0)
    return np.where(mask, vals, 0.0), mask


def diff_in_means(design: MatchedDesign, outcomes, treatment) -> float:
    """(1/K) sum_k [treated outcome - mean control outcome in set k]."""
    vals, _ = _set_values(design, outcomes)
    t = design.treated_positions(treatment)
    return float(vals[np.arange(design.n_sets), t].mean())


def null_moments(design: MatchedDesign, outcomes) -> tuple[float, float]:
    """Mean and variance of the difference in means over the treatment law.

    mean = (1/K) sum_k sum_i y_ki (n_k p_ki - 1) / (n_k - 1)
    var  = (1/K^2) sum_k (n_k / (n_k - 1))^2 sum_i p_ki (y_ki - sum_j p_kj y_kj)^2
    """
    p = design.padded_probs()
    y = np.asarray(outcomes, dtype=float)
    if np.any(np.isnan(y[design.units])):
        raise MissingOutcome("outcome missing for a matched unit")
    yk, mask = design.padded(y)
    n = design.sizes.astype(float)
    K = design.n_sets
    mean = np.sum(np.where(mask, yk * (n[:, None] * p - 1.0) / (n[:, None] - 1.0), 0.0)) / K
    centre = np.sum(p * yk, axis=1, keepdims=True)
    within = np.sum(np.where(mask, p * (yk - centre) ** 2, 0.0), axis=1)
    var = np.sum((n / (n - 1.0)) ** 2 * within) / K**2
    return float(mean), float(max(var, 0.0))


def _tolerance(vals: np.ndarray, observed: float) -> float:
    scale = max(1.0, abs(observed), float(np.abs(vals).max(initial=0.0)))
    return 1e-9 * scale


def _tail_pvalues(n_ge: int, n_le: int, draws: int):
    pg = (1.0 + n_ge) / (1.0 + draws)
    pl = (1.0 + n_le) / (1.0 + draws)
    return pg, pl


def _finish(sided, pg, pl):
    if sided == "greater":
        return pg
    if sided == "less":
        return pl
    return min(1.0, 2.0 * min(pg, pl))


def _draw_chunk(cum: np.ndarray, vals: np.ndarray, size: int, seed_seq) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(seed_seq))
    u = rng.random((size, cum.shape[0]))
    idx = (u[:, :, None] >= cum[None, :, :]).sum(axis=2)
    return vals[np.arange(cum.shape[0])[None, :], idx].sum(axis=1)


def sample_null_statistics(design: MatchedDesign, outcomes, draws: int, seed: int = 0,
                           workers: int | None = None) -> np.ndarray:
    """Draw the statistic under independent one-treated-per-set multinomials.

    Draws are produced in fixed-size blocks, block b using the Philox stream
    spawned as child b of ``SeedSequence(seed)``, so the output does not
    depend on the number of worker threads.
    """
    if draws < 1:
        raise ValueError("draws must be at least 1")
    vals, mask = _set_values(design, outcomes)
    p = design.padded_probs()
    cum = np.cumsum(p, axis=1)
    sizes = design.sizes
    cum[np.arange(len(sizes)), sizes - 1] = 2.0
    cum[~mask] = 2.0
    n_blocks = -(-draws // _CHUNK)
    children = np.random.SeedSequence(seed).spawn(n_blocks)
    block_sizes = [min(_CHUNK, draws - b * _CHUNK) for b in range(n_blocks)]
    workers = workers or int(os.environ.get("CARINF_THREADS", "1"))
    if workers > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda b: _draw_chunk(cum, vals, block_sizes[b], children[b]),
                                range(n_blocks)))
    else:
        parts = [_draw_chunk(cum, vals, block_sizes[b], children[b]) for b in range(n_blocks)]
    return np.concatenate(parts) / design.n_sets


def mc_test(design: MatchedDesign, outcomes, observed: float, draws: int = 5000,
            seed: int = 0, sided: str = "greater", workers: int | None = None) -> TestResult:
    """Monte Carlo randomization test with add-one p-values.

    p_greater = (1 + #{T_draw >= observed}) / (1 + draws); ties count toward
    the tail. The two-sided p-value is min(1, 2 min(p_greater, p_less)).
    """
    sided = _check_sided(sided)
    stats = sample_null_statistics(design, outcomes, draws, seed, workers)
    vals, _ = _set_values(design, outcomes)
    tol = _tolerance(vals, observed)
    n_ge = int(np.sum(stats >= observed - tol))
    n_le = int(np.sum(stats <= observed + tol))
    pg, pl = _tail_pvalues(n_ge, n_le, draws)
    pv = _finish(sided, pg, pl)
    pm = pv / 2.0 if sided == "two-sided" else pv
    se = np.sqrt(pm * (1.0 - pm) / draws) * (2.0 if sided == "two-sided" else 1.0)
    mean, var = null_moments(design, outcomes)
    return TestResult(float(observed), mean, var, float(pv), sided, "monte_carlo",
                      draws=draws, mc_std_error=float(se), seed=seed)


def exact_distribution(design: MatchedDesign, outcomes, cap: int = 10**6):
    """Support points and probabilities of the statistic by full enumeration."""
    support = int(np.prod(design.sizes.astype(float)))
    if support > cap:
        raise SupportTooLarge(f"{support} assignments exceed the enumeration cap {cap}")
    vals, _ = _set_values(design, outcomes)
    values = np.zeros(1)
    probs = np.ones(1)
    for k, p in enumerate(design.probs if design.probs is not None else design.padded_probs()):
        nk = len(p)
        values = (values[:, None] + vals[k, :nk][None, :]).ravel()
        probs = (probs[:, None] * p[None, :]).ravel()
    return values / design.n_sets, probs


def exact_test(design: MatchedDesign, outcomes, observed: float, sided: str = "greater",
               cap: int = 10**6) -> TestResult:
    """Exact tail probability by enumerating every one-treated-per-set assignment."""
    sided = _check_sided(sided)
    design.padded_probs()
    values, probs = exact_distribution(design, outcomes, cap)
    vals, _ = _set_values(design, outcomes)
    tol = _tolerance(vals, observed)
    pg = min(1.0, float(probs[values >= observed - tol].sum()))
    pl = min(1.0, float(probs[values <= observed + tol].sum()))
    mean, var = null_moments(design, outcomes)
    return TestResult(float(observed), mean, var, _finish(sided, pg, pl), sided,
                      "exact_enumeration")


def normal_test(design: MatchedDesign, outcomes, observed: float,
                sided: str = "greater") -> TestResult:
    """Standard-normal approximation to the randomization distribution.

    Raises
    ------
    DegenerateVariance
        If the null variance is zero or there is a single set.
    """
    sided = _check_sided(sided)
    if design.n_sets < 2:
        raise DegenerateVariance("the normal approximation needs at least two sets")
    mean, var = null_moments(design, outcomes)
    if not var > 0:
        raise DegenerateVariance("null variance is zero")
    zstat = (observed - mean) / np.sqrt(var)
    pg, pl = float(norm.sf(zstat)), float(norm.cdf(zstat))
    return TestResult(float(observed), mean, var, _finish(sided, pg, pl), sided, "normal_approx")


def randomization_test(design: MatchedDesign, outcomes, treatment, method: str = "monte_carlo",
                       sided: str = "greater", **kwargs) -> TestResult:
    """Compute the observed statistic from `treatment` and dispatch to a test."""
    observed = diff_in_means(design, outcomes, treatment)
    if method == "monte_carlo":
        return mc_test(design, outcomes, observed, sided=sided, **kwargs)
    if method == "normal":
        return normal_test(design, outcomes, observed, sided)
    if method == "exact":
        return exact_test(design, outcomes, observed, sided, **kwargs)
    raise ValueError(f"unknown method {method!r}")


@dataclass(frozen=True)
class EstimationResult:
    """Hodges-Lehmann estimate of a constant additive effect and its interval."""

    tau_hat: float
    ci_lower: float
    ci_upper: float
    level: float
    method: str
    null_variance: float = float("nan")

    def __post_init__(self):
        for name in ("tau_hat", "ci_lower", "ci_upper", "level", "null_variance"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _shift_slope(design: MatchedDesign, treatment) -> float:
    """c = E[D(0)] - E[D(tau)] per unit tau: (1/K) sum_k (n_k p_kt - 1)/(n_k - 1)."""
    p = design.padded_probs()
    t = design.treated_positions(treatment)
    n = design.sizes.astype(float)
    pt = p[np.arange(design.n_sets), t]
    return float(np.mean((n * pt - 1.0) / (n - 1.0)))


def hodges_lehmann(design: MatchedDesign, outcomes, treatment, level: float = 0.95,
                   method: str = "normal_approx", draws: int = 5000, seed: int = 0,
                   tol: float | None = None, plug_in: bool = False) -> EstimationResult:
    """Hodges-Lehmann estimate of a constant additive effect.

    The estimate solves D(tau) = E[D(tau)], where D(tau) is the difference in
    means of the adjusted outcomes y - tau z and the expectation is taken
    under the design's treatment law for those same adjusted outcomes. Since
    D(tau) = D(0) - tau and E[D(tau)] = E[D(0)] - c tau, the solution is
    (D(0) - E[D(0)]) / (1 - c); c is 0 for uniform probabilities.

    Parameters
    ----------
    method : {'normal_approx', 'test_inversion', 'mc_inversion'}
        'normal_approx' gives tau_hat +- z sqrt(var) / (1 - c), with var the
        null variance at the estimate. The inversion methods bisect for the
        set of tau_0 not rejected at level (1 - level)/2 in either direction,
        by the normal test or the Monte Carlo test (common random numbers).
    plug_in : bool
        Return the one-step value D(0) - E[D(0)] instead, with the normal
        interval built from the null variance of the observed outcomes. It
        agrees with the default whenever c = 0 but is not shift-equivariant
        under non-uniform probabilities.
    """
    y = np.asarray(outcomes, dtype=float)
    z = np.asarray(treatment, dtype=float)
    d0 = diff_in_means(design, y, z)
    e0, _ = null_moments(design, y)
    c = _shift_slope(design, z)
    if plug_in:
        if method != "normal_approx":
            raise ValueError("plug_in supports only the normal_approx interval")
        e0, v0 = null_moments(design, y)
        half = norm.ppf(0.5 + level / 2.0) * np.sqrt(v0)
        tau_hat = d0 - e0
        return EstimationResult(tau_hat, tau_hat - half, tau_hat + half, level, "plug_in", v0)
    tau_hat = (d0 - e0) / (1.0 - c)
    _, var_hat = null_moments(design, y - z * tau_hat)
    alpha = 1.0 - level

    if method == "normal_approx":
        half = norm.ppf(1.0 - alpha / 2.0) * np.sqrt(var_hat) / (1.0 - c)
        return EstimationResult(tau_hat, tau_hat - half, tau_hat + half, level, method, var_hat)

    if method == "test_inversion":
        def pval(tau0, sided):
            yt = y - z * tau0
            return normal_test(design, yt, diff_in_means(design, yt, z), sided).p_value
    elif method == "mc_inversion":
        def pval(tau0, sided):
            yt = y - z * tau0
            return mc_test(design, yt, diff_in_means(design, yt, z), draws, seed, sided).p_value
    else:
        raise ValueError(f"unknown method {method!r}")

    reach = 10.0 * np.sqrt(var_hat) * np.sqrt(design.n_sets)
    if not reach > 0:
        return EstimationResult(tau_hat, tau_hat, tau_hat, level, method, var_hat)
    tol = tol if tol is not None else 1e-4 * reach

    def boundary(sided, far):
        # Bisection between the estimate (not rejected) and `far` (rejected).
        inside, outside = tau_hat, far
        if pval(outside, sided) > alpha / 2.0:
            return outside
        while abs(outside - inside) > tol:
            mid = 0.5 * (inside + outside)
            if pval(mid, sided) > alpha / 2.0:
                inside = mid
            else:
                outside = mid
        return 0.5 * (inside + outside)

    lower = boundary("greater", tau_hat - reach)
    upper = boundary("less", tau_hat + reach)
    return EstimationResult(tau_hat, min(lower, tau_hat), max(upper, tau_hat), level, method, var_hat)


def regression_adjust(sample: Sample, design: MatchedDesign, columns=None, outcomes=None) -> np.ndarray:
    """Residuals of an OLS fit of the outcome on [1 | X] over the matched units.

    Treatment is ignored in the fit, so the residuals are fixed before any
    permutation. Returned unit-indexed, NaN off the design.

    Raises
    ------
    RankDeficient
    """
    y = sample.outcome if outcomes is None else outcomes
    if y is None:
        raise MissingOutcome("sample has no outcome")
    y = np.asarray(y, dtype=float)
    units = design.units
    if np.any(np.isnan(y[units])):
        raise MissingOutcome("outcome missing for a matched unit")
    X = np.column_stack([np.ones(len(units)), sample.columns(columns)[units]])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficient("regression design matrix is not of full column rank")
    coef, *_ = np.linalg.lstsq(X, y[units], rcond=None)
    res = y[units] - X @ coef
    # rounding noise from an exact fit would otherwise look like signal
    res[np.abs(res) <= 1e-12 * max(1.0, float(np.abs(y[units]).max()))] = 0.0
    out = np.full(sample.n, np.nan)
    out[units] = res
    return out


def tv_diagnostic(p_true: MatchedDesign, p_est: MatchedDesign) -> float:
    """Upper bound on the total-variation distance between two treatment laws.

    By the conditional-randomization argument, a level-alpha test run with
    `p_est` has size at most alpha plus this value when `p_true` is the truth.
    """
    return kl_divergence_bound(p_true, p_est)
