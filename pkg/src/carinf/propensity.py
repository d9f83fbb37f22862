"""Logistic propensity fits and within-set assignment probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from carinf.core import MatchedDesign, Sample
from carinf.errors import DesignMismatch, RankDeficient, ScoreOutOfRange

SEPARATION_NORM = 1e4
SEPARATION_EPS = 1e-12


@dataclass(frozen=True)
class PropensityFit:
    """Maximum-likelihood logistic fit of treatment on covariates.

    ``coefficients`` has the intercept first. ``separated`` is set when the
    likelihood has no finite maximizer (or appears not to); such a fit is
    never reported as converged.
    """

    coefficients: np.ndarray
    fitted: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float
    separated: bool = False

    def linear_predictor(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.coefficients[0] + x @ self.coefficients[1:]

    def predict(self, x) -> np.ndarray:
        return expit(self.linear_predictor(x))


def _design_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.column_stack([np.ones(len(x)), x])


def fit_logistic(sample: Sample | np.ndarray, treatment=None, max_iter: int = 50,
                 tol: float = 1e-10, columns=None) -> PropensityFit:
    """Fit logit P(Z=1|X) = b0 + X b by iteratively reweighted least squares.

    Parameters
    ----------
    sample : Sample or ndarray
        Either a :class:`Sample` or a raw covariate matrix (then `treatment`
        is required).
    max_iter : int
        Newton iterations allowed.
    tol : float
        Convergence is declared once every component of the score vector
        X'(z - fitted) is below `tol` in absolute value.
    columns : sequence of str, optional
        Covariate subset when `sample` is a :class:`Sample`.

    Raises
    ------
    RankDeficient
        If [1 | X] does not have full column rank.
    """
    if isinstance(sample, Sample):
        x, z = sample.columns(columns), sample.treatment
    else:
        x, z = sample, treatment
    X = _design_matrix(x)
    z = np.asarray(z, dtype=float)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficient("design matrix [1|X] is not of full column rank")

    beta = np.zeros(X.shape[1])
    converged = separated = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        mu = expit(eta)
        score = X.T @ (z - mu)
        if np.max(np.abs(score)) < tol:
            converged = True
            it -= 1
            break
        w = mu * (1.0 - mu)
        try:
            step = np.linalg.solve(X.T @ (X * w[:, None]), score)
        except np.linalg.LinAlgError:
            separated = True
            break
        beta = beta + step
        if not np.all(np.isfinite(beta)) or np.linalg.norm(beta) > SEPARATION_NORM:
            separated = True
            break
    else:
        # Final check after the last update.
        mu = expit(X @ beta)
        converged = bool(np.max(np.abs(X.T @ (z - mu))) < tol)

    eta = X @ beta
    fitted = expit(eta)
    if np.any(fitted < SEPARATION_EPS) or np.any(fitted > 1.0 - SEPARATION_EPS):
        separated = True
    if separated:
        converged = False
    ll = float(np.sum(z * eta - np.logaddexp(0.0, eta)))
    return PropensityFit(beta, fitted, converged, it, ll, separated)


def within_set_probs(scores, design: MatchedDesign) -> MatchedDesign:
    """Attach p_ki = odds(score_ki) / sum_j odds(score_kj) to every set.

    Scores are unit-indexed (length n). Sets whose scores are all equal get
    exactly 1/n_k.

    Raises
    ------
    ScoreOutOfRange
        If a score used by the design is not strictly inside (0, 1).
    """
    scores = np.asarray(scores, dtype=float)
    used = scores[design.units]
    if not np.all((used > 0) & (used < 1)):
        raise ScoreOutOfRange("propensity scores must lie strictly inside (0, 1)")
    probs = []
    for s in design.sets:
        sc = scores[s]
        if np.all(sc == sc[0]):
            probs.append(np.full(len(s), 1.0 / len(s)))
            continue
        lo = logit(sc)
        w = np.exp(lo - lo.max())
        probs.append(w / w.sum())
    return design.with_probs(probs)


def _check_same_design(a: MatchedDesign, b: MatchedDesign):
    if a.probs is None or b.probs is None:
        raise DesignMismatch("both designs need probabilities attached")
    if a.n_sets != b.n_sets or any(not np.array_equal(s, t) for s, t in zip(a.sets, b.sets)):
        raise DesignMismatch("probability structures are defined on different designs")


def kl_divergence(p_true: MatchedDesign, p_est: MatchedDesign) -> float:
    """Sum over sets of KL(true || estimated) for the one-treated-per-set law."""
    _check_same_design(p_true, p_est)
    total = 0.0
    for p, q in zip(p_true.probs, p_est.probs):
        if np.any(p <= 0) or np.any(q <= 0):
            raise DesignMismatch("KL divergence needs strictly positive probabilities")
        total += float(np.sum(p * (np.log(p) - np.log(q))))
    return max(total, 0.0)


def kl_divergence_bound(p_true: MatchedDesign, p_est: MatchedDesign) -> float:
    """Pinsker upper bound sqrt(KL / 2) on the total-variation distance.

    The treatment law factorizes over sets, so the KL divergence of the joint
    law is the sum of the per-set multinomial divergences.
    """
    return float(np.sqrt(kl_divergence(p_true, p_est) / 2.0))
