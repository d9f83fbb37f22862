"""Simulation experiments: Type I error and interval width of matched inference.

A replicate draws covariates and treatment from a logistic propensity model,
pair-matches treated units to controls, optionally regression-adjusts the
outcome, and tests the sharp null with uniform, estimated-adaptive or
oracle-adaptive permutation probabilities.
"""

from __future__ import annotations

import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import norm

from carinf.core import MatchedDesign, Sample, standardized_differences
from carinf.errors import CarinfError
from carinf.inference import diff_in_means, hodges_lehmann, mc_test, normal_test, regression_adjust
from carinf.matching import DistanceSpec, match_sample
from carinf.propensity import fit_logistic, within_set_probs

log = logging.getLogger(__name__)

BASE_LOGIT = np.log(0.3 / 0.7)
CUBIC_SCALE = 1.0 / np.sqrt(265.0)
INFERENCE_MODES = ("uniform", "adaptive_estimated", "adaptive_oracle")
Z_MODES = ("observed", "reshuffled")


@dataclass(frozen=True)
class DgpSpec:
    """Data-generating process.

    `signal` scales the propensity signal in X1; `tau_effect` is the constant
    additive treatment effect (0 under the null).
    """

    n: int = 100
    p: int = 2
    treatment_model: str = "linear"
    signal: float = 0.6
    outcome_model: str = "linear"
    tau_effect: float = 0.0
    noise_variance: float = 4.0

    def __post_init__(self):
        if self.n < 4 or self.p < 1:
            raise ValueError("need n >= 4 and p >= 1")
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")
        for m in (self.treatment_model, self.outcome_model):
            if m not in ("linear", "cubic"):
                raise ValueError(f"unknown model {m!r}")


def structural_term(x1: np.ndarray, model: str) -> np.ndarray:
    if model == "linear":
        return x1
    return CUBIC_SCALE * (x1 + 4.0 * x1**3)


def true_propensity(x: np.ndarray, model: str, signal: float) -> np.ndarray:
    return expit(BASE_LOGIT + signal * structural_term(x[:, 0], model))


@dataclass(frozen=True)
class SimData:
    sample: Sample
    true_scores: np.ndarray
    y0: np.ndarray
    y1: np.ndarray


def generate(dgp: DgpSpec, seed=None) -> SimData:
    """Draw one dataset; the observed outcome is Y(Z)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = rng.standard_normal((dgp.n, dgp.p))
    lam = true_propensity(x, dgp.treatment_model, dgp.signal)
    y0 = structural_term(x[:, 0], dgp.outcome_model) + rng.normal(0.0, np.sqrt(dgp.noise_variance), dgp.n)
    y1 = y0 + dgp.tau_effect
    z = (rng.random(dgp.n) < lam).astype(np.int8)
    if z.sum() in (0, dgp.n):
        # Degenerate draw; flip one unit so the sample stays well-formed.
        z[0] = 1 - z[0]
    sample = Sample(unit_ids=tuple(range(dgp.n)), covariates=x, treatment=z,
                    outcome=np.where(z == 1, y1, y0))
    return SimData(sample, lam, y0, y1)


@dataclass(frozen=True)
class ExperimentCell:
    """One combination of simulation settings.

    `pilot_size`, when set, fits the propensity model on an independent
    sample of that size from the same process instead of in-sample.
    `test` selects the Monte Carlo ('monte_carlo') or normal ('normal')
    randomization test.
    """

    dgp: DgpSpec = field(default_factory=DgpSpec)
    caliper: bool = False
    adjustment: bool = False
    inference: str = "uniform"
    z_mode: str = "observed"
    replications: int = 1000
    seed: int = 0
    draws: int = 5000
    alpha: float = 0.05
    caliper_width: float = 0.2
    pilot_size: int | None = None
    test: str = "monte_carlo"

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.inference not in INFERENCE_MODES:
            raise ValueError(f"inference must be one of {INFERENCE_MODES}")
        if self.z_mode not in Z_MODES:
            raise ValueError(f"z_mode must be one of {Z_MODES}")
        if self.test not in ("monte_carlo", "normal"):
            raise ValueError("test must be 'monte_carlo' or 'normal'")

    def flat(self) -> dict:
        d = asdict(self)
        d.update(d.pop("dgp"))
        return d


def _draw_within_sets(design: MatchedDesign, rng: np.random.Generator, n: int) -> np.ndarray:
    z = np.zeros(n, dtype=np.int8)
    for s, p in zip(design.sets, design.probs):
        z[s[rng.choice(len(s), p=p)]] = 1
    return z


def run_replicate(cell: ExperimentCell, seed_seq) -> dict:
    """One simulated study; failures are reported in the record, not raised."""
    rng = np.random.default_rng(seed_seq)
    dgp = cell.dgp
    data = generate(dgp, rng)
    sample = data.sample
    rec = {"ok": False, "reason": "", "n_sets": 0, "excluded": 0, "p_value": np.nan,
           "reject": np.nan, "tau_hat": np.nan, "ci_width": np.nan, "max_abs_std_diff": np.nan}
    try:
        fitted = None
        if cell.caliper or cell.inference == "adaptive_estimated":
            if cell.pilot_size:
                pilot = generate(replace(dgp, n=cell.pilot_size), rng)
                fit = fit_logistic(pilot.sample)
                fitted = fit.predict(sample.covariates) if not fit.separated else None
            else:
                fit = fit_logistic(sample)
                fitted = fit.fitted if not fit.separated else None
            if fitted is None:
                rec["reason"] = "separation"
                return rec
        spec = DistanceSpec(caliper=cell.caliper_width if cell.caliper else None,
                            caliper_mode="hard", propensity_scores=fitted)
        match = match_sample(sample, spec, allow_exclusion=True)
        design = match.design
        rec["n_sets"] = design.n_sets
        rec["excluded"] = len(match.excluded)
        if design.n_sets < 2:
            rec["reason"] = "too_few_sets"
            return rec
        rec["max_abs_std_diff"] = float(np.max(np.abs(standardized_differences(sample, design).after)))

        z = sample.treatment
        if cell.z_mode == "reshuffled":
            z = _draw_within_sets(within_set_probs(data.true_scores, design), rng, dgp.n)
        y = np.where(z == 1, data.y1, data.y0)
        if cell.adjustment:
            y = regression_adjust(sample, design, outcomes=y)
        if cell.inference == "uniform":
            design = design.uniform()
        elif cell.inference == "adaptive_estimated":
            design = within_set_probs(fitted, design)
        else:
            design = within_set_probs(data.true_scores, design)
        observed = diff_in_means(design, y, z)
        if cell.test == "monte_carlo":
            res = mc_test(design, y, observed, cell.draws, int(rng.integers(2**63)), "greater")
        else:
            res = normal_test(design, y, observed, "greater")
        est = hodges_lehmann(design, y, z, level=1.0 - cell.alpha)
        rec.update(ok=True, p_value=res.p_value, reject=float(res.p_value <= cell.alpha),
                   tau_hat=est.tau_hat, ci_width=est.ci_upper - est.ci_lower)
    except CarinfError as exc:
        rec["reason"] = type(exc).__name__
    return rec


@dataclass
class CellResult:
    cell: ExperimentCell
    records: pd.DataFrame
    balance_screen: bool = False

    @property
    def used(self) -> pd.DataFrame:
        ok = self.records[self.records["ok"]]
        if self.balance_screen:
            ok = ok[ok["max_abs_std_diff"] < 0.2]
        return ok

    @property
    def n_failed(self) -> int:
        return int((~self.records["ok"]).sum())

    @property
    def rejection_rate(self) -> float:
        u = self.used
        return float(u["reject"].mean()) if len(u) else float("nan")

    @property
    def rejection_se(self) -> float:
        r, m = self.rejection_rate, len(self.used)
        return float(np.sqrt(r * (1 - r) / m)) if m else float("nan")

    @property
    def mean_ci_width(self) -> float:
        u = self.used
        return float(u["ci_width"].mean()) if len(u) else float("nan")

    def summary(self) -> dict:
        n_rep = len(self.records)
        row = self.cell.flat()
        row.update(
            n_used=len(self.used), n_failed=self.n_failed,
            failure_flag=self.n_failed > 0.05 * n_rep,
            rejection_rate=self.rejection_rate, rejection_se=self.rejection_se,
            mean_ci_width=self.mean_ci_width,
            mean_tau_hat=float(self.used["tau_hat"].mean()) if len(self.used) else float("nan"),
            mean_n_sets=float(self.records["n_sets"].mean()),
            balance_screen=self.balance_screen,
        )
        return row


def _replicate_seeds(cell: ExperimentCell, cell_index: int):
    return np.random.SeedSequence([cell.seed, cell_index]).spawn(cell.replications)


def _run_block(args):
    cell, seeds = args
    return [run_replicate(cell, s) for s in seeds]


def _workers(workers):
    if workers is None:
        workers = int(os.environ.get("CARINF_THREADS", "1"))
    return max(1, workers)


def run_cell(cell: ExperimentCell, cell_index: int = 0, workers: int | None = None,
             balance_screen: bool = False) -> CellResult:
    """Run all replicates of one cell.

    Replicate r uses child r of ``SeedSequence([cell.seed, cell_index])``, so
    results do not depend on `workers`.
    """
    seeds = _replicate_seeds(cell, cell_index)
    workers = _workers(workers)
    if workers == 1:
        recs = [run_replicate(cell, s) for s in seeds]
    else:
        blocks = [seeds[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_block, [(cell, b) for b in blocks]))
        recs = [None] * len(seeds)
        for i, part in enumerate(parts):
            recs[i::workers] = part
    df = pd.DataFrame(recs)
    df.insert(0, "replicate", np.arange(len(df)))
    return CellResult(cell, df, balance_screen)


def run_grid(cells, workers: int | None = None, balance_screen: bool = False) -> pd.DataFrame:
    """Long-format table with one summary row per cell."""
    rows = [run_cell(c, i, workers, balance_screen).summary() for i, c in enumerate(cells)]
    return pd.DataFrame(rows)


# -- overlap diagnostic -------------------------------------------------------------

def _kde(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    n = len(values)
    sd = values.std(ddof=1) if n > 1 else 0.0
    h = max(1.06 * sd * n ** (-0.2), 1e-3)
    return norm.pdf((grid[:, None] - values[None, :]) / h).sum(axis=1) / (n * h)


def overlap_summary(true_scores, treatment, grid_size: int = 1024) -> dict:
    """Share of the (count-scaled) treated score density covered by the control density.

    Both densities are Gaussian kernel estimates multiplied by their group
    sizes; overlap = integral of min(treated, control) / integral of treated.
    """
    lam = np.asarray(true_scores, dtype=float)
    z = np.asarray(treatment).astype(bool)
    lo, hi = lam.min(), lam.max()
    pad = 0.1 * max(hi - lo, 0.05)
    grid = np.linspace(lo - pad, hi + pad, grid_size)
    dt = z.sum() * _kde(lam[z], grid)
    dc = (~z).sum() * _kde(lam[~z], grid)
    mass = np.trapezoid(dt, grid)
    overlap = float(np.clip(np.trapezoid(np.minimum(dt, dc), grid) / mass, 0.0, 1.0))
    return {"overlap_mass": overlap,
            "density": pd.DataFrame({"score": grid, "treated": dt, "control": dc})}


# -- grid configuration -----------------------------------------------------------

_DGP_KEYS = {"n": int, "p": int, "treatment_model": str, "signal": float, "outcome_model": str,
             "tau_effect": float, "noise_variance": float}
_CELL_KEYS = {"caliper": "bool", "adjustment": "bool", "inference": str, "z_mode": str,
              "replications": int, "seed": int, "draws": int, "alpha": float,
              "caliper_width": float, "pilot_size": int, "test": str}


def _convert(kind, text):
    if kind == "bool":
        t = text.strip().lower()
        if t not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return t in ("true", "1", "yes")
    return kind(text.strip())


def parse_grid_config(text: str) -> tuple[list[ExperimentCell], dict]:
    """Parse ``key = v1, v2, ...`` lines into the Cartesian grid of cells.

    Keys name :class:`DgpSpec` or :class:`ExperimentCell` fields; the extra
    key ``balance_screen`` is returned in the options dict. Lines starting
    with '#' are comments.
    """
    values, options = {}, {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, rhs = (s.strip() for s in line.split("=", 1))
        items = [v for v in rhs.split(",") if v.strip()]
        if key == "balance_screen":
            options[key] = _convert("bool", items[0])
        elif key in _DGP_KEYS:
            values[key] = [_convert(_DGP_KEYS[key], v) for v in items]
        elif key in _CELL_KEYS:
            values[key] = [_convert(_CELL_KEYS[key], v) for v in items]
        else:
            raise ValueError(f"unknown config key {key!r}")
    keys = list(values)
    cells = []
    for combo in itertools.product(*(values[k] for k in keys)):
        kw = dict(zip(keys, combo))
        dgp = DgpSpec(**{k: v for k, v in kw.items() if k in _DGP_KEYS})
        cells.append(ExperimentCell(dgp=dgp, **{k: v for k, v in kw.items() if k in _CELL_KEYS}))
    return cells, options
