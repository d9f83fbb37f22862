"""Command-line entry point: ``carinf <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from carinf import __version__
from carinf.core import (
    MatchedDesign,
    design_from_json,
    design_from_text,
    design_to_json,
    design_to_text,
    read_sample_csv,
    standardized_differences,
    validate_design,
)
from carinf.errors import CarinfError, NoRejectionAtOne
from carinf.inference import (
    diff_in_means,
    exact_test,
    hodges_lehmann,
    mc_test,
    normal_test,
    regression_adjust,
    tv_diagnostic,
)
from carinf.matching import DistanceSpec, match_sample
from carinf.propensity import fit_logistic, within_set_probs
from carinf.sensitivity import SensitivityProblem, observed_sum, sensitivity_table, threshold_gamma
from carinf.simlab import generate, overlap_summary, parse_grid_config, run_cell

log = logging.getLogger("carinf")

SUBCOMMANDS = ("fit-propensity", "match", "test", "estimate", "sensitivity", "simulate", "pipeline")


class StageError(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


def _csv_list(text):
    return [s.strip() for s in text.split(",") if s.strip()] if text else []


def _float_list(text):
    return [float(s) for s in _csv_list(text)]


# -- argument parsing -------------------------------------------------------------

def _add_data_flags(p, outcome=False):
    p.add_argument("--input", required=True, help="CSV file with a header row")
    p.add_argument("--treatment-col", required=True, help="0/1 treatment column")
    p.add_argument("--outcome-col", required=outcome, default=None, help="outcome column")
    p.add_argument("--id-col", default=None, help="unit identifier column (default: row number)")
    p.add_argument("--exclude-cols", default="", help="comma-separated columns that are not covariates")
    p.add_argument("--score-col", default=None,
                   help="externally fitted propensity scores; otherwise fit in-sample")
    p.add_argument("--out-dir", default=None, help="directory for output artifacts")


def _add_match_flags(p):
    p.add_argument("--caliper", type=float, default=None, help="caliper width in SDs of the score")
    p.add_argument("--caliper-mode", choices=("soft", "hard"), default="hard")
    p.add_argument("--penalty", type=float, default=None, help="soft-caliper penalty per unit score")
    p.add_argument("--allow-exclusion", action="store_true",
                   help="drop the fewest treated units needed to satisfy a hard caliper")
    p.add_argument("--design", default=None, help="existing design (.csv text format or .json)")


def _add_inference_flags(p):
    p.add_argument("--inference", choices=("uniform", "adaptive"), default="adaptive")
    p.add_argument("--draws", type=int, default=5000, help="Monte Carlo draws")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--sided", choices=("greater", "less", "two"), default="greater")
    p.add_argument("--adjust-cols", default=None,
                   help="comma-separated covariates for regression adjustment of the outcome")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carinf", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-propensity", help="fit a logistic propensity model")
    _add_data_flags(p)

    p = sub.add_parser("match", help="optimal pair match on a robust Mahalanobis distance")
    _add_data_flags(p)
    _add_match_flags(p)

    p = sub.add_parser("test", help="randomization test of the sharp null")
    _add_data_flags(p, outcome=True)
    _add_match_flags(p)
    _add_inference_flags(p)
    p.add_argument("--method", choices=("monte_carlo", "normal", "exact"), default="monte_carlo")

    p = sub.add_parser("estimate", help="Hodges-Lehmann estimate and confidence interval")
    _add_data_flags(p, outcome=True)
    _add_match_flags(p)
    _add_inference_flags(p)
    p.add_argument("--ci-method", choices=("normal_approx", "test_inversion", "mc_inversion"),
                   default="normal_approx")

    p = sub.add_parser("sensitivity", help="worst-case p-values over Gamma")
    _add_data_flags(p, outcome=True)
    _add_match_flags(p)
    _add_inference_flags(p)
    p.add_argument("--gamma", default="1,1.1,1.2,1.5,2", help="comma-separated Gamma grid")
    p.add_argument("--gamma-threshold", action="store_true", help="also report the threshold Gamma")

    p = sub.add_parser("simulate", help="run a simulation grid")
    p.add_argument("--grid-config", required=True, help="key = v1, v2 grid file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the seed of every cell")

    p = sub.add_parser("pipeline", help="fit, match, test, estimate and sensitivity in one run")
    _add_data_flags(p, outcome=True)
    _add_match_flags(p)
    _add_inference_flags(p)
    p.add_argument("--gamma", default="1,1.1,1.2,1.5,2", help="comma-separated Gamma grid")
    p.add_argument("--gamma-threshold", action="store_true", default=True)
    return parser


# -- stages -----------------------------------------------------------------------

def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except StageError:
        raise
    except (CarinfError, ValueError, KeyError, OSError) as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def load(args):
    exclude = _csv_list(args.exclude_cols)
    if args.score_col:
        exclude.append(args.score_col)
    sample = read_sample_csv(args.input, args.treatment_col, args.outcome_col, args.id_col, exclude)
    scores = None
    if args.score_col:
        scores = pd.read_csv(args.input)[args.score_col].to_numpy(float)
    return sample, scores


def propensity(sample, scores):
    """External scores when supplied, else an in-sample logistic fit."""
    if scores is not None:
        return scores, {"source": "external"}
    fit = fit_logistic(sample)
    if fit.separated:
        raise CarinfError("propensity model shows separation; supply --score-col")
    info = {"source": "in_sample", "coefficients": fit.coefficients.tolist(),
            "converged": fit.converged, "iterations": fit.iterations,
            "log_likelihood": fit.log_likelihood,
            "covariates": list(sample.covariate_names)}
    return fit.fitted, info


def build_design(args, sample, scores):
    if args.design:
        text = Path(args.design).read_text()
        design = (design_from_json(text, sample) if args.design.endswith(".json")
                  else design_from_text(text, sample))
        design = MatchedDesign.from_sets(design.sets, sample.treatment, design.probs)
        validate_design(sample, design)
        return design, ()
    spec = DistanceSpec(caliper=args.caliper, caliper_mode=args.caliper_mode, penalty=args.penalty,
                        propensity_scores=scores if args.caliper else None)
    res = match_sample(sample, spec, allow_exclusion=args.allow_exclusion)
    design = MatchedDesign.from_sets(res.design.sets, sample.treatment)
    validate_design(sample, design)
    return design, tuple(sample.unit_ids[i] for i in res.excluded)


def outcomes_for(args, sample, design):
    if args.adjust_cols:
        return regression_adjust(sample, design, _csv_list(args.adjust_cols))
    return np.asarray(sample.outcome, dtype=float)


def probs_for(mode, design, scores):
    return design.uniform() if mode == "uniform" else within_set_probs(scores, design)


def pair_table(sample, design, scores) -> pd.DataFrame:
    """Treated-minus-control differences per set (first control), with a mean row."""
    rows = []
    for k, s in enumerate(design.sets):
        t, c = s[0], s[1:]
        row = {"set": k, "treated": sample.unit_ids[t],
               "controls": " ".join(sample.unit_ids[i] for i in c)}
        for j, name in enumerate(sample.covariate_names):
            row[name] = sample.covariates[t, j] - sample.covariates[c, j].mean()
        row["propensity"] = scores[t] - scores[c].mean()
        rows.append(row)
    df = pd.DataFrame(rows)
    mean = {col: df[col].mean() for col in list(sample.covariate_names) + ["propensity"]}
    mean.update(set="mean", treated="", controls="")
    return pd.concat([df, pd.DataFrame([mean])], ignore_index=True)


def run_test(args, design, y, z, mode, scores):
    d = probs_for(mode, design, scores)
    observed = diff_in_means(d, y, z)
    method = getattr(args, "method", "monte_carlo")
    if method == "normal":
        return normal_test(d, y, observed, args.sided)
    if method == "exact":
        return exact_test(d, y, observed, args.sided)
    return mc_test(d, y, observed, args.draws, args.seed, args.sided)


def run_sensitivity(args, design, y, z, mode, scores):
    d = probs_for(mode, design, scores)
    prob = SensitivityProblem.from_design(d, y)
    obs = observed_sum(d, y, z)
    out = {"table": sensitivity_table(prob, obs, _float_list(args.gamma))}
    if args.gamma_threshold:
        try:
            out["threshold_gamma"] = threshold_gamma(prob, obs, args.alpha)
        except NoRejectionAtOne:
            out["threshold_gamma"] = None
    return out


# -- output -----------------------------------------------------------------------

def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


class Output:
    def __init__(self, args, argv):
        self.args = args
        self.argv = argv
        self.dir = Path(args.out_dir) if getattr(args, "out_dir", None) else None
        self.files = []
        self.start = time.time()
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)

    def table(self, name, df: pd.DataFrame):
        if self.dir:
            df.to_csv(self.dir / name, index=False, float_format="%.17g")
            self.files.append(name)

    def text(self, name, text):
        if self.dir:
            (self.dir / name).write_text(text)
            self.files.append(name)

    def manifest(self):
        inputs = {}
        for key in ("input", "design", "grid_config"):
            path = getattr(self.args, key, None)
            if path:
                inputs[path] = _digest(path)
        return {"subcommand": self.args.command, "argv": self.argv,
                "flags": {k: v for k, v in vars(self.args).items() if k != "command"},
                "input_digests": inputs, "seed": getattr(self.args, "seed", None),
                "version": __version__, "artifacts": self.files,
                "wall_time_s": round(time.time() - self.start, 3)}

    def finish(self, result: dict):
        result = _jsonable(result)
        self.text("result.json", json.dumps(result, indent=1))
        man = self.manifest()
        if self.dir:
            (self.dir / "manifest.json").write_text(json.dumps(_jsonable(man), indent=1))
        json.dump(result, sys.stdout, indent=1)
        sys.stdout.write("\n")


# -- subcommands ------------------------------------------------------------------

def cmd_fit(args, out):
    sample, scores = _stage("ingest", load, args)
    scores, info = _stage("propensity", propensity, sample, scores)
    df = pd.DataFrame({"unit_id": sample.unit_ids, "score": scores})
    out.table("scores.csv", df)
    return {"propensity": info, "scores": dict(zip(sample.unit_ids, scores.tolist()))}


def _prepare(args):
    sample, scores = _stage("ingest", load, args)
    need_scores = args.caliper is not None or getattr(args, "inference", "uniform") == "adaptive" \
        or args.command == "pipeline"
    info = None
    if need_scores:
        scores, info = _stage("propensity", propensity, sample, scores)
    design, excluded = _stage("match", build_design, args, sample, scores)
    return sample, scores, info, design, excluded


def cmd_match(args, out):
    sample, scores, info, design, excluded = _prepare(args)
    if scores is not None:
        design = within_set_probs(scores, design)
    bal = standardized_differences(sample, design)
    out.text("design.csv", design_to_text(design, sample))
    out.text("design.json", design_to_json(design, sample))
    out.table("balance.csv", bal.to_frame())
    return {"n_sets": design.n_sets, "excluded": list(excluded), "propensity": info,
            "balance": bal.to_frame().to_dict(orient="records"),
            "design": json.loads(design_to_json(design, sample))}


def cmd_test(args, out):
    sample, scores, info, design, excluded = _prepare(args)
    y = _stage("adjust", outcomes_for, args, sample, design)
    res = _stage("test", run_test, args, design, y, sample.treatment, args.inference, scores)
    result = {"test": res.to_dict(), "inference": args.inference, "n_sets": design.n_sets,
              "excluded": list(excluded)}
    if scores is not None:
        result["tv_bound_vs_uniform"] = tv_diagnostic(within_set_probs(scores, design), design.uniform())
    return result


def cmd_estimate(args, out):
    sample, scores, info, design, excluded = _prepare(args)
    y = _stage("adjust", outcomes_for, args, sample, design)
    d = probs_for(args.inference, design, scores)
    est = _stage("estimate", hodges_lehmann, d, y, sample.treatment, 1.0 - args.alpha,
                 args.ci_method, args.draws, args.seed)
    return {"estimate": est.to_dict(), "inference": args.inference, "seed": args.seed,
            "draws": args.draws, "n_sets": design.n_sets}


def cmd_sensitivity(args, out):
    sample, scores, info, design, excluded = _prepare(args)
    y = _stage("adjust", outcomes_for, args, sample, design)
    res = _stage("sensitivity", run_sensitivity, args, design, y, sample.treatment,
                 args.inference, scores)
    out.table("sensitivity.csv", pd.DataFrame(res["table"]))
    return {"sensitivity": res, "inference": args.inference}


def cmd_pipeline(args, out):
    sample, scores, info, design, excluded = _prepare(args)
    y = _stage("adjust", outcomes_for, args, sample, design)
    z = sample.treatment
    bal = standardized_differences(sample, design)
    pairs = pair_table(sample, design, scores)
    adaptive = within_set_probs(scores, design)
    out.text("design.csv", design_to_text(adaptive, sample))
    out.text("design.json", design_to_json(adaptive, sample))
    out.table("balance.csv", bal.to_frame())
    out.table("pairs.csv", pairs)
    result = {"propensity": info, "n_sets": design.n_sets, "excluded": list(excluded),
              "balance": bal.to_frame().to_dict(orient="records"),
              "pair_means": pairs.iloc[-1].drop(["set", "treated", "controls"]).to_dict(),
              "tv_bound_vs_uniform": tv_diagnostic(adaptive, design.uniform())}
    for mode in ("uniform", "adaptive"):
        test = _stage("test", run_test, args, design, y, z, mode, scores)
        est = _stage("estimate", hodges_lehmann, probs_for(mode, design, scores), y, z,
                     1.0 - args.alpha)
        sens = _stage("sensitivity", run_sensitivity, args, design, y, z, mode, scores)
        out.table(f"sensitivity_{mode}.csv", pd.DataFrame(sens["table"]))
        result[mode] = {"test": test.to_dict(), "estimate": est.to_dict(), "sensitivity": sens}
    return result


def cmd_simulate(args, out):
    cells, options = _stage("config", lambda: parse_grid_config(Path(args.grid_config).read_text()))
    if args.seed is not None:
        cells = [replace(c, seed=args.seed) for c in cells]
    rows = []
    failures = {}
    for i, cell in enumerate(cells):
        res = _stage("simulate", run_cell, cell, i, None, options.get("balance_screen", False))
        row = res.summary()
        row["cell_index"] = i
        rows.append(row)
        failures[i] = res.n_failed
        data = generate(cell.dgp, np.random.default_rng([cell.seed, i]))
        ov = overlap_summary(data.true_scores, data.sample.treatment)
        out.table(f"density_cell{i:03d}.csv", ov["density"])
        row["overlap_mass"] = ov["overlap_mass"]
    table = pd.DataFrame(rows)
    out.table("results.csv", table)
    return {"cells": len(cells), "failures": failures, "options": options,
            "results": table.to_dict(orient="records")}


COMMANDS = {"fit-propensity": cmd_fit, "match": cmd_match, "test": cmd_test,
            "estimate": cmd_estimate, "sensitivity": cmd_sensitivity,
            "simulate": cmd_simulate, "pipeline": cmd_pipeline}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    out = Output(args, argv)
    try:
        result = COMMANDS[args.command](args, out)
    except StageError as exc:
        report = {"error": {"stage": exc.stage, "cause": exc.cause}}
        if out.dir:
            (out.dir / "error.json").write_text(json.dumps(report, indent=1))
        json.dump(report, sys.stderr, indent=1)
        sys.stderr.write("\n")
        return 1
    out.finish(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
