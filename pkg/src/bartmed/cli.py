"""Command-line pipelines: fit, gcomp, simulate, impute and report.

Settings come from, in increasing priority: built-in defaults, a key-value
config file (``--config``), ``BARTMED_*`` environment variables for paths and
seeds, and command-line flags. The config file holds ``key = value`` lines
using the long flag names with dashes or underscores, e.g.::

    mode = single
    input = cohort.csv
    c_star = 2000
    age-strata = 45-49,50-54

Exit codes: 0 success, 2 usage, 3 data validation, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import gcomp as gc
from . import imputation as imp
from . import sequential_models as sm
from . import sim_study as ss
from . import survival_data as sd
from .bart import BartConfig, BartError

log = logging.getLogger("bartmed")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4
ENV_KEYS = ("input", "external", "bank", "out", "seed")

DEFAULTS = {
    "mode": "single",
    "visit_times": None,
    "seed": 0,
    "workers": None,
    "c_star": 1000,
    "burn": 1000,
    "keep": 1000,
    "regime": None,
    "regime_star": None,
    "age_strata": None,
    "subset": None,
    "level": 0.95,
    "emit_samples": False,
    "pooled_hazard": False,
    "strict": False,
    "draw": None,
    "reps": 100,
    "n": 2000,
    "misspecified": False,
    "estimators": "bart,glm",
    "boot": 200,
    "truth_c_star": 1_000_000,
}
TYPES = {"seed": int, "workers": int, "c_star": int, "burn": int, "keep": int, "level": float,
         "reps": int, "n": int, "boot": int, "truth_c_star": int, "draw": int}
FLAGS = {"emit_samples", "pooled_hazard", "strict", "misspecified"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- settings


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    return str(v).strip().lower() in ("1", "true", "yes", "on")


def read_config(path) -> dict:
    """Parse a key-value file; an optional ``[bartmed]`` header is allowed."""
    text = Path(path).read_text()
    if not text.lstrip().startswith("["):
        text = "[bartmed]\n" + text
    parser = configparser.ConfigParser()
    parser.read_string(text)
    if "bartmed" not in parser:
        raise UsageError(f"{path}: expected a [bartmed] section")
    return {k.replace("-", "_"): v for k, v in parser["bartmed"].items()}


def resolve(args: argparse.Namespace, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg = read_config(args.config)
        unknown = set(cfg) - set(DEFAULTS) - set(ENV_KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        settings.update(cfg)
    for key in ENV_KEYS:
        env = environ.get(f"BARTMED_{key.upper()}")
        if env:
            settings[key] = env
    for key, value in vars(args).items():
        if key in ("command", "config", "func"):
            continue
        if value is not None and not (key in FLAGS and value is False):
            settings[key] = value
    for key, kind in TYPES.items():
        if settings.get(key) is not None:
            try:
                settings[key] = kind(settings[key])
            except ValueError:
                raise UsageError(f"{key} must be of type {kind.__name__}") from None
    for key in FLAGS:
        settings[key] = _as_bool(settings.get(key, False))
    if settings["workers"] is None:
        settings["workers"] = os.cpu_count() or 1
    if not 0 < settings["level"] < 1:
        raise UsageError("--level must lie strictly between 0 and 1")
    if settings["mode"] not in ("single", "competing"):
        raise UsageError("--mode must be 'single' or 'competing'")
    vt = settings.get("visit_times")
    if isinstance(vt, str):
        try:
            settings["visit_times"] = [float(s) for s in vt.split(",")]
        except ValueError:
            raise UsageError(f"bad --visit-times {vt!r}") from None
    return settings


def _need(settings, key, exists=True) -> Path:
    value = settings.get(key)
    if not value:
        raise UsageError(f"--{key.replace('_', '-')} is required")
    path = Path(value)
    if exists and not path.exists():
        raise UsageError(f"{path} does not exist")
    return path


def _out_dir(settings) -> Path:
    out = Path(_need(settings, "out", exists=False))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bart_config(s) -> BartConfig:
    return BartConfig(n_burn=s["burn"], n_keep=s["keep"], seed=s["seed"])


def _regimes(s, n_visits: int) -> gc.RegimePair:
    # the exposure at the last visit cannot affect events up to that visit
    n = n_visits - 1
    z = s["regime"] or ",".join(["1"] * n)
    zs = s["regime_star"] or ",".join(["0"] * n)
    try:
        pair = gc.RegimePair.parse(z, zs)
    except ValueError as exc:
        raise UsageError(f"bad regime: {exc}") from None
    if len(pair.z) != n:
        raise UsageError(f"regimes need {n} entries for {n_visits} visits, got {len(pair.z)}")
    return pair


def _read_dataset(s) -> sd.LongitudinalDataset:
    path = _need(s, "input")
    data = sd.read_wide_csv(path, s["visit_times"], s["mode"])
    sd.require_valid(data)
    if s["subset"]:
        data = data.subset(s["subset"])
        if data.n == 0:
            raise UsageError(f"subset {s['subset']!r} selects no subjects")
    return data


# ---------------------------------------------------------------- commands


def cmd_fit(s) -> int:
    data = _read_dataset(s)
    bank_dir = Path(s.get("bank") or _out_dir(s) / "bank")
    config = sm.BankConfig(bart=_bart_config(s), pooled_hazard=s["pooled_hazard"],
                           seed=s["seed"], workers=s["workers"])
    bank = sm.fit_bank(data, s["mode"], config)
    sm.save_bank(bank, bank_dir)
    log.info("wrote %d models to %s (config %s)", len(bank.models), bank_dir,
             bank.config["config_hash"][:12])
    return EXIT_OK


def cmd_gcomp(s) -> int:
    bank_path = _need(s, "bank")
    if not (bank_path / "manifest.json").exists():
        raise UsageError(f"{bank_path} holds no model bank")
    bank = sm.load_bank(bank_path)
    if bank.mode != s["mode"]:
        raise UsageError(f"bank was fitted in {bank.mode!r} mode, not {s['mode']!r}")
    out = _out_dir(s)
    if s["subset"]:
        rows = sd.subset_rows(bank.baseline, bank.baseline_names,
                              bank.config.get("categories", {}), s["subset"])
        if len(rows) == 0:
            raise UsageError(f"subset {s['subset']!r} selects no subjects")
        bank.baseline = bank.baseline[rows]
    regimes = _regimes(s, bank.n_visits)
    cfg = gc.GcompConfig(c_star=s["c_star"], seed=s["seed"], level=s["level"],
                         workers=s["workers"])
    posts = {"all": gc.run(bank, regimes, cfg)}
    if s["age_strata"]:
        try:
            strata = gc.parse_strata(s["age_strata"])
        except ValueError:
            raise UsageError(f"bad --age-strata {s['age_strata']!r}") from None
        posts.update(gc.run_age_stratified(bank, regimes, cfg, strata))
    rows, samples = [], {}
    for stratum, post in posts.items():
        summary = gc.effects(post, s["level"])
        rows += gc.effect_rows(summary, bank.visit_times, stratum, first_visit=1)
        if s["emit_samples"]:
            samples.update({(stratum, k): v.samples for k, v in summary.items()})
    gc.write_effects(rows, out / "effects.csv", out / "effects.json", samples or None)
    (out / "effects_table.txt").write_text(gc.format_table(rows) + "\n")
    print(gc.format_table(rows))
    return EXIT_OK


def _truth(spec, s, out: Path) -> ss.TruthTable:
    key = {"seed": s["seed"], "misspecified": s["misspecified"], "c_star": s["truth_c_star"]}
    cache = out / "truth.json"
    if cache.exists():
        blob = json.loads(cache.read_text())
        if blob.get("key") == key:
            return ss.TruthTable({k: np.array(v) for k, v in blob["effects"].items()},
                                 {k: np.array(v) for k, v in blob["mc_se"].items()},
                                 blob["c_star"])
    truth = ss.true_effects(spec, c_star=s["truth_c_star"], seed=s["seed"])
    cache.write_text(json.dumps({"key": key, **truth.to_dict()}, indent=2))
    return truth


def cmd_simulate(s) -> int:
    out = _out_dir(s)
    spec = ss.default_spec(misspecified=s["misspecified"], n=s["n"], seed=s["seed"])
    names = [e.strip() for e in s["estimators"].split(",") if e.strip()]
    estimators = {}
    for name in names:
        if name == "bart":
            estimators["BART"] = ss.BartEstimator(
                sm.BankConfig(bart=_bart_config(s), seed=s["seed"], workers=s["workers"],
                              roles="gcomp"),
                gc.GcompConfig(c_star=s["c_star"], seed=s["seed"], level=s["level"],
                               workers=s["workers"]))
        elif name == "glm":
            estimators["GLM"] = ss.GlmPlugin(n_boot=s["boot"], c_star=s["c_star"],
                                             level=s["level"], seed=s["seed"])
        else:
            raise UsageError(f"unknown estimator {name!r} (use bart, glm)")
    truth = _truth(spec, s, out)
    report = ss.run_study(spec, estimators, s["reps"], truth,
                          progress=lambda r, n: log.info("replicate %d/%d", r, n))
    report.to_csv(out / "simulation.csv")
    report.to_json(out / "simulation.json")
    (out / "simulation_table.txt").write_text(report.table() + "\n")
    print(report.table())
    return EXIT_OK


def cmd_impute(s) -> int:
    external = _need(s, "external")
    target = _need(s, "input")
    out = _out_dir(s)
    data = sd.read_wide_csv(target, s["visit_times"], s["mode"])
    cohort = imp.ExternalCohort.read_csv(external)
    keep = s["draw"] is not None
    fit = imp.fit_lmm(cohort, imp.LmmConfig(n_burn=s["burn"], n_keep=s["keep"],
                                            seed=s["seed"], keep_random_draws=keep))
    result = imp.augment(data, fit, seed=s["seed"], fallback=not s["strict"], draw=s["draw"])
    sd.write_wide_csv(result.dataset, out / "augmented.csv")
    with open(out / "matches.csv", "w") as fh:
        fh.write("id,donor,pool_size,b0,b1,cmbp,note,extrapolated\n")
        for a in result.assignments:
            fh.write(f"{a.subject},{a.donor},{a.pool_size},{a.random_effects[0]!r},"
                     f"{a.random_effects[1]!r},{a.cmbp!r},{a.note or ''},"
                     f"{int(a.extrapolated)}\n")
    summary = {"fixed_effects": dict(zip(imp.FIXED_NAMES, fit.beta.tolist())),
               "fixed_effects_sd": dict(zip(imp.FIXED_NAMES, fit.beta_sd.tolist())),
               "random_effect_cov": fit.re_cov.tolist(), "residual_var": fit.sigma2,
               "n_relaxed": len(result.relaxed)}
    (out / "lmm_fit.json").write_text(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_report(s) -> int:
    src = Path(_need(s, "input"))
    blob = json.loads(src.read_text())
    if "effects" in blob and isinstance(blob["effects"], list):
        text = gc.format_table(blob["effects"])
    elif "cells" in blob:
        rows = blob["cells"]
        head = f"{'visit':<6}{'estimand':<10}{'estimator':<10}{'bias':>11}{'coverage':>10}" \
               f"{'MSE':>11}"
        lines = [head] + [
            f"{c['visit']:<6}{c['estimand']:<10}{c['estimator']:<10}{c['bias']:>11.1e}"
            f"{c['coverage']:>10.2f}{c['mse']:>11.1e}" for c in rows]
        text = "\n".join(lines)
    else:
        raise UsageError(f"{src} is neither an effects nor a simulation report")
    if s.get("out"):
        out = _out_dir(s)
        (out / (src.stem + "_table.txt")).write_text(text + "\n")
    print(text)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "gcomp": cmd_gcomp, "simulate": cmd_simulate,
            "impute": cmd_impute, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="key-value settings file")
    g.add_argument("--mode", choices=("single", "competing"))
    g.add_argument("--input", help="input CSV (report: a JSON report)")
    g.add_argument("--visit-times", help="comma-separated visit times t_1..t_J")
    g.add_argument("--bank", help="model bank directory")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int, help="threads (default: all cores)")
    g.add_argument("--burn", type=int, help="MCMC burn-in iterations")
    g.add_argument("--keep", type=int, help="posterior draws kept")
    g.add_argument("--subset", help="restrict to baseline column name=value")
    g.add_argument("--level", type=float, help="credible level")
    g.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="bartmed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("fit", parents=[common], help="fit the sequential BART models")
    p.add_argument("--pooled-hazard", action="store_true", default=False)
    p = sub.add_parser("gcomp", parents=[common], help="posterior g-computation")
    p.add_argument("--c-star", type=int, help="Monte Carlo subjects per draw")
    p.add_argument("--regime", help="exposure regime z over visits 1..J-1, e.g. 1,1")
    p.add_argument("--regime-star", help="reference regime z*, e.g. 0,0")
    p.add_argument("--age-strata", help="age bands, e.g. 45-49,50-54")
    p.add_argument("--emit-samples", action="store_true", default=False)
    p = sub.add_parser("simulate", parents=[common], help="simulation study")
    p.add_argument("--c-star", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--n", type=int, help="subjects per replicate")
    p.add_argument("--misspecified", action="store_true", default=False)
    p.add_argument("--estimators", help="comma list of bart, glm")
    p.add_argument("--boot", type=int, help="bootstrap resamples for the GLM interval")
    p.add_argument("--truth-c-star", type=int)
    p = sub.add_parser("impute", parents=[common], help="impute cumulative mean BP")
    p.add_argument("--external", help="external cohort CSV (id,race,sex,bmi,age,mbp)")
    p.add_argument("--strict", action="store_true", default=False,
                   help="fail on empty donor pools instead of relaxing the match")
    p.add_argument("--draw", type=int, help="use one posterior draw instead of means")
    sub.add_parser("report", parents=[common], help="render a JSON report as a table")
    return parser


def main(argv=None, environ=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    del args.verbose
    try:
        settings = resolve(args, environ)
        return COMMANDS[args.command](settings)
    except UsageError as exc:
        print(f"bartmed: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except sd.DataValidationError as exc:
        print(f"bartmed: invalid data:\n{exc.report.summary()}", file=sys.stderr)
        return EXIT_VALIDATION
    except (np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"bartmed: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (imp.EmptyDonorPool, BartError, ValueError) as exc:
        print(f"bartmed: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
