"""Simulation harness comparing BART against a parametric plug-in estimator.

A bank of per-visit GLMs (exposure, confounder, mediator, hazard) defines the
data-generating process, optionally with extra log and interaction terms that
the parametric comparator cannot represent. Replicates are drawn from it,
every estimator is run on every replicate, and bias, MSE and interval
coverage are reported against effects computed from the generating models.
"""

from __future__ import annotations

import csv
import json
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import survival_data as sd
from .bart import BartConfig
from .gcomp import GcompConfig, RegimePair, effects, run_single
from .glm import GlmFit, fit_glm
from .sequential_models import BankConfig, LinearModel, ModelRole, exact_bank, fit_bank

DEFAULT_VISITS = (3.0, 6.0, 9.0)
ESTIMANDS = ("IDE", "IIE", "TE")
KINDS = ("exposure", "confounder", "mediator", "hazard")


# ---------------------------------------------------------------- baseline


def synthetic_baseline(n: int = 2000, seed: int = 0):
    """Baseline covariates resembling a middle-aged hypertensive cohort."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7001]))
    age = rng.uniform(45.0, 65.0, n)
    sex = (rng.random(n) < 0.45).astype(float)
    race = (rng.random(n) < 0.25).astype(float)
    bmi = np.exp(rng.normal(np.log(28.5), 0.17, n))
    diabetes = (rng.random(n) < 0.15 + 0.1 * race).astype(float)
    smoke0 = (rng.random(n) < 0.25).astype(float)
    names = ["age", "sex", "race", "bmi", "diabetes", "smoke0"]
    return np.column_stack([age, sex, race, bmi, diabetes, smoke0]), names


# ---------------------------------------------------------------- GLM bank


@dataclass
class GlmBank:
    """Per-visit GLM fits keyed by role; design columns follow the model layout."""

    fits: dict[ModelRole, GlmFit]
    visit_times: np.ndarray
    baseline_names: list[str]

    @property
    def n_visits(self) -> int:
        return len(self.visit_times)

    def flagged(self) -> list[ModelRole]:
        return [r for r, f in self.fits.items() if f.separated]

    def conditional_models(self, misspec: "Misspecification | None" = None):
        out = {}
        for role, fit in self.fits.items():
            skip = 1 if role.kind == "hazard" else 0
            extra = None
            if misspec is not None:
                extra = misspec.term(role.kind, self.baseline_names, skip)
            out[role] = LinearModel(fit.intercept, fit.slopes, fit.family, fit.sigma,
                                    skip=skip, extra=extra)
        return out


def _exposure_tables(dataset: sd.LongitudinalDataset):
    seq = sd.sequence_matrix(dataset.baseline, dataset.z, dataset.l, dataset.m)
    n_ok = sd.complete_visits(dataset)
    order = np.argsort(dataset.ids, kind="stable")
    nb = len(dataset.baseline_names)
    out = {}
    for j in range(1, dataset.n_visits + 1):
        ok = (n_ok >= j - 1) & (dataset.time > dataset.visit_times[j - 1]) \
            & ~np.isnan(dataset.z[:, j - 1])
        rows = order[ok[order]]
        out[j] = (seq[rows, :sd.prefix_length(nb, "exposure", j)], dataset.z[rows, j - 1])
    return out


def fit_ground_truth(dataset: sd.LongitudinalDataset, l_family: str | None = None,
                     m_family: str | None = None) -> GlmBank:
    """Maximum-likelihood GLM for every role and visit of a single-event dataset."""
    from .sequential_models import detect_family

    l_family = l_family or detect_family(dataset.l)
    m_family = m_family or detect_family(dataset.m)
    conf, med = sd.build_covariate_tables(dataset)
    haz = sd.build_hazard_table(dataset)
    expo = _exposure_tables(dataset)
    fits = {}
    for j in range(1, dataset.n_visits + 1):
        for kind, x, y, fam in (("exposure", *expo[j], "binary"),
                                ("confounder", conf[j].x, conf[j].y, l_family),
                                ("mediator", med[j].x, med[j].y, m_family),
                                ("hazard", haz[j].x[:, 1:], haz[j].y, "binary")):
            if len(y) == 0:
                raise ValueError(f"no rows to fit {ModelRole(kind, j)}")
            fits[ModelRole(kind, j)] = fit_glm(x, y, fam)
    return GlmBank(fits, dataset.visit_times.copy(), list(dataset.baseline_names))


def glm_bank_from_coefficients(spec: dict, baseline_names, visit_times=DEFAULT_VISITS,
                               families=None) -> GlmBank:
    """Build a bank from ``{(kind, visit): (intercept, {column: coef}, sigma)}``.

    Columns not mentioned get a zero coefficient.
    """
    families = families or {"exposure": "binary", "confounder": "binary",
                            "mediator": "continuous", "hazard": "binary"}
    fits = {}
    for (kind, j), (intercept, named, sigma) in spec.items():
        cols = sd.model_columns(baseline_names, kind, j)
        if kind == "hazard":
            cols = cols[1:]
        unknown = set(named) - set(cols)
        if unknown:
            raise ValueError(f"{ModelRole(kind, j)} has no columns {sorted(unknown)}")
        coef = np.array([intercept] + [named.get(c, 0.0) for c in cols])
        fits[ModelRole(kind, j)] = GlmFit(families[kind], coef, np.zeros_like(coef),
                                          sigma=sigma)
    return GlmBank(fits, np.asarray(visit_times, dtype=float), list(baseline_names))


def default_truth(baseline: np.ndarray, names, visit_times=DEFAULT_VISITS) -> GlmBank:
    """Hand-set coefficients: exposure lowers the mediator and has a small
    direct effect on the hazard, the confounder is persistent."""
    mean = dict(zip(names, baseline.mean(axis=0)))

    def centred(intercept, coefs):
        return intercept - sum(c * mean.get(k, 0.0) for k, c in coefs.items()
                               if k in mean)

    spec = {}
    m_ref = 128.0
    for j in range(1, len(visit_times) + 1):
        prev = j - 1
        e = {"age": 0.04, "bmi": 0.05, "diabetes": 0.5, "race": 0.3}
        e_int = -1.0
        if prev:
            e.update({f"z_{prev}": 3.0, f"m_{prev}": 0.03})
            e_int -= 1.5 + 0.03 * m_ref
        spec["exposure", j] = (centred(e_int, e), e, 1.0)
        c = {"age": -0.03, "sex": 0.3, f"z_{j}": -0.4}
        c_int = -1.2
        if prev:
            c[f"l_{prev}"] = 3.5
            c_int = -2.6
        else:
            c["smoke0"] = 3.5
        spec["confounder", j] = (centred(c_int, c), c, 1.0)
        mcoef = {"age": 0.5, "bmi": 0.6, "diabetes": 4.0, "race": 3.0, f"z_{j}": -9.0,
                 f"l_{j}": 3.0}
        m_int = 132.0
        if prev:
            mcoef[f"m_{prev}"] = 0.5
            m_int = 132.0 - 0.5 * m_ref
        spec["mediator", j] = (centred(m_int, mcoef), mcoef, 10.0)
        h = {"age": 0.07, "sex": 0.4, "diabetes": 0.6, "smoke0": 0.3}
        h_int = -3.4
        if prev:
            h.update({f"z_{prev}": -0.3, f"l_{prev}": 0.5, f"m_{prev}": 0.03})
            h_int -= 0.03 * m_ref
        spec["hazard", j] = (centred(h_int, h), h, 1.0)
    return glm_bank_from_coefficients(spec, names, visit_times)


# ---------------------------------------------------------------- misspecification


class _ExtraTerm:
    """Fixed nonlinear function of baseline columns added to a linear predictor."""

    def __init__(self, log_cols, log_centres, log_coef, pair_cols, pair_centres,
                 pair_scales, pair_coef):
        self.log_cols = log_cols
        self.log_centres = log_centres
        self.log_coef = log_coef
        self.pair_cols = pair_cols
        self.pair_centres = pair_centres
        self.pair_scales = pair_scales
        self.pair_coef = pair_coef

    def __call__(self, x):
        out = np.zeros(x.shape[0])
        for col, centre in zip(self.log_cols, self.log_centres):
            out += self.log_coef * (np.log1p(x[:, col]) - centre)
        a, b = self.pair_cols
        za = (x[:, a] - self.pair_centres[0]) / self.pair_scales[0]
        zb = (x[:, b] - self.pair_centres[1]) / self.pair_scales[1]
        return out + self.pair_coef * za * zb


@dataclass
class Misspecification:
    """Log terms on positive baseline covariates plus one standardised
    pairwise interaction, added to every generating model."""

    log_terms: tuple[str, ...] = ("bmi", "age")
    interaction: tuple[str, str] = ("bmi", "age")
    log_coef: dict[str, float] = field(default_factory=lambda: {
        "exposure": 0.5, "confounder": 0.5, "mediator": 5.0, "hazard": 0.3})
    interaction_coef: dict[str, float] = field(default_factory=lambda: {
        "exposure": 1.5, "confounder": 1.0, "mediator": 8.0, "hazard": 0.2})
    centres: dict[str, float] = field(default_factory=dict)
    scales: dict[str, float] = field(default_factory=dict)

    def calibrate(self, baseline: np.ndarray, names) -> "Misspecification":
        """Check the named columns and fix centring constants from ``baseline``."""
        for name in set(self.log_terms) | set(self.interaction):
            if name not in names:
                raise ValueError(f"misspecification names unknown covariate {name!r}")
        for name in self.log_terms:
            col = baseline[:, names.index(name)]
            if np.any(col <= 0):
                raise ValueError(f"log term needs a positive covariate; {name!r} is not")
        centres = {f"log:{n}": float(np.mean(np.log1p(baseline[:, names.index(n)])))
                   for n in self.log_terms}
        for n in self.interaction:
            col = baseline[:, names.index(n)]
            centres[n] = float(col.mean())
            self.scales[n] = float(col.std())
        self.centres = centres
        return self

    def term(self, kind: str, names, skip: int) -> _ExtraTerm:
        a, b = self.interaction
        return _ExtraTerm([skip + names.index(n) for n in self.log_terms],
                          [self.centres[f"log:{n}"] for n in self.log_terms],
                          self.log_coef.get(kind, 0.0),
                          (skip + names.index(a), skip + names.index(b)),
                          (self.centres[a], self.centres[b]),
                          (self.scales[a], self.scales[b]),
                          self.interaction_coef.get(kind, 0.0))


@dataclass
class DgpSpec:
    truth: GlmBank
    baseline: np.ndarray
    baseline_names: list[str]
    n: int = 2000
    misspecification: Misspecification | None = None
    seed: int = 0

    def __post_init__(self):
        if self.misspecification is not None and not self.misspecification.centres:
            self.misspecification.calibrate(self.baseline, self.baseline_names)

    @property
    def visit_times(self) -> np.ndarray:
        return self.truth.visit_times

    def models(self):
        return self.truth.conditional_models(self.misspecification)


def default_spec(misspecified: bool = False, n: int = 2000, seed: int = 0,
                 source_size: int = 2000) -> DgpSpec:
    base, names = synthetic_baseline(source_size, seed)
    return DgpSpec(default_truth(base, names), base, names, n=n,
                   misspecification=Misspecification() if misspecified else None, seed=seed)


# ---------------------------------------------------------------- replicates


def generate_replicate(spec: DgpSpec, index: int) -> sd.LongitudinalDataset:
    """Forward-simulate ``spec.n`` subjects with baselines drawn from the source."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 5003, index]))
    models = spec.models()
    t = spec.visit_times
    J = len(t)
    base = spec.baseline[rng.integers(0, len(spec.baseline), spec.n)]
    nb = base.shape[1]
    zlm = {f: np.full((spec.n, J), np.nan) for f in sd.FAMILIES}
    seq = np.zeros((spec.n, nb + 3 * J))
    seq[:, :nb] = base
    alive = np.ones(spec.n, dtype=bool)
    time_ = np.full(spec.n, t[-1] + (t[-1] - (t[-2] if J > 1 else 0.0)))
    delta = np.zeros(spec.n, dtype=np.int64)
    for j in range(1, J + 1):
        rows = np.flatnonzero(alive)
        width = sd.prefix_length(nb, "hazard", j)
        xh = np.column_stack([np.full(len(rows), t[j - 1]), seq[rows, :width]])
        p = models[ModelRole("hazard", j)].probability(0, xh)
        event = rng.random(len(rows)) < p
        start = t[j - 2] if j > 1 else 0.0
        dead = rows[event]
        time_[dead] = start + (t[j - 1] - start) * (1.0 - rng.random(len(dead)))
        delta[dead] = 1
        alive[dead] = False
        rows = rows[~event]
        for off, (kind, fam) in enumerate((("exposure", "z"), ("confounder", "l"),
                                           ("mediator", "m"))):
            width = sd.prefix_length(nb, kind, j)
            model = models[ModelRole(kind, j)]
            values = model.sample(0, seq[rows, :width], rng.random(len(rows)))
            seq[rows, width] = values
            zlm[fam][rows, j - 1] = values
    ids = [f"s{i:06d}" for i in range(spec.n)]
    return sd.LongitudinalDataset(ids=ids, baseline=base, baseline_names=spec.baseline_names,
                                  z=zlm["z"], l=zlm["l"], m=zlm["m"], time=time_,
                                  delta=delta, cause=delta.copy(), visit_times=t)


DEFAULT_REGIMES = RegimePair((1, 1), (0, 0))


@dataclass
class TruthTable:
    effects: dict[str, np.ndarray]  # estimand -> (J,)
    mc_se: dict[str, np.ndarray]
    c_star: int

    def to_dict(self) -> dict:
        return {"c_star": self.c_star,
                "effects": {k: v.tolist() for k, v in self.effects.items()},
                "mc_se": {k: v.tolist() for k, v in self.mc_se.items()}}


def generating_bank(spec: DgpSpec, baseline=None):
    models = {r: m for r, m in spec.models().items() if r.kind != "exposure"}
    return exact_bank(models, spec.visit_times,
                      spec.baseline if baseline is None else baseline, spec.baseline_names)


def true_effects(spec: DgpSpec, regimes: RegimePair = DEFAULT_REGIMES,
                 c_star: int = 1_000_000, batches: int = 10, seed: int = 0) -> TruthTable:
    """Effects under the generating models, averaging the baseline source evenly.

    The Monte Carlo error is estimated from independent batches.
    """
    bank = generating_bank(spec)
    per = max(c_star // batches, 1)
    runs = []
    for b in range(batches):
        cfg = GcompConfig(c_star=per, seed=seed * 1000 + b + 1, bootstrap="empirical")
        post = run_single(bank, regimes, cfg)
        runs.append({k: v.samples[0] for k, v in effects(post).items()})
    eff = {k: np.mean([r[k] for r in runs], axis=0) for k in ESTIMANDS}
    se = {k: np.std([r[k] for r in runs], axis=0, ddof=1) / np.sqrt(batches)
          for k in ESTIMANDS}
    return TruthTable(eff, se, per * batches)


# ---------------------------------------------------------------- estimators


@dataclass
class Estimate:
    point: dict[str, np.ndarray]
    lower: dict[str, np.ndarray]
    upper: dict[str, np.ndarray]
    notes: list[str] = field(default_factory=list)


class BartEstimator:
    """Posterior mean and equal-tailed interval from the BART pipeline."""

    def __init__(self, bank_config: BankConfig | None = None,
                 gcomp_config: GcompConfig | None = None,
                 regimes: RegimePair = DEFAULT_REGIMES):
        self.bank_config = bank_config or BankConfig(
            bart=BartConfig(n_burn=200, n_keep=200), roles="gcomp")
        self.gcomp_config = gcomp_config or GcompConfig(c_star=1000)
        self.regimes = regimes

    def __call__(self, dataset, index: int = 0) -> Estimate:
        bc = self.bank_config
        bank = fit_bank(dataset, "single", BankConfig(bart=bc.bart, pooled_hazard=bc.pooled_hazard,
                                                      l_type=bc.l_type, m_type=bc.m_type,
                                                      seed=bc.seed + index, workers=bc.workers,
                                                      roles=bc.roles))
        gc = self.gcomp_config
        cfg = GcompConfig(c_star=gc.c_star, seed=gc.seed + index, level=gc.level,
                          n_draws=gc.n_draws, workers=gc.workers)
        eff = effects(run_single(bank, self.regimes, cfg), gc.level)
        return Estimate({k: eff[k].mean for k in ESTIMANDS},
                        {k: eff[k].lower for k in ESTIMANDS},
                        {k: eff[k].upper for k in ESTIMANDS})


class GlmPlugin:
    """Maximum-likelihood GLM plug-in with a nonparametric bootstrap interval."""

    def __init__(self, n_boot: int = 200, c_star: int = 2000, level: float = 0.95,
                 regimes: RegimePair = DEFAULT_REGIMES, seed: int = 0):
        self.n_boot = n_boot
        self.c_star = c_star
        self.level = level
        self.regimes = regimes
        self.seed = seed

    def point(self, dataset, seed: int) -> tuple[dict[str, np.ndarray], list]:
        bank = fit_ground_truth(dataset)
        models = {r: m for r, m in bank.conditional_models().items() if r.kind != "exposure"}
        ebank = exact_bank(models, dataset.visit_times, dataset.baseline,
                           dataset.baseline_names)
        cfg = GcompConfig(c_star=self.c_star, seed=seed, bootstrap="empirical")
        eff = effects(run_single(ebank, self.regimes, cfg))
        return {k: eff[k].samples[0] for k in ESTIMANDS}, bank.flagged()

    def __call__(self, dataset, index: int = 0) -> Estimate:
        point, flagged = self.point(dataset, self.seed + index)
        notes = [f"separation in {r}" for r in flagged]
        lower = {k: np.full_like(v, np.nan) for k, v in point.items()}
        upper = {k: np.full_like(v, np.nan) for k, v in point.items()}
        if self.n_boot:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 8011, index]))
            boots = {k: [] for k in ESTIMANDS}
            for b in range(self.n_boot):
                rows = rng.integers(0, dataset.n, dataset.n)
                resample = dataset.take(rows)
                resample.ids = np.array([f"b{i:06d}" for i in range(dataset.n)])
                est, _ = self.point(resample, self.seed + index * 100003 + b + 1)
                for k in ESTIMANDS:
                    boots[k].append(est[k])
            a = (1 - self.level) / 2
            for k in ESTIMANDS:
                arr = np.array(boots[k])
                lower[k] = np.quantile(arr, a, axis=0)
                upper[k] = np.quantile(arr, 1 - a, axis=0)
        return Estimate(point, lower, upper, notes)


# ---------------------------------------------------------------- study


@dataclass
class SimReport:
    cells: list[dict]
    truth: TruthTable
    estimates: dict[str, dict[str, np.ndarray]]  # estimator -> estimand -> (reps, J)
    intervals: dict[str, dict[str, tuple[np.ndarray, np.ndarray]]]
    failures: dict[str, list[str]]
    n_reps: int
    seconds: float = 0.0

    def cell(self, estimator: str, estimand: str, visit: int) -> dict:
        for c in self.cells:
            if (c["estimator"], c["estimand"], c["visit"]) == (estimator, estimand, visit):
                return c
        raise KeyError((estimator, estimand, visit))

    def to_json(self, path) -> None:
        blob = {"n_reps": self.n_reps, "seconds": self.seconds, "truth": self.truth.to_dict(),
                "cells": self.cells, "failures": self.failures}
        Path(path).write_text(json.dumps(blob, indent=2))

    def to_csv(self, path) -> None:
        fields = ["visit", "estimand", "estimator", "bias", "coverage", "mse", "bias_se",
                  "coverage_se", "mse_se", "truth", "n_ok", "n_failed"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            w.writeheader()
            for c in sorted(self.cells, key=lambda c: (c["visit"], ESTIMANDS.index(c["estimand"]),
                                                       c["estimator"])):
                w.writerow(c)

    def table(self) -> str:
        names = sorted(self.estimates)
        head = f"{'visit':<6}{'':<5}" + "".join(
            f"{n + ' bias':>14}{'coverage':>10}{'MSE':>11}" for n in names)
        lines = [head]
        visits = sorted({c["visit"] for c in self.cells})
        for j in visits:
            for k in ESTIMANDS:
                row = f"{j if k == 'IDE' else '':<6}{k:<5}"
                for n in names:
                    c = self.cell(n, k, j)
                    cov = "n/a" if np.isnan(c["coverage"]) else f"{c['coverage']:.2f}"
                    row += f"{c['bias']:>14.1e}{cov:>10}{c['mse']:>11.1e}"
                lines.append(row)
        return "\n".join(lines)


def summarise(estimates, intervals, truth: TruthTable, visits, failures, n_reps) -> list[dict]:
    cells = []
    for name, est in estimates.items():
        for k, arr in est.items():
            lo, hi = intervals[name][k]
            for j in visits:
                ok = ~np.isnan(arr[:, j - 1])
                err = arr[ok, j - 1] - truth.effects[k][j - 1]
                n_ok = int(ok.sum())
                inside = (lo[ok, j - 1] <= truth.effects[k][j - 1]) & \
                    (truth.effects[k][j - 1] <= hi[ok, j - 1])
                has_int = ~np.isnan(lo[ok, j - 1])
                cov = float(inside[has_int].mean()) if has_int.any() else float("nan")
                sq = err ** 2
                cells.append({
                    "estimator": name, "estimand": k, "visit": j,
                    "truth": float(truth.effects[k][j - 1]),
                    "truth_se": float(truth.mc_se[k][j - 1]),
                    "bias": float(err.mean()) if n_ok else float("nan"),
                    "bias_se": float(err.std(ddof=1) / np.sqrt(n_ok)) if n_ok > 1 else float("nan"),
                    "mse": float(sq.mean()) if n_ok else float("nan"),
                    "mse_se": float(sq.std(ddof=1) / np.sqrt(n_ok)) if n_ok > 1 else float("nan"),
                    "coverage": cov,
                    "coverage_se": float(np.sqrt(cov * (1 - cov) / max(has_int.sum(), 1))),
                    "n_ok": n_ok, "n_failed": len(failures.get(name, [])),
                })
    return cells


def run_study(spec: DgpSpec, estimators: dict, n_reps: int = 100,
              truth: TruthTable | None = None, visits=(2, 3), progress=None,
              first_index: int = 0) -> SimReport:
    """Run every estimator on ``n_reps`` replicates. An estimator that raises on a
    replicate is recorded as a failure and the study carries on."""
    start = time.time()
    truth = truth or true_effects(spec)
    J = spec.truth.n_visits
    est = {n: {k: np.full((n_reps, J), np.nan) for k in ESTIMANDS} for n in estimators}
    ints = {n: {k: (np.full((n_reps, J), np.nan), np.full((n_reps, J), np.nan))
                for k in ESTIMANDS} for n in estimators}
    failures = {n: [] for n in estimators}
    for r in range(n_reps):
        index = first_index + r
        data = generate_replicate(spec, index)
        for name, fn in estimators.items():
            try:
                e = fn(data, index)
            except Exception as exc:  # noqa: BLE001 - a failed replicate is data
                failures[name].append(f"replicate {index}: {exc!r}\n{traceback.format_exc()}")
                continue
            for k in ESTIMANDS:
                est[name][k][r] = e.point[k]
                ints[name][k][0][r] = e.lower[k]
                ints[name][k][1][r] = e.upper[k]
        if progress:
            progress(r + 1, n_reps)
    cells = summarise(est, ints, truth, visits, failures, n_reps)
    return SimReport(cells, truth, est, ints, failures, n_reps, time.time() - start)
