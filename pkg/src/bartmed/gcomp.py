"""Monte Carlo g-computation of interventional mediation effects.

For every posterior draw the baseline distribution is resampled with a
Bayesian bootstrap, trajectories are simulated forward under each regime pair,
and the per-visit marginal hazard is the mean hazard over the trajectories
still at risk. Survival (and, with competing events, cumulative incidence)
curves follow from those hazards, and the effects are contrasts of curves.

Random numbers come from streams keyed by (seed, draw, visit, purpose, chunk),
so results do not depend on how draws are spread over workers.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import survival_data as sd
from .sequential_models import PosteriorModelBank

# contrast name -> (regime driving confounders and hazards, regime driving mediators)
CONTRASTS = {"z,z*": ("z", "z_star"), "z*,z*": ("z_star", "z_star"), "z,z": ("z", "z")}
STREAM_CONF, STREAM_MED, STREAM_EVENT, STREAM_COMPETING = 1, 2, 3, 5
STREAM_WEIGHTS, STREAM_INDEX = 98, 99
CHUNK = 65536


@dataclass(frozen=True)
class RegimePair:
    z: tuple[int, ...]
    z_star: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "z", tuple(int(v) for v in self.z))
        object.__setattr__(self, "z_star", tuple(int(v) for v in self.z_star))
        if len(self.z) != len(self.z_star):
            raise ValueError("both regimes need the same number of visits")
        if any(v not in (0, 1) for v in self.z + self.z_star):
            raise ValueError("regime entries must be 0 or 1")

    def get(self, name: str) -> tuple[int, ...]:
        return self.z if name == "z" else self.z_star

    @classmethod
    def parse(cls, z: str, z_star: str) -> "RegimePair":
        return cls(tuple(int(s) for s in z.split(",")), tuple(int(s) for s in z_star.split(",")))


@dataclass
class GcompConfig:
    c_star: int = 1000
    seed: int = 0
    level: float = 0.95
    n_draws: int | None = None  # leading posterior draws to use; None for all
    workers: int = 1
    bootstrap: str = "bayesian"  # or "empirical": every baseline equally often
    age_strata: list[tuple[float, float]] | None = None

    def __post_init__(self):
        if self.c_star < 1:
            raise ValueError("c_star must be at least 1")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        if self.bootstrap not in ("bayesian", "empirical"):
            raise ValueError(f"unknown bootstrap kind {self.bootstrap!r}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


@dataclass
class ContrastPosterior:
    """Per-draw marginal hazards for the three regime pairs.

    ``hazard[name]`` has shape (n_draws, J). With competing events
    ``hazard`` holds the main-event hazard and ``competing`` the marginal
    probability of a competing event in the interval given no event before.
    """

    mode: str
    visit_times: np.ndarray
    regimes: RegimePair
    hazard: dict[str, np.ndarray]
    hazard_se: dict[str, np.ndarray]
    competing: dict[str, np.ndarray] = field(default_factory=dict)
    competing_se: dict[str, np.ndarray] = field(default_factory=dict)
    n_baseline: int = 0

    @property
    def n_draws(self) -> int:
        return next(iter(self.hazard.values())).shape[0]

    def survival(self, name: str) -> np.ndarray:
        """Event-free probability at each visit, shape (n_draws, J)."""
        keep = 1.0 - self.hazard[name]
        if self.mode == "competing":
            keep = keep * (1.0 - self.competing[name])
        return np.cumprod(keep, axis=1)

    def cif(self, name: str, cause: int) -> np.ndarray:
        """Cumulative incidence of cause 1 (main) or 2 (competing)."""
        if self.mode != "competing":
            raise ValueError("cumulative incidence needs competing-event mode")
        s = self.survival(name)
        before = np.hstack([np.ones((s.shape[0], 1)), s[:, :-1]])
        p = self.hazard[name] if cause == 1 else self.competing[name]
        return np.cumsum(before * p, axis=1)


@dataclass
class EffectSummary:
    name: str
    samples: np.ndarray  # (n_draws, J)
    level: float

    @property
    def mean(self) -> np.ndarray:
        return np.nanmean(self.samples, axis=0)

    def interval(self) -> tuple[np.ndarray, np.ndarray]:
        a = (1.0 - self.level) / 2.0
        return (np.nanquantile(self.samples, a, axis=0),
                np.nanquantile(self.samples, 1.0 - a, axis=0))

    @property
    def lower(self) -> np.ndarray:
        return self.interval()[0]

    @property
    def upper(self) -> np.ndarray:
        return self.interval()[1]


# ---------------------------------------------------------------- engine


def _stream(seed: int, q: int, visit: int, purpose: int, chunk: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, q, visit, purpose, chunk]))


def bootstrap_weights(n: int, seed: int, q: int) -> np.ndarray:
    """Dirichlet(1, ..., 1) weights over ``n`` baseline records."""
    if n == 1:
        return np.ones(1)
    return _stream(seed, q, 0, STREAM_WEIGHTS, 0).dirichlet(np.ones(n))


def bayesian_bootstrap(baseline: np.ndarray, c_star: int, seed: int = 0, q: int = 0,
                       kind: str = "bayesian") -> np.ndarray:
    """Row indices of ``c_star`` baseline records for one posterior draw.

    The weights are drawn once per draw; every chunk of trajectories then
    samples indices from the same weights.
    """
    n = len(baseline)
    if n == 0:
        raise ValueError("no baseline records to resample")
    if kind == "empirical":
        return np.arange(c_star) % n
    w = bootstrap_weights(n, seed, q)
    out = np.empty(c_star, dtype=np.int64)
    for start in range(0, c_star, CHUNK):
        size = min(CHUNK, c_star - start)
        out[start:start + size] = _stream(seed, q, 0, STREAM_INDEX, start // CHUNK).choice(
            n, size=size, p=w)
    return out


class _Trajectories:
    """History blocks for one regime pair, laid out like the training tables."""

    def __init__(self, base: np.ndarray, n_visits: int, z_cov, z_med):
        m, nb = base.shape
        self.nb = nb
        width = nb + 3 * n_visits
        self.cov = np.zeros((m, width))  # exposure history as seen by L and Y
        self.med = np.zeros((m, width))  # exposure history as seen by M
        self.cov[:, :nb] = base
        self.med[:, :nb] = base
        for j, (a, b) in enumerate(zip(z_cov, z_med)):
            self.cov[:, nb + 3 * j] = a
            self.med[:, nb + 3 * j] = b
        self.alive = np.ones(m, dtype=bool)

    def set_value(self, visit: int, offset: int, rows, values):
        col = self.nb + 3 * (visit - 1) + offset
        self.cov[rows, col] = values
        self.med[rows, col] = values


def _simulate_chunk(bank: PosteriorModelBank, q: int, regimes: RegimePair, base: np.ndarray,
                    seed: int, chunk: int):
    """Sums needed for the at-risk means, per contrast and visit."""
    J = bank.n_visits
    nb = base.shape[1]
    m = base.shape[0]
    comp = bank.mode == "competing"
    uniforms = {}
    for j in range(1, J + 1):
        for purpose in (STREAM_EVENT, STREAM_COMPETING, STREAM_CONF, STREAM_MED):
            if purpose == STREAM_COMPETING and not comp:
                continue
            uniforms[j, purpose] = _stream(seed, q, j, purpose, chunk).random(m)
    main_kind = "hazard" if not comp else "hazard_main"
    out = {}
    for name, (zc, zm) in CONTRASTS.items():
        tr = _Trajectories(base, J, regimes.get(zc), regimes.get(zm))
        sums = np.zeros((J, 5))  # n at risk, mean p1, M2 p1, mean p2, M2 p2
        for j in range(1, J + 1):
            rows = np.flatnonzero(tr.alive)
            if len(rows) == 0:
                break
            width = sd.prefix_length(nb, "hazard", j)
            xh = np.column_stack([np.full(len(rows), bank.visit_times[j - 1]),
                                  tr.cov[rows, :width]])
            p1 = bank.hazard(q, j, xh, main_kind)
            sums[j - 1, 0] = len(rows)
            sums[j - 1, 1:3] = _moments(p1)
            if comp:
                p2_cond = bank.hazard(q, j, xh, "hazard_competing")
                p2 = p2_cond * (1.0 - p1)
                sums[j - 1, 3:5] = _moments(p2)
            if j == J:
                break
            event = uniforms[j, STREAM_EVENT][rows] < p1
            if comp:
                # the competing hazard applies only to those without a main event
                event |= uniforms[j, STREAM_COMPETING][rows] < p2_cond
            tr.alive[rows[event]] = False
            rows = rows[~event]
            width = sd.prefix_length(nb, "confounder", j)
            lv = bank.model("confounder", j).sample(q, tr.cov[rows, :width],
                                                    uniforms[j, STREAM_CONF][rows])
            tr.set_value(j, 1, rows, lv)
            width = sd.prefix_length(nb, "mediator", j)
            mv = bank.model("mediator", j).sample(q, tr.med[rows, :width],
                                                  uniforms[j, STREAM_MED][rows])
            tr.set_value(j, 2, rows, mv)
        out[name] = sums
    return out


def _moments(p: np.ndarray) -> tuple[float, float]:
    """Mean and centred sum of squares, shifted so constant inputs are exact."""
    c = p[0]
    mean = c + np.mean(p - c)
    return mean, float(np.sum((p - mean) ** 2))


def _combine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pool per-visit (n, mean, M2) blocks of two chunks."""
    out = a.copy()
    na, nb = a[:, 0], b[:, 0]
    n = na + nb
    safe = np.maximum(n, 1)
    out[:, 0] = n
    for k in (1, 3):
        delta = b[:, k] - a[:, k]
        out[:, k] = np.where(nb == 0, a[:, k], np.where(na == 0, b[:, k],
                                                        a[:, k] + delta * nb / safe))
        out[:, k + 1] = a[:, k + 1] + b[:, k + 1] + delta ** 2 * na * nb / safe
    return out


def _ratio(total: np.ndarray, mean: np.ndarray, m2: np.ndarray):
    """At-risk mean and its Monte Carlo standard error."""
    mean = np.where(total > 0, mean, 0.0)
    se = np.where(total > 0, np.sqrt(np.maximum(m2, 0.0)) / np.maximum(total, 1), 0.0)
    return mean, se


def _one_draw(bank: PosteriorModelBank, q: int, regimes: RegimePair, cfg: GcompConfig,
              baseline: np.ndarray):
    idx = bayesian_bootstrap(baseline, cfg.c_star, cfg.seed, q, cfg.bootstrap)
    totals = None
    for ci, start in enumerate(range(0, cfg.c_star, CHUNK)):
        part = _simulate_chunk(bank, q, regimes, baseline[idx[start:start + CHUNK]],
                               cfg.seed, ci)
        totals = part if totals is None else {k: _combine(totals[k], part[k]) for k in totals}
    res = {}
    for name, sums in totals.items():
        p1, se1 = _ratio(sums[:, 0], sums[:, 1], sums[:, 2])
        p2, se2 = _ratio(sums[:, 0], sums[:, 3], sums[:, 4])
        res[name] = (p1, se1, p2, se2)
    return res


def _check(bank: PosteriorModelBank, regimes: RegimePair):
    if len(regimes.z) != bank.n_visits - 1:
        raise ValueError(f"regimes need {bank.n_visits - 1} entries for {bank.n_visits} "
                         f"visits, got {len(regimes.z)}")


def _run(bank: PosteriorModelBank, regimes: RegimePair, cfg: GcompConfig,
         baseline: np.ndarray | None = None) -> ContrastPosterior:
    _check(bank, regimes)
    baseline = bank.baseline if baseline is None else np.asarray(baseline, dtype=float)
    n_draws = bank.n_draws if cfg.n_draws is None else min(cfg.n_draws, bank.n_draws)
    draws = range(n_draws)
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            per_draw = list(pool.map(lambda q: _one_draw(bank, q, regimes, cfg, baseline),
                                     draws))
    else:
        per_draw = [_one_draw(bank, q, regimes, cfg, baseline) for q in draws]
    stack = {name: [np.array([d[name][k] for d in per_draw]) for k in range(4)]
             for name in CONTRASTS}
    post = ContrastPosterior(mode=bank.mode, visit_times=bank.visit_times.copy(),
                             regimes=regimes,
                             hazard={n: s[0] for n, s in stack.items()},
                             hazard_se={n: s[1] for n, s in stack.items()},
                             n_baseline=len(baseline))
    if bank.mode == "competing":
        post.competing = {n: s[2] for n, s in stack.items()}
        post.competing_se = {n: s[3] for n, s in stack.items()}
    return post


def run_single(bank: PosteriorModelBank, regimes: RegimePair, cfg: GcompConfig | None = None,
               baseline=None) -> ContrastPosterior:
    """G-computation for a single event type."""
    if bank.mode != "single":
        raise ValueError("run_single needs a single-event bank")
    return _run(bank, regimes, cfg or GcompConfig(), baseline)


def run_competing(bank: PosteriorModelBank, regimes: RegimePair,
                  cfg: GcompConfig | None = None, baseline=None) -> ContrastPosterior:
    """G-computation with a main and a competing event."""
    if bank.mode != "competing":
        raise ValueError("run_competing needs a competing-event bank")
    return _run(bank, regimes, cfg or GcompConfig(), baseline)


def run(bank, regimes, cfg=None, baseline=None) -> ContrastPosterior:
    return _run(bank, regimes, cfg or GcompConfig(), baseline)


def effects(post: ContrastPosterior, level: float = 0.95) -> dict[str, EffectSummary]:
    """Direct, indirect and total effects per visit.

    Single events contrast survival curves; competing events contrast the
    cumulative incidence of each cause. The total effect equals the sum of
    the direct and indirect effect draw by draw.
    """
    if post.mode == "single":
        curves = {"": {n: post.survival(n) for n in CONTRASTS}}
    else:
        curves = {"_main": {n: post.cif(n, 1) for n in CONTRASTS},
                  "_competing": {n: post.cif(n, 2) for n in CONTRASTS}}
    out = {}
    for suffix, c in curves.items():
        ide = c["z,z*"] - c["z*,z*"]
        iie = c["z,z"] - c["z,z*"]
        out["IDE" + suffix] = EffectSummary("IDE" + suffix, ide, level)
        out["IIE" + suffix] = EffectSummary("IIE" + suffix, iie, level)
        out["TE" + suffix] = EffectSummary("TE" + suffix, ide + iie, level)
    return out


def parse_strata(text: str) -> list[tuple[float, float]]:
    """``"45-49,50-54"`` -> [(45, 50), (50, 55)]: whole-year bands, half-open."""
    out = []
    for part in text.split(","):
        lo, hi = part.strip().split("-")
        out.append((float(lo), float(hi) + 1.0))
    return out


def stratum_label(band: tuple[float, float]) -> str:
    lo, hi = band
    return f"{lo:g}-{hi - 1:g}"


def run_age_stratified(bank: PosteriorModelBank, regimes: RegimePair,
                       cfg: GcompConfig | None = None, strata=None,
                       age_column: str = "age") -> dict[str, ContrastPosterior]:
    """One g-computation per age band, each bootstrapping only its own subjects."""
    cfg = cfg or GcompConfig()
    strata = strata or cfg.age_strata
    if not strata:
        raise ValueError("no age strata given")
    if age_column not in bank.baseline_names:
        raise ValueError(f"bank baseline has no {age_column!r} column")
    age = bank.baseline[:, bank.baseline_names.index(age_column)]
    out = {}
    for band in strata:
        rows = (age >= band[0]) & (age < band[1])
        if not rows.any():
            raise ValueError(f"age stratum {stratum_label(band)} has no subjects")
        out[stratum_label(band)] = _run(bank, regimes, cfg, bank.baseline[rows])
    return out


# ---------------------------------------------------------------- output


def fmt2(x: float) -> str:
    """Two significant digits, as in the published tables."""
    if x == 0 or not np.isfinite(x):
        return f"{x:g}"
    return f"{x:.2g}"


def format_cell(mean: float, lo: float, hi: float) -> str:
    return f"{fmt2(mean)}({fmt2(lo)}, {fmt2(hi)})"


def effect_rows(summary: dict[str, EffectSummary], visit_times, stratum: str = "all",
                first_visit: int = 2):
    rows = []
    for name, eff in summary.items():
        lo, hi = eff.interval()
        for j in range(first_visit, len(visit_times) + 1):
            rows.append({"stratum": stratum, "estimand": name, "visit": j,
                         "time": float(visit_times[j - 1]), "mean": float(eff.mean[j - 1]),
                         "lower": float(lo[j - 1]), "upper": float(hi[j - 1])})
    return rows


def format_table(rows) -> str:
    """Human-readable table: one line per stratum and estimand, one column per visit."""
    visits = sorted({r["visit"] for r in rows})
    head = ["stratum", "estimand"] + [f"visit {j}" for j in visits]
    lines = {}
    for r in rows:
        key = (r["stratum"], r["estimand"])
        lines.setdefault(key, {})[r["visit"]] = format_cell(r["mean"], r["lower"], r["upper"])
    body = [[s, e] + [cells.get(j, "") for j in visits] for (s, e), cells in lines.items()]
    widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return "\n".join(fmt.format(*row) for row in [head] + body)


def write_effects(rows, path_csv, path_json=None, samples=None) -> None:
    """Full-precision CSV and JSON twin. ``samples`` maps (stratum, estimand)
    to an (n_draws, J) array and is written alongside when given."""
    path_csv = Path(path_csv)
    fields = ["stratum", "estimand", "visit", "time", "mean", "lower", "upper"]
    with open(path_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    if path_json is not None:
        Path(path_json).write_text(json.dumps({"effects": rows}, indent=2))
    if samples:
        with open(path_csv.with_name(path_csv.stem + "_samples.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stratum", "estimand", "draw", "visit", "value"])
            for (stratum, name), arr in samples.items():
                for q in range(arr.shape[0]):
                    for j in range(arr.shape[1]):
                        w.writerow([stratum, name, q, j + 1, repr(float(arr[q, j]))])
