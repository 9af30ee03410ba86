"""Impute cumulative mean blood pressure before enrollment from an external cohort.

A linear mixed model with a quadratic age trend and subject-level random
intercept and slope is fitted to the external cohort by Gibbs sampling. Each
target subject borrows the random effects of a donor with the same race and
sex, and the fitted trajectory is integrated in closed form over the
20 years before the subject's baseline age.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats

from .survival_data import LongitudinalDataset

FIXED_NAMES = ("intercept", "race", "sex", "bmi", "age", "age^2", "race:age", "sex:age",
               "bmi:age")
RANDOM_NAMES = ("intercept", "age")
WINDOW = 20.0


class EmptyDonorPool(LookupError):
    def __init__(self, race, sex, subject=None):
        self.cell = (race, sex)
        self.subject = subject
        who = f" for subject {subject}" if subject is not None else ""
        super().__init__(f"empty donor pool for race={race:g}, sex={sex:g}{who}")


@dataclass
class ExternalCohort:
    """Long-format repeated measurements: one row per subject and age."""

    ids: np.ndarray
    race: np.ndarray
    sex: np.ndarray
    bmi: np.ndarray
    age: np.ndarray
    mbp: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids).astype(str)
        for name in ("race", "sex", "bmi", "age", "mbp"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
            if getattr(self, name).shape != self.ids.shape:
                raise ValueError(f"column {name!r} has the wrong length")
        if not all(np.isfinite(getattr(self, c)).all()
                   for c in ("race", "sex", "bmi", "age", "mbp")):
            raise ValueError("external cohort contains non-finite values")
        if np.any(self.age <= 0):
            raise ValueError("external cohort ages must be positive")

    @classmethod
    def read_csv(cls, path) -> "ExternalCohort":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: no rows")
        missing = {"id", "race", "sex", "bmi", "age", "mbp"} - set(rows[0])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return cls(*(np.array([r[k] for r in rows]) for k in ("id",)),
                   *(np.array([float(r[k]) for r in rows])
                     for k in ("race", "sex", "bmi", "age", "mbp")))

    def subjects(self):
        """Unique ids with their (race, sex, bmi), in first-seen order."""
        _, first = np.unique(self.ids, return_index=True)
        first = np.sort(first)
        return self.ids[first], self.race[first], self.sex[first], self.bmi[first]


def fixed_design(race, sex, bmi, age) -> np.ndarray:
    race, sex, bmi, age = np.broadcast_arrays(*map(np.asarray, (race, sex, bmi, age)))
    return np.column_stack([np.ones(age.shape), race, sex, bmi, age, age**2,
                            race * age, sex * age, bmi * age]).astype(np.float64)


def random_design(age) -> np.ndarray:
    age = np.asarray(age, dtype=np.float64)
    return np.column_stack([np.ones(age.shape), age])


@dataclass
class LmmConfig:
    n_burn: int = 500
    n_keep: int = 1000
    seed: int = 0
    beta_prior_sd: float = 10.0  # on the standardised scale
    sigma_prior: tuple[float, float] = (0.01, 0.01)
    re_prior_df: float = 4.0
    re_prior_scale: float = 0.1
    keep_random_draws: bool = False


@dataclass
class LmmFit:
    beta: np.ndarray
    beta_sd: np.ndarray
    beta_draws: np.ndarray
    sigma2: float
    sigma2_draws: np.ndarray
    re_cov: np.ndarray
    subject_ids: np.ndarray
    subject_race: np.ndarray
    subject_sex: np.ndarray
    random_effects: np.ndarray  # posterior means, (n_subjects, 2)
    random_draws: np.ndarray | None = None
    age_range: tuple[float, float] = (0.0, 0.0)

    def mean_trajectory(self, race, sex, bmi, age, b=(0.0, 0.0)) -> np.ndarray:
        return fixed_design(race, sex, bmi, age) @ self.beta + random_design(age) @ np.asarray(b)

    def predictive_interval(self, subject: str, race, sex, bmi, age, level=0.95, rng=None):
        """Posterior predictive interval for a new measurement of a cohort subject."""
        if self.random_draws is None:
            raise ValueError("refit with keep_random_draws=True for predictive intervals")
        rng = rng or np.random.default_rng(0)
        i = int(np.flatnonzero(self.subject_ids == subject)[0])
        x = fixed_design(race, sex, bmi, age)[0]
        z = random_design(age)[0]
        mean = self.beta_draws @ x + self.random_draws[:, i, :] @ z
        sims = mean + np.sqrt(self.sigma2_draws) * rng.standard_normal(len(mean))
        a = (1 - level) / 2
        return float(np.quantile(sims, a)), float(np.quantile(sims, 1 - a))


def _back_transform(ca, sa, cb, sb):
    """Matrix mapping standardised-scale fixed effects to raw-scale ones."""
    rng = np.random.default_rng(12345)
    n = 60
    race = rng.integers(0, 2, n).astype(float)
    sex = rng.integers(0, 2, n).astype(float)
    bmi = rng.uniform(15, 45, n)
    age = rng.uniform(20, 80, n)
    raw = fixed_design(race, sex, bmi, age)
    std = fixed_design(race, sex, (bmi - cb) / sb, (age - ca) / sa)
    return np.linalg.lstsq(raw, std, rcond=None)[0]


def fit_lmm(cohort: ExternalCohort, config: LmmConfig | None = None) -> LmmFit:
    """Gibbs sampler with normal, inverse-Wishart and inverse-gamma priors."""
    cfg = config or LmmConfig()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4242]))
    ids, inverse = np.unique(cohort.ids, return_inverse=True)
    n_sub = len(ids)
    ca, sa = cohort.age.mean(), cohort.age.std() or 1.0
    cb, sb = cohort.bmi.mean(), cohort.bmi.std() or 1.0
    cy, sy = cohort.mbp.mean(), cohort.mbp.std() or 1.0
    a_s = (cohort.age - ca) / sa
    X = fixed_design(cohort.race, cohort.sex, (cohort.bmi - cb) / sb, a_s)
    Z = random_design(a_s)
    y = (cohort.mbp - cy) / sy
    n, p = X.shape
    if n_sub < 2:
        raise ValueError("need at least two subjects")
    if np.bincount(inverse).max() < 2:
        raise ValueError("no subject has repeated measures; random slopes are not identified")

    xtx = X.T @ X
    prior_prec = np.eye(p) / cfg.beta_prior_sd**2
    # per-subject Z'Z entries
    zz00 = np.bincount(inverse, minlength=n_sub).astype(float)
    zz01 = np.bincount(inverse, weights=a_s, minlength=n_sub)
    zz11 = np.bincount(inverse, weights=a_s * a_s, minlength=n_sub)
    a0, b0 = cfg.sigma_prior
    s0 = np.eye(2) * cfg.re_prior_scale

    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    b = np.zeros((n_sub, 2))
    D = np.eye(2) * 0.5
    sigma2 = 0.5
    keep_beta, keep_s2, keep_D, keep_b = [], [], [], []
    b_sum = np.zeros((n_sub, 2))
    for it in range(cfg.n_burn + cfg.n_keep):
        # fixed effects
        r = y - (b[inverse, 0] + b[inverse, 1] * a_s)
        prec = xtx / sigma2 + prior_prec
        L = np.linalg.cholesky(prec)
        mean = np.linalg.solve(prec, X.T @ r / sigma2)
        beta = mean + np.linalg.solve(L.T, rng.standard_normal(p))
        # random effects, one 2x2 update per subject
        r = y - X @ beta
        zr0 = np.bincount(inverse, weights=r, minlength=n_sub)
        zr1 = np.bincount(inverse, weights=r * a_s, minlength=n_sub)
        Dinv = np.linalg.inv(D)
        p00 = zz00 / sigma2 + Dinv[0, 0]
        p01 = zz01 / sigma2 + Dinv[0, 1]
        p11 = zz11 / sigma2 + Dinv[1, 1]
        det = p00 * p11 - p01 * p01
        c00, c01, c11 = p11 / det, -p01 / det, p00 / det
        m0 = (c00 * zr0 + c01 * zr1) / sigma2
        m1 = (c01 * zr0 + c11 * zr1) / sigma2
        l00 = np.sqrt(c00)
        l10 = c01 / l00
        l11 = np.sqrt(np.maximum(c11 - l10 * l10, 0.0))
        e = rng.standard_normal((n_sub, 2))
        b[:, 0] = m0 + l00 * e[:, 0]
        b[:, 1] = m1 + l10 * e[:, 0] + l11 * e[:, 1]
        # random-effect covariance
        D = stats.invwishart.rvs(df=cfg.re_prior_df + n_sub, scale=s0 + b.T @ b,
                                 random_state=rng)
        # residual variance
        resid = r - (b[inverse, 0] + b[inverse, 1] * a_s)
        sigma2 = (b0 + 0.5 * resid @ resid) / rng.gamma(a0 + 0.5 * n)
        if it >= cfg.n_burn:
            keep_beta.append(beta.copy())
            keep_s2.append(sigma2)
            keep_D.append(D.copy())
            b_sum += b
            if cfg.keep_random_draws:
                keep_b.append(b.copy())

    A = _back_transform(ca, sa, cb, sb)
    e0 = np.zeros(p)
    e0[0] = 1.0
    beta_raw = np.array([sy * A @ bs + cy * e0 for bs in keep_beta])
    Ar = np.array([[1.0, -ca / sa], [0.0, 1.0 / sa]])
    D_raw = np.array([sy**2 * Ar @ d @ Ar.T for d in keep_D])
    b_mean = sy * (b_sum / cfg.n_keep) @ Ar.T
    draws = None
    if cfg.keep_random_draws:
        draws = sy * np.einsum("qik,jk->qij", np.array(keep_b), Ar)
    first = np.array([np.flatnonzero(inverse == k)[0] for k in range(n_sub)])
    return LmmFit(beta=beta_raw.mean(axis=0), beta_sd=beta_raw.std(axis=0, ddof=1),
                  beta_draws=beta_raw, sigma2=float(sy**2 * np.mean(keep_s2)),
                  sigma2_draws=sy**2 * np.array(keep_s2), re_cov=D_raw.mean(axis=0),
                  subject_ids=ids, subject_race=cohort.race[first],
                  subject_sex=cohort.sex[first], random_effects=b_mean,
                  random_draws=draws,
                  age_range=(float(cohort.age.min()), float(cohort.age.max())))


def donor_pool(fit: LmmFit, race: float, sex: float, fallback: bool = False):
    """Indices of eligible donors and a note when the match had to be relaxed."""
    exact = np.flatnonzero((fit.subject_race == race) & (fit.subject_sex == sex))
    if len(exact) or not fallback:
        return exact, None
    by_race = np.flatnonzero(fit.subject_race == race)
    if len(by_race):
        return by_race, "matched on race only"
    return np.arange(len(fit.subject_ids)), "matched on neither race nor sex"


class DonorDraw(NamedTuple):
    donor: str
    index: int
    b0: float
    b1: float
    pool_size: int
    note: str | None


def match_and_sample(fit: LmmFit, race: float, sex: float, rng: np.random.Generator,
                     fallback: bool = False, subject=None) -> DonorDraw:
    """Random effects of a donor drawn uniformly from the same (race, sex) cell."""
    pool, note = donor_pool(fit, race, sex, fallback)
    if len(pool) == 0:
        raise EmptyDonorPool(race, sex, subject)
    k = int(pool[rng.integers(0, len(pool))])
    b0, b1 = fit.random_effects[k]
    return DonorDraw(str(fit.subject_ids[k]), k, float(b0), float(b1), len(pool), note)


def cmbp_integral(beta, b, race, sex, bmi, t0, t1):
    """Integral of the subject's mean trajectory over ages ``[t0, t1]``."""
    beta = np.asarray(beta, dtype=np.float64)
    b0, b1 = b
    vals = [beta, b0, b1, race, sex, bmi, t0, t1]
    if not all(np.all(np.isfinite(v)) for v in vals):
        raise ValueError("cmbp_integral: non-finite input")
    if np.any(np.asarray(t1) <= np.asarray(t0)):
        raise ValueError("cmbp_integral: need t1 > t0")
    level = beta[0] + beta[1] * race + beta[2] * sex + beta[3] * bmi + b0
    slope = beta[4] + beta[6] * race + beta[7] * sex + beta[8] * bmi + b1
    return (level * (t1 - t0) + slope * (t1**2 - t0**2) / 2.0
            + beta[5] * (t1**3 - t0**3) / 3.0)


@dataclass
class CmbpAssignment:
    subject: str
    donor: str
    pool_size: int
    random_effects: tuple[float, float]
    cmbp: float
    note: str | None = None
    extrapolated: bool = False


@dataclass
class AugmentResult:
    dataset: LongitudinalDataset
    assignments: list[CmbpAssignment] = field(default_factory=list)

    @property
    def relaxed(self) -> list[CmbpAssignment]:
        return [a for a in self.assignments if a.note]


def augment(dataset: LongitudinalDataset, fit: LmmFit, seed: int = 0,
            fallback: bool = True, window: float = WINDOW,
            columns=("race", "sex", "bmi", "age"), draw: int | None = None) -> AugmentResult:
    """Add a ``cmbp`` baseline column integrated over ``[age - window, age]``.

    ``draw=None`` uses posterior means. An integer selects one posterior draw of
    the fixed and random effects, for sensitivity runs over several draws.
    """
    for name in columns:
        if name not in dataset.baseline_names:
            raise ValueError(f"target dataset needs a baseline {name!r} column")
    if draw is None:
        beta, effects = fit.beta, fit.random_effects
    else:
        if fit.random_draws is None:
            raise ValueError("posterior-draw imputation needs keep_random_draws=True")
        beta, effects = fit.beta_draws[draw], fit.random_draws[draw]
    race, sex, bmi, age = (dataset.column(c) for c in columns)
    out, assignments, errors = np.empty(dataset.n), [], []
    for i in range(dataset.n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3301, i]))
        try:
            pick = match_and_sample(fit, race[i], sex[i], rng, fallback,
                                    subject=dataset.ids[i])
        except EmptyDonorPool as exc:
            errors.append(exc)
            continue
        b = tuple(float(v) for v in effects[pick.index])
        t0, t1 = age[i] - window, age[i]
        out[i] = cmbp_integral(beta, b, race[i], sex[i], bmi[i], t0, t1)
        assignments.append(CmbpAssignment(str(dataset.ids[i]), pick.donor, pick.pool_size,
                                          b, float(out[i]), pick.note,
                                          bool(t0 < fit.age_range[0])))
    if errors:
        ids = ", ".join(str(e.subject) for e in errors[:10])
        raise EmptyDonorPool(*errors[0].cell, subject=ids)
    n_out = sum(a.extrapolated for a in assignments)
    if n_out:
        warnings.warn(f"{n_out} subjects have integration windows starting below the "
                      f"youngest external-cohort age {fit.age_range[0]:g}", stacklevel=2)
    return AugmentResult(dataset.with_baseline("cmbp", out), assignments)
