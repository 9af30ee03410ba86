"""Per-visit conditional models for the confounder, mediator and hazard.

Every model answers two questions for a draw index ``q`` and a block of
histories ``x`` laid out as in :mod:`bartmed.survival_data`: the probability
of a binary outcome (or the mean and sd of a continuous one), and a sample
built from caller-supplied uniforms so that several regimes can share noise.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, ndtri

from . import survival_data as sd
from .bart import BartConfig, FittedBart, fit_continuous, fit_probit, load_fit, save_fit

ROLE_CODES = {"confounder": 1, "mediator": 2, "hazard": 3, "hazard_main": 4,
              "hazard_competing": 5, "exposure": 6}
ROLE_LABELS = {"confounder": "Confounder", "mediator": "Mediator", "hazard": "Hazard",
               "hazard_main": "HazardMain", "hazard_competing": "HazardCompeting",
               "exposure": "Exposure"}
BANK_FORMAT = "bartmed-bank"


@dataclass(frozen=True, order=True)
class ModelRole:
    kind: str
    visit: int  # 0 marks a hazard pooled over visits

    def __post_init__(self):
        if self.kind not in ROLE_CODES:
            raise ValueError(f"unknown model role {self.kind!r}")

    def __str__(self) -> str:
        return f"{ROLE_LABELS[self.kind]}({self.visit or 'pooled'})"

    @property
    def slug(self) -> str:
        return f"{self.kind}_{self.visit}"


class EmptyTableError(ValueError):
    def __init__(self, role: ModelRole):
        self.role = role
        super().__init__(f"no training rows for {role}")


# ---------------------------------------------------------------- models


class ConditionalModel:
    """Base class. Subclasses set ``family`` and implement ``probability`` or
    ``mean``/``sd``."""

    family = "binary"
    n_draws = 1

    def probability(self, q: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def mean(self, q: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sd(self, q: int) -> float:
        raise NotImplementedError

    def sample(self, q: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Draw from the model using uniforms ``u`` (one per row)."""
        if self.family == "binary":
            return (u < self.probability(q, x)).astype(np.float64)
        return self.mean(q, x) + self.sd(q) * ndtri(u)

    def draw_value(self, q: int, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.atleast_2d(x)
        return self.sample(q, x, rng.random(x.shape[0]))


class BartModel(ConditionalModel):
    def __init__(self, fit: FittedBart):
        self.fit = fit
        self.family = "binary" if fit.kind == "probit" else "continuous"
        self.n_draws = fit.n_draws

    def probability(self, q, x):
        return self.fit.predict(x, q)

    def mean(self, q, x):
        return self.fit.predict(x, q)

    def sd(self, q):
        return self.fit.sigma_draw(q)


class ConstantModel(ConditionalModel):
    """Binary outcome with a fixed probability, or a fixed Gaussian."""

    def __init__(self, value: float, family: str = "binary", sd: float = 1.0):
        self.value = float(value)
        self.family = family
        self._sd = float(sd)

    def probability(self, q, x):
        return np.full(np.atleast_2d(x).shape[0], self.value)

    mean = probability

    def sd(self, q):
        return self._sd

    def to_dict(self):
        return {"type": "constant", "value": self.value, "family": self.family,
                "sd": self._sd}


class LinearModel(ConditionalModel):
    """Logistic (binary) or Gaussian linear model in the history columns.

    ``skip`` leading columns are ignored, for instance the visit time of a
    per-visit hazard. ``extra`` adds a fixed function of the history to the
    linear predictor.
    """

    def __init__(self, intercept: float, coef, family: str = "binary", sd: float = 1.0,
                 skip: int = 0, extra=None):
        self.intercept = float(intercept)
        self.coef = np.asarray(coef, dtype=np.float64)
        self.family = family
        self._sd = float(sd)
        self.skip = int(skip)
        self.extra = extra

    def linear_predictor(self, x):
        x = np.atleast_2d(x)
        eta = self.intercept + x[:, self.skip:self.skip + len(self.coef)] @ self.coef
        if self.extra is not None:
            eta = eta + self.extra(x)
        return eta

    def probability(self, q, x):
        return expit(self.linear_predictor(x))

    def mean(self, q, x):
        return self.linear_predictor(x)

    def sd(self, q):
        return self._sd

    def to_dict(self):
        if self.extra is not None:
            raise ValueError("cannot serialise a linear model with an extra term")
        return {"type": "linear", "intercept": self.intercept, "coef": self.coef.tolist(),
                "family": self.family, "sd": self._sd, "skip": self.skip}


class FunctionModel(ConditionalModel):
    """Wrap a plain function ``fn(x) -> probability or mean``."""

    def __init__(self, fn, family: str = "binary", sd: float = 1.0):
        self.fn = fn
        self.family = family
        self._sd = float(sd)

    def probability(self, q, x):
        return np.asarray(self.fn(np.atleast_2d(x)), dtype=np.float64)

    mean = probability

    def sd(self, q):
        return self._sd


class PooledHazard(ConditionalModel):
    """View a pooled hazard model as a per-visit one by zero-padding histories."""

    def __init__(self, model: ConditionalModel, width: int):
        self.model = model
        self.width = width
        self.family = model.family
        self.n_draws = model.n_draws

    def probability(self, q, x):
        return self.model.probability(q, sd.pad_to_pooled(np.atleast_2d(x), self.width))


def model_from_dict(d: dict) -> ConditionalModel:
    if d["type"] == "constant":
        return ConstantModel(d["value"], d["family"], d["sd"])
    if d["type"] == "linear":
        return LinearModel(d["intercept"], d["coef"], d["family"], d["sd"], d["skip"])
    raise ValueError(f"unknown model type {d['type']!r}")


# ---------------------------------------------------------------- bank


@dataclass
class BankConfig:
    bart: BartConfig = field(default_factory=lambda: BartConfig(n_burn=1000, n_keep=1000))
    pooled_hazard: bool = False
    l_type: str = "auto"
    m_type: str = "auto"
    seed: int = 0
    workers: int = 1
    roles: str = "all"  # "all" or "gcomp" (skips covariate models at the last visit)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("workers")
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class PosteriorModelBank:
    mode: str
    visit_times: np.ndarray
    baseline_names: list[str]
    baseline: np.ndarray
    models: dict[ModelRole, ConditionalModel]
    variable_types: dict[str, str] = field(default_factory=dict)
    pooled_hazard: bool = False
    config: dict = field(default_factory=dict)

    @property
    def n_visits(self) -> int:
        return len(self.visit_times)

    @property
    def n_draws(self) -> int:
        return min(getattr(m, "n_draws", 1) for m in self.models.values())

    def model(self, kind: str, visit: int) -> ConditionalModel:
        if self.pooled_hazard and kind.startswith("hazard"):
            width = 1 + sd.prefix_length(len(self.baseline_names), kind, self.n_visits)
            return PooledHazard(self.models[ModelRole(kind, 0)], width)
        try:
            return self.models[ModelRole(kind, visit)]
        except KeyError:
            raise KeyError(f"bank has no model for {ModelRole(kind, visit)}") from None

    def draw_confounder(self, q, visit, x, rng):
        return self.model("confounder", visit).draw_value(q, x, rng)

    def draw_mediator(self, q, visit, x, rng):
        return self.model("mediator", visit).draw_value(q, x, rng)

    def hazard(self, q, visit, x, kind: str = "hazard"):
        return self.model(kind, visit).probability(q, np.atleast_2d(x))

    def hazard_kinds(self) -> tuple[str, ...]:
        return ("hazard",) if self.mode == "single" else ("hazard_main", "hazard_competing")


def detect_family(values: np.ndarray, override: str = "auto") -> str:
    if override in ("binary", "continuous"):
        return override
    if override != "auto":
        raise ValueError(f"variable type must be auto, binary or continuous, not {override!r}")
    v = values[~np.isnan(values)]
    return "binary" if np.all((v == 0) | (v == 1)) else "continuous"


def role_seed(seed: int, role: ModelRole) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, ROLE_CODES[role.kind],
                                                         role.visit]))


def training_tasks(dataset: sd.LongitudinalDataset, mode: str, config: BankConfig):
    """(role, table, family) for every model the bank needs."""
    if mode != dataset.mode:
        raise ValueError(f"bank mode {mode!r} does not match dataset mode {dataset.mode!r}")
    J = dataset.n_visits
    l_fam = detect_family(dataset.l, config.l_type)
    m_fam = detect_family(dataset.m, config.m_type)
    conf, med = sd.build_covariate_tables(dataset)
    last = J if config.roles == "all" else J - 1
    tasks = []
    for j in range(1, last + 1):
        tasks.append((ModelRole("confounder", j), conf[j], l_fam))
        tasks.append((ModelRole("mediator", j), med[j], m_fam))
    if mode == "single":
        hz = {"hazard": sd.build_hazard_table(dataset, pooled=config.pooled_hazard)}
    else:
        main, comp = sd.build_competing_tables(dataset, pooled=config.pooled_hazard)
        hz = {"hazard_main": main, "hazard_competing": comp}
    for kind, tables in hz.items():
        if config.pooled_hazard:
            tasks.append((ModelRole(kind, 0), tables, "binary"))
        else:
            for j in range(1, J + 1):
                tasks.append((ModelRole(kind, j), tables[j], "binary"))
    return tasks, {"l": l_fam, "m": m_fam}


def _fit_one(task, config: BankConfig) -> ConditionalModel:
    role, table, family = task
    if len(table) == 0:
        raise EmptyTableError(role)
    rng = role_seed(config.seed, role)
    fitter = fit_probit if family == "binary" else fit_continuous
    return BartModel(fitter(table.x, table.y, config.bart, rng=rng, names=table.columns))


def fit_bank(dataset: sd.LongitudinalDataset, mode: str | None = None,
             config: BankConfig | None = None) -> PosteriorModelBank:
    """Fit every per-visit BART model. Results do not depend on ``workers``."""
    config = config or BankConfig()
    mode = mode or dataset.mode
    sd.require_valid(dataset)
    tasks, families = training_tasks(dataset, mode, config)
    for role, table, _ in tasks:
        if len(table) == 0:
            raise EmptyTableError(role)
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            fitted = list(pool.map(lambda t: _fit_one(t, config), tasks))
    else:
        fitted = [_fit_one(t, config) for t in tasks]
    models = {role: m for (role, _, _), m in zip(tasks, fitted)}
    meta = config.to_dict()
    meta["config_hash"] = config.digest()
    meta["categories"] = dict(dataset.categories)
    return PosteriorModelBank(mode=mode, visit_times=dataset.visit_times.copy(),
                              baseline_names=list(dataset.baseline_names),
                              baseline=dataset.baseline.copy(), models=models,
                              variable_types=families, pooled_hazard=config.pooled_hazard,
                              config=meta)


def exact_bank(models: dict, visit_times, baseline, baseline_names, mode="single",
               variable_types=None) -> PosteriorModelBank:
    """Bank of user-supplied models, keyed by ``ModelRole`` or ``(kind, visit)``."""
    keyed = {(k if isinstance(k, ModelRole) else ModelRole(*k)): m for k, m in models.items()}
    return PosteriorModelBank(mode=mode, visit_times=np.asarray(visit_times, dtype=float),
                              baseline_names=list(baseline_names),
                              baseline=np.asarray(baseline, dtype=float).reshape(
                                  -1, len(baseline_names)),
                              models=keyed,
                              variable_types=variable_types or {})


# ---------------------------------------------------------------- storage


def save_bank(bank: PosteriorModelBank, directory) -> Path:
    """Write a manifest plus one file per model into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for role in sorted(bank.models):
        model = bank.models[role]
        if isinstance(model, BartModel):
            name = f"{role.slug}.npz"
            save_fit(model.fit, directory / name)
            entries.append({"kind": role.kind, "visit": role.visit, "file": name,
                            "type": "bart"})
        else:
            entries.append({"kind": role.kind, "visit": role.visit,
                            "model": model.to_dict(), "type": "exact"})
    np.save(directory / "baseline.npy", bank.baseline)
    manifest = {
        "format": BANK_FORMAT,
        "version": 1,
        "mode": bank.mode,
        "visit_times": [float(t) for t in bank.visit_times],
        "baseline_names": bank.baseline_names,
        "variable_types": bank.variable_types,
        "pooled_hazard": bank.pooled_hazard,
        "config": bank.config,
        "models": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_bank(directory) -> PosteriorModelBank:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != BANK_FORMAT:
        raise ValueError(f"{directory} does not hold a model bank")
    models = {}
    for e in manifest["models"]:
        role = ModelRole(e["kind"], e["visit"])
        if e["type"] == "bart":
            models[role] = BartModel(load_fit(directory / e["file"]))
        else:
            models[role] = model_from_dict(e["model"])
    return PosteriorModelBank(mode=manifest["mode"],
                              visit_times=np.array(manifest["visit_times"]),
                              baseline_names=manifest["baseline_names"],
                              baseline=np.load(directory / "baseline.npy"), models=models,
                              variable_types=manifest["variable_types"],
                              pooled_hazard=manifest["pooled_hazard"],
                              config=manifest["config"])
