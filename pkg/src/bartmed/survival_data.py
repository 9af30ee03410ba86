"""Longitudinal cohort data and the person-visit tables built from it.

Visits happen at times ``t_1 < ... < t_J`` and interval ``j`` is
``(t_{j-1}, t_j]`` with ``t_0 = 0``. Each subject carries baseline
covariates, an exposure ``z``, a time-varying confounder ``l`` and a mediator
``m`` per visit, and an event time with an event indicator and, for
competing events, a cause code (1 main, 2 competing).

Model covariates follow temporal order: baseline columns first, then
``z_1, l_1, m_1, z_2, ...``. Every conditional model uses a prefix of that
sequence, and hazard models prepend the visit time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FAMILIES = ("z", "l", "m")
MISSING = {"", "na", "nan", "none", "null", "."}


class DataValidationError(ValueError):
    def __init__(self, report: "ValidationReport"):
        self.report = report
        super().__init__(report.summary())


@dataclass(frozen=True)
class Violation:
    subject: str
    kind: str
    detail: str

    def __str__(self) -> str:
        return f"subject {self.subject}: {self.kind}: {self.detail}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, subject, kind: str, detail: str) -> None:
        self.violations.append(Violation(str(subject), kind, detail))

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def summary(self, limit: int = 20) -> str:
        if self.ok:
            return "dataset is valid"
        lines = [f"{len(self.violations)} validation problem(s):"]
        lines += [f"  {v}" for v in self.violations[:limit]]
        if len(self.violations) > limit:
            lines.append(f"  ... and {len(self.violations) - limit} more")
        return "\n".join(lines)


@dataclass(frozen=True)
class BaselineCovariates:
    """Time-invariant covariates of one subject, keyed by column name."""

    values: dict[str, float]

    @property
    def age(self) -> float:
        return self.values["age"]

    @property
    def cmbp(self) -> float | None:
        return self.values.get("cmbp")


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    baseline: BaselineCovariates
    z: np.ndarray
    l: np.ndarray
    m: np.ndarray
    time: float
    delta: int
    cause: int


@dataclass
class LongitudinalDataset:
    """Column-oriented cohort. Missing per-visit values are NaN."""

    ids: np.ndarray
    baseline: np.ndarray
    baseline_names: list[str]
    z: np.ndarray
    l: np.ndarray
    m: np.ndarray
    time: np.ndarray
    delta: np.ndarray
    cause: np.ndarray
    visit_times: np.ndarray
    mode: str = "single"
    categories: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids).astype(str)
        self.baseline = np.asarray(self.baseline, dtype=np.float64).reshape(len(self.ids), -1)
        for name in FAMILIES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64)
                    .reshape(len(self.ids), -1))
        self.time = np.asarray(self.time, dtype=np.float64)
        self.delta = np.asarray(self.delta, dtype=np.int64)
        self.cause = np.asarray(self.cause, dtype=np.int64)
        self.visit_times = np.asarray(self.visit_times, dtype=np.float64)
        if self.mode not in ("single", "competing"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def n_visits(self) -> int:
        return len(self.visit_times)

    def column(self, name: str) -> np.ndarray:
        return self.baseline[:, self.baseline_names.index(name)]

    def subject(self, i: int) -> SubjectRecord:
        base = BaselineCovariates(dict(zip(self.baseline_names, map(float, self.baseline[i]))))
        return SubjectRecord(self.ids[i], base, self.z[i].copy(), self.l[i].copy(),
                             self.m[i].copy(), float(self.time[i]), int(self.delta[i]),
                             int(self.cause[i]))

    def subjects(self):
        return (self.subject(i) for i in range(self.n))

    def take(self, rows) -> "LongitudinalDataset":
        rows = np.asarray(rows)
        return replace(self, ids=self.ids[rows], baseline=self.baseline[rows],
                       z=self.z[rows], l=self.l[rows], m=self.m[rows],
                       time=self.time[rows], delta=self.delta[rows], cause=self.cause[rows])

    def with_baseline(self, name: str, values) -> "LongitudinalDataset":
        values = np.asarray(values, dtype=np.float64).reshape(-1, 1)
        if name in self.baseline_names:
            base = self.baseline.copy()
            base[:, self.baseline_names.index(name)] = values[:, 0]
            return replace(self, baseline=base)
        return replace(self, baseline=np.hstack([self.baseline, values]),
                       baseline_names=self.baseline_names + [name])

    def subset(self, expr: str) -> "LongitudinalDataset":
        """Rows whose baseline column matches ``name=value`` (label or number)."""
        return self.take(subset_rows(self.baseline, self.baseline_names, self.categories, expr))


def subset_rows(baseline, names, categories, expr: str) -> np.ndarray:
    """Indices of rows whose baseline column ``name`` equals ``value``."""
    if "=" not in expr:
        raise ValueError(f"subset must look like name=value, got {expr!r}")
    name, value = (s.strip() for s in expr.split("=", 1))
    if name not in names:
        raise ValueError(f"unknown baseline column {name!r}")
    col = np.asarray(baseline)[:, list(names).index(name)]
    labels = (categories or {}).get(name)
    if labels is not None and value in labels:
        target = float(labels.index(value))
    else:
        try:
            target = float(value)
        except ValueError:
            raise ValueError(f"{value!r} is not a value of {name!r}") from None
    return np.flatnonzero(col == target)


# ---------------------------------------------------------------- layout


def sequence_names(baseline_names, n_visits: int) -> list[str]:
    names = list(baseline_names)
    for j in range(1, n_visits + 1):
        names += [f"z_{j}", f"l_{j}", f"m_{j}"]
    return names


def prefix_length(n_baseline: int, kind: str, visit: int) -> int:
    """Number of leading sequence entries a model of ``kind`` at ``visit`` uses."""
    done = n_baseline + 3 * (visit - 1)
    if kind in ("hazard", "hazard_main", "hazard_competing", "exposure"):
        return done
    if kind == "confounder":
        return done + 1
    if kind == "mediator":
        return done + 2
    raise ValueError(f"unknown model kind {kind!r}")


def has_time_column(kind: str) -> bool:
    return kind.startswith("hazard")


def model_columns(baseline_names, kind: str, visit: int) -> list[str]:
    seq = sequence_names(baseline_names, visit)
    cols = seq[:prefix_length(len(baseline_names), kind, visit)]
    return (["t"] + cols) if has_time_column(kind) else cols


def sequence_matrix(baseline, z, l, m) -> np.ndarray:
    """Interleave baseline and per-visit histories into one design block."""
    n, n_visits = z.shape
    parts = [baseline]
    for j in range(n_visits):
        parts += [z[:, j:j + 1], l[:, j:j + 1], m[:, j:j + 1]]
    return np.hstack(parts) if parts else np.empty((n, 0))


# ---------------------------------------------------------------- tables


@dataclass
class PersonVisitTable:
    kind: str
    visit: int | None
    ids: np.ndarray
    visits: np.ndarray
    y: np.ndarray
    x: np.ndarray
    columns: list[str]

    def __len__(self) -> int:
        return len(self.y)

    def rows(self, i: int) -> tuple:
        return (self.ids[i], int(self.visits[i]), float(self.y[i]))


def event_interval(dataset: LongitudinalDataset) -> np.ndarray:
    """1-based interval holding each subject's event or censoring time.

    Times beyond the last visit map to ``J + 1``.
    """
    return np.searchsorted(dataset.visit_times, dataset.time, side="left") + 1


def complete_visits(dataset: LongitudinalDataset) -> np.ndarray:
    """Number of leading visits with all of z, l and m recorded."""
    ok = ~(np.isnan(dataset.z) | np.isnan(dataset.l) | np.isnan(dataset.m))
    first_gap = np.where(ok.all(axis=1), dataset.n_visits, np.argmin(ok, axis=1))
    return first_gap


def _order(dataset: LongitudinalDataset) -> np.ndarray:
    return np.argsort(dataset.ids, kind="stable")


def _hazard_rows(dataset: LongitudinalDataset):
    """Per subject: number of hazard rows and whether the last one is an event."""
    k = event_interval(dataset)
    n_rows = np.minimum(np.minimum(k, dataset.n_visits), complete_visits(dataset) + 1)
    k_in = k <= dataset.n_visits
    event_last = (dataset.delta == 1) & k_in & (n_rows == k)
    return n_rows, event_last


def build_hazard_table(dataset: LongitudinalDataset, pooled: bool = False,
                       kind: str = "hazard", event_cause: int | None = None):
    """Person-visit hazard rows, one table per visit (or one pooled table).

    ``event_cause`` restricts which events count as ``y = 1``.
    """
    n_rows, event_last = _hazard_rows(dataset)
    if event_cause is not None:
        event_last = event_last & (dataset.cause == event_cause)
    seq = sequence_matrix(dataset.baseline, dataset.z, dataset.l, dataset.m)
    order = _order(dataset)
    nb = len(dataset.baseline_names)
    tables = {}
    for j in range(1, dataset.n_visits + 1):
        rows = order[n_rows[order] >= j]
        width = prefix_length(nb, kind, j)
        x = np.column_stack([np.full(len(rows), dataset.visit_times[j - 1]),
                             seq[rows, :width]])
        y = ((n_rows[rows] == j) & event_last[rows]).astype(np.float64)
        tables[j] = PersonVisitTable(kind, j, dataset.ids[rows], np.full(len(rows), j),
                                     y, x, model_columns(dataset.baseline_names, kind, j))
    if not pooled:
        return tables
    return pool_tables(tables, dataset.baseline_names, kind, dataset.n_visits)


def pool_tables(tables: dict, baseline_names, kind: str, n_visits: int) -> PersonVisitTable:
    """Stack per-visit hazard tables; histories not yet observed are zero-filled."""
    cols = model_columns(baseline_names, kind, n_visits)
    width = len(cols)
    xs, ys, ids, visits = [], [], [], []
    for j, t in tables.items():
        pad = np.zeros((len(t), width - t.x.shape[1]))
        xs.append(np.hstack([t.x, pad]))
        ys.append(t.y)
        ids.append(t.ids)
        visits.append(t.visits)
    x = np.vstack(xs)
    ids_all = np.concatenate(ids)
    visits_all = np.concatenate(visits)
    order = np.lexsort((visits_all, ids_all))
    return PersonVisitTable(kind, None, ids_all[order], visits_all[order],
                            np.concatenate(ys)[order], x[order], cols)


def pad_to_pooled(x: np.ndarray, width: int) -> np.ndarray:
    if x.shape[1] == width:
        return x
    return np.hstack([x, np.zeros((x.shape[0], width - x.shape[1]))])


def build_competing_tables(dataset: LongitudinalDataset, pooled: bool = False):
    """Main-event tables over all at-risk rows and competing-event tables over
    the rows without a main event."""
    if dataset.mode != "competing":
        raise ValueError("competing tables need a dataset in competing mode")
    main = build_hazard_table(dataset, pooled=False, kind="hazard_main", event_cause=1)
    comp_all = build_hazard_table(dataset, pooled=False, kind="hazard_competing",
                                  event_cause=2)
    comp = {}
    for j, t in main.items():
        keep = t.y == 0
        c = comp_all[j]
        assert np.array_equal(c.ids, t.ids)
        comp[j] = PersonVisitTable("hazard_competing", j, c.ids[keep], c.visits[keep],
                                   c.y[keep], c.x[keep], c.columns)
    if pooled:
        nb, J = dataset.baseline_names, dataset.n_visits
        return (pool_tables(main, nb, "hazard_main", J),
                pool_tables(comp, nb, "hazard_competing", J))
    return main, comp


def build_covariate_tables(dataset: LongitudinalDataset):
    """Confounder and mediator tables per visit over subjects alive at the visit."""
    seq = sequence_matrix(dataset.baseline, dataset.z, dataset.l, dataset.m)
    n_ok = complete_visits(dataset)
    order = _order(dataset)
    nb = len(dataset.baseline_names)
    conf, med = {}, {}
    for j in range(1, dataset.n_visits + 1):
        t_j = dataset.visit_times[j - 1]
        hist = (n_ok >= j - 1) & (dataset.time > t_j) & ~np.isnan(dataset.z[:, j - 1])
        for kind, target, out in (("confounder", dataset.l, conf),
                                  ("mediator", dataset.m, med)):
            ok = hist & ~np.isnan(target[:, j - 1])
            if kind == "mediator":
                ok &= ~np.isnan(dataset.l[:, j - 1])
            rows = order[ok[order]]
            width = prefix_length(nb, kind, j)
            out[j] = PersonVisitTable(kind, j, dataset.ids[rows], np.full(len(rows), j),
                                      target[rows, j - 1].copy(), seq[rows, :width],
                                      model_columns(dataset.baseline_names, kind, j))
    return conf, med


# ---------------------------------------------------------------- validation


def _is_binary(values: np.ndarray) -> bool:
    v = values[~np.isnan(values)]
    return bool(np.all((v == 0) | (v == 1)))


def validate(dataset: LongitudinalDataset) -> ValidationReport:
    rep = ValidationReport()
    t = dataset.visit_times
    if len(t) == 0 or np.any(np.diff(t) <= 0) or t[0] <= 0:
        rep.add("*", "visit grid", f"visit times must be positive and increasing: {list(t)}")
    if "age" not in dataset.baseline_names:
        rep.add("*", "missing baseline age", "a baseline column named 'age' is required")
    if not np.all(np.isfinite(dataset.baseline)):
        bad = np.flatnonzero(~np.all(np.isfinite(dataset.baseline), axis=1))
        for i in bad:
            rep.add(dataset.ids[i], "missing baseline", "baseline covariates must be recorded")
    seen = {}
    for i, sid in enumerate(dataset.ids):
        if sid in seen:
            rep.add(sid, "duplicate id", f"rows {seen[sid]} and {i}")
        seen.setdefault(sid, i)
    for i in range(dataset.n):
        sid = dataset.ids[i]
        T, d, c = dataset.time[i], dataset.delta[i], dataset.cause[i]
        if not np.isfinite(T) or T <= 0:
            rep.add(sid, "event before origin", f"event or censoring time {T} is not after 0")
        if d not in (0, 1):
            rep.add(sid, "event indicator", f"delta must be 0 or 1, got {d}")
        if dataset.mode == "competing":
            if d == 1 and c not in (1, 2):
                rep.add(sid, "cause code", f"an event needs cause 1 or 2, got {c}")
            if d == 0 and c != 0:
                rep.add(sid, "cause code", f"censored subject has cause {c}")
        elif d == 1 and c not in (0, 1):
            rep.add(sid, "cause code", f"single-event data cannot carry cause {c}")
        for fam in FAMILIES:
            row = getattr(dataset, fam)[i]
            present = ~np.isnan(row)
            if present.any():
                last = int(np.flatnonzero(present)[-1])
                if not present[:last + 1].all():
                    gap = int(np.flatnonzero(~present[:last + 1])[0]) + 1
                    rep.add(sid, "non-monotone missingness",
                            f"{fam} missing at visit {gap} but recorded later")
            after = present & (t >= T)
            if after.any():
                j = int(np.flatnonzero(after)[0]) + 1
                rep.add(sid, "recorded after event time",
                        f"{fam}_{j} recorded at or after time {T}")
    zv = dataset.z[~np.isnan(dataset.z)]
    if not np.all((zv == 0) | (zv == 1)):
        rep.add("*", "exposure not binary", "exposure values must be 0 or 1")
    for fam in ("l", "m"):
        col = getattr(dataset, fam)
        kinds = {j + 1: _is_binary(col[:, j]) for j in range(dataset.n_visits)
                 if np.any(~np.isnan(col[:, j]))}
        if len(set(kinds.values())) > 1:
            binary = [j for j, b in kinds.items() if b]
            rep.add("*", "covariate type mismatch",
                    f"{fam} is binary at visits {binary} but continuous elsewhere")
    return rep


def require_valid(dataset: LongitudinalDataset) -> LongitudinalDataset:
    rep = validate(dataset)
    if not rep.ok:
        raise DataValidationError(rep)
    return dataset


# ---------------------------------------------------------------- CSV


def _cell(value: str) -> float:
    s = value.strip()
    if s.lower() in MISSING:
        return math.nan
    return float(s)


def _encode_baseline(raw: dict[str, list[str]]):
    names, cols, cats = [], [], {}
    for name, values in raw.items():
        try:
            cols.append([_cell(v) for v in values])
        except ValueError:
            labels = sorted({v.strip() for v in values if v.strip().lower() not in MISSING})
            cats[name] = labels
            cols.append([labels.index(v.strip()) if v.strip() in labels else math.nan
                         for v in values])
        names.append(name)
    base = np.array(cols, dtype=np.float64).T if cols else np.empty((0, 0))
    return names, base, cats


def _visit_count(header, prefix):
    nums = [int(h[len(prefix):]) for h in header
            if h.startswith(prefix) and h[len(prefix):].isdigit()]
    return max(nums) if nums else 0


def read_wide_csv(path, visit_times=None, mode: str = "single") -> LongitudinalDataset:
    """Read ``id, baseline_*, z_1..z_J, l_1..l_J, m_1..m_J, time, delta[, cause]``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    return parse_wide_rows(header, rows, visit_times, mode, label=str(path))


def parse_wide_rows(header, rows, visit_times=None, mode: str = "single",
                    label: str = "input") -> LongitudinalDataset:
    for col in ("id", "time", "delta"):
        if col not in header:
            raise ValueError(f"{label}: missing column {col!r}")
    if mode == "competing" and "cause" not in header:
        raise ValueError(f"{label}: competing-event mode needs a 'cause' column")
    J = _visit_count(header, "z_")
    if J == 0:
        raise ValueError(f"{label}: no exposure columns z_1..z_J")
    grid = np.arange(1, J + 1, dtype=np.float64) if visit_times is None \
        else np.asarray(visit_times, dtype=np.float64)
    if len(grid) != J:
        raise ValueError(f"{label}: {J} visits in the file but {len(grid)} visit times")
    base_cols = [h for h in header if h.startswith("baseline_")]
    raw = {h[len("baseline_"):]: [r[h] for r in rows] for h in base_cols}
    names, base, cats = _encode_baseline(raw)
    fam = {}
    for f in FAMILIES:
        fam[f] = np.array([[_cell(r.get(f"{f}_{j}") or "") for j in range(1, J + 1)]
                           for r in rows], dtype=np.float64).reshape(len(rows), J)
    cause = np.array([_cell(r.get("cause") or "") for r in rows], dtype=np.float64)
    cause = np.nan_to_num(cause, nan=0.0)
    delta = np.array([_cell(r["delta"]) for r in rows], dtype=np.float64)
    if np.any(np.isnan(delta)):
        raise ValueError(f"{label}: every subject needs an event indicator")
    if mode == "single":
        cause = np.where(delta == 1, np.where(cause == 0, 1, cause), 0)
    return LongitudinalDataset(ids=[r["id"] for r in rows],
                               baseline=base.reshape(len(rows), len(names)),
                               baseline_names=names, z=fam["z"], l=fam["l"], m=fam["m"],
                               time=[_cell(r["time"]) for r in rows],
                               delta=delta.astype(np.int64), cause=cause.astype(np.int64),
                               visit_times=grid, mode=mode, categories=cats)


def read_long_csv(path, visit_times=None, mode: str = "single") -> LongitudinalDataset:
    """Read one row per subject-visit: ``id, visit, z, l, m`` plus subject-level
    columns (``baseline_*``, ``time``, ``delta``, ``cause``) repeated on each row."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    for col in ("id", "visit", "time", "delta"):
        if col not in header:
            raise ValueError(f"{path}: missing column {col!r}")
    by_id: dict[str, list[dict]] = {}
    for r in rows:
        by_id.setdefault(r["id"], []).append(r)
    J = max(int(r["visit"]) for r in rows) if rows else 0
    subject_cols = [h for h in header if h.startswith("baseline_")]
    subject_cols += [h for h in ("time", "delta", "cause") if h in header]
    wide = []
    for sid, recs in by_id.items():
        out = {"id": sid}
        for key in subject_cols:
            out[key] = recs[0][key]
            if any(rec[key] != out[key] for rec in recs):
                raise ValueError(f"{path}: subject {sid} has inconsistent {key!r}")
        for rec in recs:
            j = int(rec["visit"])
            for f in FAMILIES:
                out[f"{f}_{j}"] = rec.get(f) or ""
        wide.append(out)
    header = ["id"] + subject_cols + [f"{f}_{j}" for f in FAMILIES for j in range(1, J + 1)]
    return parse_wide_rows(header, wide, visit_times, mode, label=str(path))


def write_wide_csv(dataset: LongitudinalDataset, path) -> Path:
    path = Path(path)
    J = dataset.n_visits
    header = ["id"] + [f"baseline_{n}" for n in dataset.baseline_names]
    header += [f"{f}_{j}" for f in FAMILIES for j in range(1, J + 1)]
    header += ["time", "delta", "cause"]

    def fmt(v):
        return "" if np.isnan(v) else repr(float(v))

    def fmt_base(k, v):
        labels = dataset.categories.get(dataset.baseline_names[k])
        if labels is not None and not np.isnan(v):
            return labels[int(v)]
        return fmt(v)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(dataset.n):
            row = [dataset.ids[i]] + [fmt_base(k, v) for k, v in enumerate(dataset.baseline[i])]
            for f in FAMILIES:
                row += [fmt(v) for v in getattr(dataset, f)[i]]
            row += [repr(float(dataset.time[i])), int(dataset.delta[i]), int(dataset.cause[i])]
            w.writerow(row)
    return path
