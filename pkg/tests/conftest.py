import numpy as np
import pytest

from bartmed.survival_data import LongitudinalDataset

GRID = (3.0, 6.0, 9.0)


def make_dataset(subjects, visit_times=GRID, mode="single", baseline_names=("age",)):
    """Build a dataset from dicts with keys T, delta and optional cause, age,
    z, l, m. Covariates default to values at every visit before T."""
    J = len(visit_times)
    ids, base, fam, time, delta, cause = [], [], {"z": [], "l": [], "m": []}, [], [], []
    for i, s in enumerate(subjects):
        ids.append(s.get("id", f"p{i:03d}"))
        base.append(s.get("baseline", [s.get("age", 50.0)]))
        alive = np.array(visit_times) < s["T"]
        for f, default in (("z", 1.0), ("l", 0.0), ("m", 1.5)):
            row = np.asarray(s.get(f, np.where(alive, default, np.nan)), dtype=float)
            fam[f].append(row.reshape(J))
        time.append(s["T"])
        delta.append(s["delta"])
        cause.append(s.get("cause", s["delta"]))
    return LongitudinalDataset(ids=ids, baseline=np.array(base, dtype=float),
                               baseline_names=list(baseline_names), z=fam["z"], l=fam["l"],
                               m=fam["m"], time=time, delta=delta, cause=cause,
                               visit_times=visit_times, mode=mode)


@pytest.fixture
def tiny_cohort():
    rng = np.random.default_rng(0)
    subjects = []
    for i in range(60):
        T = float(rng.choice([2.0, 4.5, 6.0, 7.5, 9.5, 11.0]))
        subjects.append({"T": T, "delta": int(rng.random() < 0.6) if T < 10 else 0,
                         "age": 45 + 20 * rng.random()})
    return make_dataset(subjects)


TRUE_BETA = np.array([88.0, 3.0, -4.0, 0.3, 0.25, 0.004, 0.05, -0.06, 0.002])


def simulate_cohort(seed, beta=TRUE_BETA, n_subjects=500, n_visits=5, re_sd=(0.0, 0.0),
                    sigma=0.1, spacing=3.0):
    """Repeated blood-pressure measurements from the nine-term mixed model."""
    from bartmed.imputation import ExternalCohort, fixed_design

    rng = np.random.default_rng(seed)
    race = rng.integers(0, 2, n_subjects).astype(float)
    sex = rng.integers(0, 2, n_subjects).astype(float)
    bmi = rng.normal(25.0, 4.0, n_subjects)
    start = rng.uniform(18.0, 30.0, n_subjects)
    b = rng.normal(0.0, 1.0, (n_subjects, 2)) * np.asarray(re_sd)
    rows = np.repeat(np.arange(n_subjects), n_visits)
    age = start[rows] + spacing * np.tile(np.arange(n_visits), n_subjects)
    mean = fixed_design(race[rows], sex[rows], bmi[rows], age) @ beta
    mbp = mean + b[rows, 0] + b[rows, 1] * age + rng.normal(0.0, sigma, len(rows))
    ids = np.array([f"c{i:04d}" for i in range(n_subjects)])[rows]
    return ExternalCohort(ids, race[rows], sex[rows], bmi[rows], age, mbp), b


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
