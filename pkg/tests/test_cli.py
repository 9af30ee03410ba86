import csv
import hashlib
import json

import numpy as np
import pytest

from bartmed import survival_data as sd
from bartmed.cli import main, resolve, build_parser
from bartmed.sim_study import default_spec, generate_replicate
from conftest import make_dataset, simulate_cohort

ENV = {}
TIMES = ["--visit-times", "3,6,9"]
QUICK = ["--burn", "10", "--keep", "10", "--workers", "1"]


def run(*argv, environ=ENV):
    return main([str(a) for a in argv], environ)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digest(directory):
    return {p.name: digest(p) for p in sorted(directory.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def cohort_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "cohort.csv"
    sd.write_wide_csv(generate_replicate(default_spec(n=150), 0), path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["baseline_sex"] = "female" if float(r["baseline_sex"]) else "male"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


@pytest.fixture(scope="module")
def fitted(cohort_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert run("fit", "--input", cohort_csv, *TIMES, *QUICK, "--out", out) == 0
    return out


def test_fit_writes_nine_models(fitted):
    manifest = json.loads((fitted / "bank" / "manifest.json").read_text())
    assert len(manifest["models"]) == 9
    assert manifest["config"]["config_hash"]


def test_fit_is_idempotent(cohort_csv, fitted, tmp_path):
    before = digest(cohort_csv)
    assert run("fit", "--input", cohort_csv, *TIMES, *QUICK, "--bank", tmp_path / "b") == 0
    assert tree_digest(tmp_path / "b") == tree_digest(fitted / "bank")
    assert digest(cohort_csv) == before


def test_gcomp_outputs(fitted, tmp_path):
    bank = fitted / "bank"
    before = tree_digest(bank)
    args = ("gcomp", "--bank", bank, "--out", tmp_path / "a", "--c-star", 200,
            "--age-strata", "45-54,55-64", "--emit-samples", "--workers", 1)
    assert run(*args) == 0
    rows = list(csv.DictReader(open(tmp_path / "a" / "effects.csv")))
    assert {r["stratum"] for r in rows} == {"all", "45-54", "55-64"}
    assert {r["estimand"] for r in rows} == {"IDE", "IIE", "TE"}
    assert {r["visit"] for r in rows} == {"1", "2", "3"}
    late = [r for r in rows if r["visit"] == "3" and r["estimand"] == "TE"]
    assert all(len(r["mean"]) > 8 for r in late)  # full precision in machine-readable output
    assert (tmp_path / "a" / "effects_samples.csv").exists()
    assert run(*args[:4], tmp_path / "b", *args[5:]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert tree_digest(bank) == before


def test_gcomp_subset(fitted, tmp_path):
    args = ("gcomp", "--bank", fitted / "bank", "--c-star", 100)
    assert run(*args, "--out", tmp_path / "f", "--subset", "sex=female") == 0
    assert run(*args, "--out", tmp_path / "all") == 0
    a = json.loads((tmp_path / "f" / "effects.json").read_text())
    b = json.loads((tmp_path / "all" / "effects.json").read_text())
    assert a != b
    assert run(*args, "--out", tmp_path / "x", "--subset", "sex=other") == 3


def test_gcomp_usage_errors(fitted, tmp_path):
    bank = fitted / "bank"
    assert run("gcomp", "--bank", bank, "--mode", "competing", "--out", tmp_path) == 2
    assert run("gcomp", "--bank", tmp_path / "none", "--out", tmp_path) == 2
    assert run("gcomp", "--bank", bank, "--out", tmp_path, "--regime", "1") == 2
    assert run("gcomp", "--bank", bank, "--out", tmp_path, "--level", "1.5") == 2
    assert run("frobnicate") == 2


def test_report(fitted, tmp_path, capsys):
    assert run("gcomp", "--bank", fitted / "bank", "--out", tmp_path, "--c-star", 50) == 0
    capsys.readouterr()
    assert run("report", "--input", tmp_path / "effects.json") == 0
    assert "visit 2" in capsys.readouterr().out
    (tmp_path / "junk.json").write_text("{}")
    assert run("report", "--input", tmp_path / "junk.json") == 2


def test_competing_without_cause_column(tmp_path):
    path = tmp_path / "c.csv"
    sd.write_wide_csv(make_dataset([{"T": 10.0, "delta": 0} for _ in range(5)]), path)
    lines = [line.rsplit(",", 1)[0] for line in path.read_text().splitlines()]
    path.write_text("\n".join(lines) + "\n")
    assert run("fit", "--input", path, "--mode", "competing", *TIMES, *QUICK,
               "--out", tmp_path) == 3


def test_validation_failure(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    data = make_dataset([{"T": -1.0, "delta": 0}, {"T": 5.0, "delta": 1}])
    sd.write_wide_csv(data, path)
    assert run("fit", "--input", path, *TIMES, *QUICK, "--out", tmp_path) == 3
    assert "invalid" in capsys.readouterr().err


def test_competing_pipeline(tmp_path):
    rng = np.random.default_rng(0)
    subjects = []
    for i in range(80):
        T = float(rng.choice([4.5, 7.5, 10.0]))
        seen = np.array([3.0, 6.0, 9.0]) < T
        s = {"T": T, "delta": int(T < 10), "age": 45 + 20 * rng.random(),
             "z": rng.integers(0, 2, 3).astype(float),
             "l": rng.integers(0, 2, 3).astype(float), "m": rng.normal(0, 1, 3)}
        for f in ("z", "l", "m"):
            s[f] = np.where(seen, s[f], np.nan)
        s["cause"] = int(rng.integers(1, 3)) if s["delta"] else 0
        subjects.append(s)
    path = tmp_path / "comp.csv"
    sd.write_wide_csv(make_dataset(subjects, mode="competing"), path)
    assert run("fit", "--input", path, "--mode", "competing", *TIMES, *QUICK,
               "--out", tmp_path) == 0
    assert run("gcomp", "--bank", tmp_path / "bank", "--mode", "competing",
               "--out", tmp_path, "--c-star", 100) == 0
    names = {r["estimand"] for r in csv.DictReader(open(tmp_path / "effects.csv"))}
    assert names == {f"{k}_{e}" for k in ("IDE", "IIE", "TE") for e in ("main", "competing")}


def external_csv(path, constant=None):
    cohort, _ = simulate_cohort(0, n_subjects=120, n_visits=4, re_sd=(3.0, 0.1), sigma=2.0)
    mbp = cohort.mbp if constant is None else np.full(len(cohort.mbp), constant)
    with open(path, "w") as fh:
        fh.write("id,race,sex,bmi,age,mbp\n")
        for row in zip(cohort.ids, cohort.race, cohort.sex, cohort.bmi, cohort.age, mbp):
            fh.write(",".join([row[0]] + [repr(float(v)) for v in row[1:]]) + "\n")
    return path


def target_csv(path):
    rng = np.random.default_rng(1)
    subjects = [{"T": 10.0, "delta": 0,
                 "baseline": (float(rng.integers(0, 2)), float(rng.integers(0, 2)),
                              rng.uniform(20, 35), rng.uniform(45, 65))} for _ in range(30)]
    sd.write_wide_csv(make_dataset(subjects, baseline_names=("race", "sex", "bmi", "age")),
                      path)
    return path


def test_impute(tmp_path):
    ext = external_csv(tmp_path / "ext.csv")
    tgt = target_csv(tmp_path / "target.csv")
    before = digest(tgt), digest(ext)
    args = ("impute", "--external", ext, "--input", tgt, *TIMES, "--burn", 50, "--keep", 50)
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert (digest(tgt), digest(ext)) == before
    aug = sd.read_wide_csv(tmp_path / "a" / "augmented.csv", [3.0, 6.0, 9.0])
    assert aug.baseline_names[-1] == "cmbp" and np.all(np.isfinite(aug.column("cmbp")))
    assert len(list(csv.DictReader(open(tmp_path / "a" / "matches.csv")))) == 30


def test_impute_constant_cohort(tmp_path):
    ext = external_csv(tmp_path / "ext.csv", constant=120.0)
    tgt = target_csv(tmp_path / "target.csv")
    assert run("impute", "--external", ext, "--input", tgt, *TIMES,
               "--burn", 100, "--keep", 100, "--out", tmp_path) == 0
    aug = sd.read_wide_csv(tmp_path / "augmented.csv", [3.0, 6.0, 9.0])
    assert np.allclose(aug.column("cmbp"), 20 * 120.0, rtol=0.01)


def test_impute_requires_external(tmp_path):
    tgt = target_csv(tmp_path / "target.csv")
    assert run("impute", "--input", tgt, "--out", tmp_path) == 2
    assert run("impute", "--input", tgt, "--external", tmp_path / "nope.csv",
               "--out", tmp_path) == 2


def test_settings_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("c-star = 123\nseed = 4\nage_strata = 45-49\nout = from_file\n")
    parser = build_parser()
    args = parser.parse_args(["gcomp", "--config", str(cfg), "--seed", "9"])
    s = resolve(args, {"BARTMED_OUT": "from_env", "BARTMED_SEED": "7"})
    assert (s["c_star"], s["seed"], s["out"], s["age_strata"]) == (123, 9, "from_env", "45-49")
    s = resolve(parser.parse_args(["gcomp", "--config", str(cfg)]), {"BARTMED_SEED": "7"})
    assert (s["seed"], s["out"]) == (7, "from_file")
    (tmp_path / "bad.cfg").write_text("[bartmed]\ncolour = red\n")
    assert run("gcomp", "--config", tmp_path / "bad.cfg") == 2
