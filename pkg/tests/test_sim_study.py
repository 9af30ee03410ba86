import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bartmed import survival_data as sd
from bartmed.bart import BartConfig
from bartmed.glm import GlmFit
from bartmed.sequential_models import BankConfig, ModelRole
from bartmed.sim_study import (ESTIMANDS, KINDS, BartEstimator, DgpSpec, Estimate, GlmPlugin,
                               Misspecification, TruthTable, default_spec, fit_ground_truth,
                               generate_replicate, glm_bank_from_coefficients, run_study,
                               synthetic_baseline, true_effects)


def flat_spec(n, hazard=0.0, mediator_sd=1.0):
    base, names = synthetic_baseline(500, seed=1)
    coefs = {}
    for j in (1, 2, 3):
        for kind in KINDS:
            coefs[kind, j] = (hazard if kind == "hazard" else 0.0, {},
                              mediator_sd if kind == "mediator" else 1.0)
    return DgpSpec(glm_bank_from_coefficients(coefs, names), base, names, n=n, seed=3)


def zero_exposure(spec, kinds):
    names = spec.baseline_names
    for role, fit in spec.truth.fits.items():
        if role.kind not in kinds:
            continue
        cols = sd.model_columns(names, role.kind, role.visit)
        if role.kind == "hazard":
            cols = cols[1:]
        for i, c in enumerate(cols):
            if c.startswith("z_"):
                fit.coef[i + 1] = 0.0
    return spec


def test_truth_recovered_from_large_sample():
    spec = default_spec(n=100_000, seed=2)
    fitted = fit_ground_truth(generate_replicate(spec, 0))
    hits = []
    for role, truth in spec.truth.fits.items():
        fit = fitted.fits[role]
        hits.extend(np.abs(fit.coef - truth.coef) <= 3 * fit.se)
    assert np.mean(hits) >= 0.95


def test_null_outcome_slopes():
    spec = default_spec(n=20_000, seed=4)
    for role, fit in spec.truth.fits.items():
        if role.kind == "hazard":
            spec.truth.fits[role] = GlmFit("binary", np.r_[-2.5, np.zeros(len(fit.coef) - 1)],
                                           np.zeros(len(fit.coef)))
    fitted = fit_ground_truth(generate_replicate(spec, 0))
    for j in (1, 2, 3):
        fit = fitted.fits[ModelRole("hazard", j)]
        assert np.all(np.abs(fit.slopes) <= 3 * fit.se[1:])


def test_flat_event_rate():
    n = 10_000
    d = generate_replicate(flat_spec(n), 0)
    rate = np.mean((d.delta == 1) & (d.time <= d.visit_times[0]))
    assert abs(rate - 0.5) <= 3 * np.sqrt(0.25 / n)


def test_pure_noise_mediator_is_normal():
    d = generate_replicate(flat_spec(10_000, hazard=-8.0), 0)
    m = d.m[:, 0]
    res = stats.anderson(m[~np.isnan(m)], "norm")
    assert res.statistic < res.critical_values[-1]  # 1% level


def test_replicates_are_deterministic():
    spec = default_spec(n=300)
    a, b = generate_replicate(spec, 5), generate_replicate(spec, 5)
    for f in ("z", "l", "m", "time", "delta", "baseline"):
        assert np.array_equal(getattr(a, f), getattr(b, f), equal_nan=True)
    assert not np.array_equal(a.time, generate_replicate(spec, 6).time)
    sd.require_valid(a)


def test_dropout_is_monotone():
    d = generate_replicate(default_spec(n=2000), 1)
    for field in (d.z, d.l, d.m):
        seen = ~np.isnan(field)
        assert np.all(seen[:, 1:] <= seen[:, :-1])


def test_null_exposure_truth():
    spec = zero_exposure(default_spec(), set(KINDS))
    t = true_effects(spec, c_star=200_000)
    for k in ESTIMANDS:
        assert np.all(np.abs(t.effects[k]) < 1e-3)


def test_exposure_only_in_outcome():
    spec = zero_exposure(default_spec(), {"confounder", "mediator"})
    t = true_effects(spec, c_star=200_000)
    assert np.all(np.abs(t.effects["IIE"]) < 1e-3)
    assert np.allclose(t.effects["IDE"], t.effects["TE"], atol=1e-3)
    assert np.abs(t.effects["IDE"][2]) > 1e-3


def test_truth_stable_when_doubling_c_star():
    spec = default_spec()
    a = true_effects(spec, c_star=100_000, seed=1)
    b = true_effects(spec, c_star=200_000, seed=2)
    for k in ESTIMANDS:
        se = np.sqrt(a.mc_se[k] ** 2 + b.mc_se[k] ** 2)
        assert np.all(np.abs(a.effects[k] - b.effects[k]) <= 2 * se + 1e-12)


def test_misspecification_validated():
    base, names = synthetic_baseline(100)
    with pytest.raises(ValueError, match="unknown"):
        Misspecification(log_terms=("height",)).calibrate(base, names)
    with pytest.raises(ValueError, match="positive"):
        Misspecification(log_terms=("sex",)).calibrate(base, names)


# ---------------------------------------------------------------- reporting

TRUTH = TruthTable({k: np.array([0.0, -0.02, 0.03]) for k in ESTIMANDS},
                   {k: np.zeros(3) for k in ESTIMANDS}, 1)


def stub(offset=0.0, fail_on=None, noise=None):
    def fn(data, index):
        if index == fail_on:
            raise RuntimeError("boom")
        e = {k: TRUTH.effects[k] + offset for k in ESTIMANDS}
        if noise is not None:
            e = {k: v + noise[index] for k, v in e.items()}
        return Estimate(e, e, e)
    return fn


def small_study(estimators, n_reps=5):
    return run_study(default_spec(n=50), estimators, n_reps=n_reps, truth=TRUTH)


def test_exact_stub():
    rep = small_study({"exact": stub()})
    for c in rep.cells:
        assert c["bias"] == 0.0 and c["mse"] == 0.0 and c["coverage"] == 1.0


def test_shifted_stub():
    rep = small_study({"shift": stub(0.01)})
    for c in rep.cells:
        assert c["bias"] == pytest.approx(0.01, abs=1e-15)
        assert c["coverage"] == 0.0


def test_failures_are_counted():
    rep = small_study({"flaky": stub(fail_on=2)})
    assert len(rep.failures["flaky"]) == 1 and "boom" in rep.failures["flaky"][0]
    assert all(c["n_ok"] == 4 and c["n_failed"] == 1 for c in rep.cells)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-0.1, 0.1), min_size=6, max_size=6))
def test_mse_bounds_squared_bias(noise):
    rep = small_study({"noisy": stub(noise=noise)}, n_reps=6)
    for c in rep.cells:
        assert c["mse"] >= c["bias"] ** 2 - 1e-15
        assert 0.0 <= c["coverage"] <= 1.0


def test_report_outputs(tmp_path):
    rep = small_study({"a": stub(), "b": stub(0.01)})
    rep.to_csv(tmp_path / "s.csv")
    rep.to_json(tmp_path / "s.json")
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 1 + 2 * 3 * 2
    assert "coverage" in rep.table()


# ---------------------------------------------------------------- estimators


def test_estimators_run_on_a_replicate():
    data = generate_replicate(default_spec(n=300), 0)
    glm = GlmPlugin(n_boot=3, c_star=200)(data, 0)
    bart = BartEstimator(BankConfig(bart=BartConfig(n_burn=5, n_keep=5), roles="gcomp"))(data, 0)
    for e in (glm, bart):
        for k in ESTIMANDS:
            assert e.point[k].shape == (3,) and np.all(np.isfinite(e.point[k]))
            assert np.all(e.lower[k] <= e.upper[k])
