import numpy as np
import pytest
from scipy import special

from robart.bart import BartConfig
from robart.rng import derive_stream
from robart.simlab import (
    DESIGNS,
    SimSettings,
    category_effect,
    expand_raw_covariates,
    format_report,
    gen_covariates,
    gen_missing_data,
    parse_report_csv,
    run_mc,
    true_mean,
)

FROZEN_MEANS = {"I": 7.0 / 6.0, "II": 5.0 / 3.0, "III": 5.0 / 3.0, "IV": 7.0 / 6.0}


def tiny_settings():
    return SimSettings(
        bart=BartConfig(num_trees=10, num_draws=80, burn_in=40),
        pilot_bart=BartConfig(num_trees=10, num_draws=50, burn_in=30),
        S=80,
    )


def test_covariate_marginal_moments():
    x = gen_covariates(1_000_000, derive_stream(50, 0))
    assert np.all(np.abs(x[:, :3].mean(axis=0)) < 0.01)
    assert abs(x[:, 3].mean() - 0.5) < 0.01
    assert abs(x[:, 4].mean() - 2.0) < 0.01
    assert set(np.unique(x[:, 3])) == {0.0, 1.0}
    assert set(np.unique(x[:, 4])) == {1.0, 2.0, 3.0}


def test_covariates_deterministic_under_fixed_stream():
    a = gen_covariates(1000, derive_stream(51, 0))
    b = gen_covariates(1000, derive_stream(51, 0))
    assert np.array_equal(a, b)


def test_category_effect_values():
    assert np.array_equal(category_effect(np.array([1.0, 2.0, 3.0])), [2.0, -1.0, -0.5])


def test_expand_raw_covariates_layout():
    x_raw = np.array([[0.1, 0.2, 0.3, 1.0, 2.0]])
    ex = expand_raw_covariates(x_raw)
    assert ex.shape == (1, 7)
    assert np.array_equal(ex[0, 4:], [0.0, 1.0, 0.0])


@pytest.mark.parametrize("design_id", ["I", "II", "III", "IV"])
def test_true_means_match_monte_carlo_oracle(design_id):
    # independent 10^7-draw oracle for E[m(X)] before trusting the constants
    spec = DESIGNS[design_id]
    x = gen_covariates(10_000_000, derive_stream(52, hash(design_id) % 1000))
    m = spec.m(x)
    se = m.std() / np.sqrt(m.size)
    assert abs(m.mean() - FROZEN_MEANS[design_id]) < 3 * se
    assert true_mean(design_id) == FROZEN_MEANS[design_id]


def test_missingness_rate_matches_independent_oracle():
    sim = gen_missing_data(1_000_000, DESIGNS["I"], derive_stream(53, 0))
    oracle_x = gen_covariates(1_000_000, derive_stream(53, 1))
    oracle_rate = special.expit(DESIGNS["I"].e(oracle_x)).mean()
    assert abs(sim.data.r.mean() - oracle_rate) < 0.005


def test_masking_invariant():
    sim = gen_missing_data(5000, DESIGNS["III"], derive_stream(54, 0))
    obs = sim.data.r == 1
    assert np.all(np.isfinite(sim.data.y[obs]))
    assert np.all(np.isnan(sim.data.y[~obs]))
    assert np.array_equal(sim.data.y[obs], sim.truth.y_full[obs])


@pytest.mark.parametrize("design_id", ["III", "IV"])
def test_selective_missingness_shifts_observed_mean(design_id):
    sim = gen_missing_data(400_000, DESIGNS[design_id], derive_stream(55, 0))
    obs = sim.data.r == 1
    observed_mean = sim.truth.y_full[obs].mean()
    full_mean = sim.truth.y_full.mean()
    se = sim.truth.y_full.std() / np.sqrt(obs.sum())
    assert abs(observed_mean - full_mean) > 5 * se


def test_run_mc_bit_identical_reruns_and_parallelism():
    settings = tiny_settings()
    a = run_mc("I", 60, 3, ["plugin", "robart-logit"], settings, 7, parallelism=1)
    b = run_mc("I", 60, 3, ["plugin", "robart-logit"], settings, 7, parallelism=2)
    assert format_report(a, "csv") == format_report(b, "csv")
    c = run_mc("I", 60, 3, ["plugin", "robart-logit"], settings, 7, parallelism=1)
    assert format_report(a, "csv") == format_report(c, "csv")


def test_run_mc_methods_share_datasets_and_chains():
    settings = tiny_settings()
    joint = run_mc("I", 60, 2, ["plugin", "robart-oracle"], settings, 8)
    alone = run_mc("I", 60, 2, ["plugin"], settings, 8)
    assert joint.methods["plugin"] == alone.methods["plugin"]


def test_run_mc_report_fields():
    settings = tiny_settings()
    rep = run_mc("II", 50, 2, ["robart-oracle"], settings, 9)
    row = rep.methods["robart-oracle"]
    assert set(row) == {"bias", "bias_signed", "cp", "cp_se", "cil", "used_reps"}
    assert row["bias"] == abs(row["bias_signed"])
    assert 0.0 <= row["cp"] <= 1.0
    assert row["cil"] > 0
    assert rep.chi0 == FROZEN_MEANS["II"]


def test_run_mc_validates_inputs():
    with pytest.raises(ValueError, match="design"):
        run_mc("V", 50, 1, ["plugin"], tiny_settings(), 0)
    with pytest.raises(ValueError, match="method"):
        run_mc("I", 50, 1, ["bogus"], tiny_settings(), 0)
    with pytest.raises(ValueError, match="reps"):
        run_mc("I", 50, 0, ["plugin"], tiny_settings(), 0)


def test_report_csv_roundtrip_is_exact():
    settings = tiny_settings()
    rep = run_mc("I", 40, 2, ["plugin", "robart-oracle"], settings, 10)
    text = format_report(rep, "csv")
    rows = parse_report_csv(text)
    assert len(rows) == 2
    by_method = {r["method"]: r for r in rows}
    for method, row in rep.methods.items():
        parsed = by_method[method]
        assert parsed["bias"] == row["bias"]
        assert parsed["cp"] == row["cp"]
        assert parsed["cil"] == row["cil"]
        assert parsed["chi0"] == rep.chi0


def test_report_markdown_renders_three_decimals():
    settings = tiny_settings()
    rep = run_mc("I", 40, 2, ["plugin"], settings, 11)
    text = format_report(rep, "markdown")
    assert "| Method | Bias | CP | CP se | CIL |" in text
    assert "| plugin |" in text


def test_format_report_empty_list():
    assert format_report([], "csv").strip() == (
        "design,n,method,used_reps,bias,bias_signed,cp,cp_se,cil,chi0,seed"
    )


def test_onestep_method_runs_in_mc():
    settings = tiny_settings()
    rep = run_mc("I", 50, 1, ["onestep"], settings, 12)
    assert rep.methods["onestep"]["used_reps"] == 1


def test_stacked_method_runs_in_mc():
    settings = tiny_settings()
    settings.stack_folds = 2
    rep = run_mc("I", 60, 1, ["robart-stacked"], settings, 13)
    assert rep.methods["robart-stacked"]["used_reps"] == 1
