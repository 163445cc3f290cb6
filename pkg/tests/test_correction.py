import math

import numpy as np
import pytest
from scipy import stats

from robart.bart import BartConfig, PosteriorDraws, run_bart_binary, run_bart_regression
from robart.correction import (
    DatasetError,
    DrawSet,
    MeanResponsePilots,
    MethodError,
    MissingDataset,
    TreatmentDataset,
    TreatmentPilots,
    aipw_point_estimate,
    bayesian_bootstrap_weights,
    bootstrap_weight_matrix,
    chi_draw,
    credible_interval,
    debias_term,
    export_drawset_csv,
    oracle_bias_term,
    run_att,
    run_ate,
    run_mean_response,
)
from robart.pilots import oracle_outcome_pilot, oracle_propensity_pilot
from robart.rng import derive_stream
from robart.simlab import DESIGNS, gen_missing_data


def small_bart(**kw):
    base = dict(num_trees=20, num_draws=150, burn_in=80)
    base.update(kw)
    return BartConfig(**base)


def toy_missing(n=40, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    r = (rng.random(n) < 0.7).astype(int)
    if r.sum() == 0:
        r[0] = 1
    y = np.where(r == 1, x[:, 0] + rng.normal(size=n), np.nan)
    return MissingDataset(y, r, x)


# --------------------------------------------------------------------------
# datasets


def test_missing_dataset_invariants():
    with pytest.raises(DatasetError, match="NaN"):
        MissingDataset(np.array([1.0, 2.0]), np.array([1, 0]), np.zeros((2, 1)))
    with pytest.raises(DatasetError, match="finite"):
        MissingDataset(np.array([np.nan, 2.0]), np.array([1, 1]), np.zeros((2, 1)))
    with pytest.raises(DatasetError, match="observed"):
        MissingDataset(np.array([np.nan]), np.array([0]), np.zeros((1, 1)))
    ds = MissingDataset(np.array([1.0, np.nan]), np.array([1, 0]), np.zeros((2, 1)))
    assert ds.n == 2
    assert np.array_equal(ds.observed_y(), [1.0, 0.0])


def test_treatment_dataset_invariants():
    with pytest.raises(DatasetError, match="arms"):
        TreatmentDataset(np.zeros(3), np.ones(3), np.zeros((3, 1)))
    with pytest.raises(DatasetError, match="finite"):
        TreatmentDataset(np.array([np.nan, 1.0]), np.array([0, 1]), np.zeros((2, 1)))


# --------------------------------------------------------------------------
# bootstrap weights


def test_weights_single_row():
    w = bayesian_bootstrap_weights(1, derive_stream(0, 0))
    assert np.array_equal(w, [1.0])


def test_weights_sum_and_positivity():
    w = bayesian_bootstrap_weights(100, derive_stream(0, 1))
    assert abs(w.sum() - 1.0) < 1e-12
    assert np.all(w > 0)


def test_weights_pair_marginal_is_uniform():
    rng = derive_stream(0, 2)
    first = np.array([bayesian_bootstrap_weights(2, rng)[0] for _ in range(100_000)])
    assert stats.kstest(first, stats.uniform.cdf).pvalue > 0.001


def test_weights_mean_is_one_over_n():
    rng = derive_stream(0, 3)
    W = bootstrap_weight_matrix(20_000, 5, rng)
    se = W[:, 0].std() / math.sqrt(W.shape[0])
    assert np.all(np.abs(W.mean(axis=0) - 0.2) < 3 * se)
    assert np.allclose(W.sum(axis=1), 1.0, atol=1e-12)


# --------------------------------------------------------------------------
# elementary functionals (hand-computed oracles)


def test_chi_draw_hand_example():
    W = np.array([0.2, 0.3, 0.5])
    r = np.array([1, 0, 1])
    y = np.array([2.0, np.nan, 4.0])
    m = np.array([1.0, 1.0, 1.0])
    gamma = np.array([1 / 0.5, 0.0, 1 / 0.8])
    assert chi_draw(m, gamma, y, r, W) == pytest.approx(3.275, abs=1e-12)


def test_chi_draw_pure_plugin_when_gamma_zero():
    W = np.array([0.25, 0.75])
    m = np.array([2.0, 4.0])
    got = chi_draw(m, np.zeros(2), np.array([np.nan, np.nan]), np.zeros(2, dtype=int), W)
    assert got == pytest.approx(0.25 * 2 + 0.75 * 4, abs=1e-14)


def test_chi_draw_pure_ipw_with_unit_propensity():
    W = np.array([0.5, 0.5])
    y = np.array([1.0, 3.0])
    got = chi_draw(np.zeros(2), np.ones(2), y, np.ones(2, dtype=int), W)
    assert got == pytest.approx(2.0, abs=1e-14)


def test_chi_draw_rejects_nonzero_gamma_on_unobserved():
    with pytest.raises(ValueError, match="vanish"):
        chi_draw(np.zeros(2), np.ones(2), np.array([1.0, np.nan]), np.array([1, 0]), np.full(2, 0.5))


def test_debias_term_hand_example():
    gamma = np.array([2.0, 0.0])
    m_hat = np.array([1.0, 1.0])
    m_s = np.array([0.0, 3.0])
    assert debias_term(m_s, m_hat, gamma) == pytest.approx(1.5, abs=1e-12)


def test_debias_term_zero_cases():
    m = np.array([0.3, -0.7, 2.0])
    assert debias_term(m, m, np.array([2.0, 0.5, 3.0])) == 0.0
    assert debias_term(np.zeros(3), np.ones(3), np.ones(3)) == 0.0


def test_oracle_bias_term_mirrors_debias():
    m0 = np.array([1.0, 1.0])
    m_s = np.array([0.0, 3.0])
    gamma0 = np.array([2.0, 0.0])
    assert oracle_bias_term(m0, m_s, gamma0) == pytest.approx(1.5, abs=1e-12)
    assert oracle_bias_term(m_s, m_s, gamma0) == 0.0
    assert oracle_bias_term(m0, m_s, np.ones(2)) == 0.0


def test_aipw_hand_example_and_degenerate_cases():
    data = MissingDataset(
        np.array([2.0, np.nan, 4.0]), np.array([1, 0, 1]), np.zeros((3, 1))
    )
    pi = np.array([0.5, 0.9, 0.8])
    m = np.array([1.0, 1.0, 1.0])
    expected = (1 + 2 * (2 - 1) + 1 + 1 + 1.25 * (4 - 1)) / 3
    assert aipw_point_estimate(data, pi, m) == pytest.approx(expected, abs=1e-12)
    full = MissingDataset(np.array([1.0, 5.0]), np.array([1, 1]), np.zeros((2, 1)))
    assert aipw_point_estimate(full, np.ones(2), np.zeros(2)) == pytest.approx(3.0)


def test_aipw_double_robustness_monte_carlo():
    # correct outcome mean with a wrong (but valid) propensity stays unbiased
    chi0 = DESIGNS["I"].mean_outcome
    errs = []
    for rep in range(60):
        sim = gen_missing_data(400, DESIGNS["I"], derive_stream(100, rep))
        wrong_pi = np.clip(sim.truth.pi**2, 0.02, 0.98)
        errs.append(aipw_point_estimate(sim.data, wrong_pi, sim.truth.m) - chi0)
    errs = np.asarray(errs)
    assert abs(errs.mean()) < 3 * errs.std(ddof=1) / math.sqrt(errs.size)


# --------------------------------------------------------------------------
# credible intervals


def test_credible_interval_interpolated_quantiles():
    draws = np.arange(1.0, 101.0)
    ci = credible_interval(draws, 0.10)
    assert ci.lo == pytest.approx(5.95, abs=1e-12)
    assert ci.hi == pytest.approx(95.05, abs=1e-12)
    assert ci.mean == pytest.approx(50.5)
    assert ci.length == pytest.approx(95.05 - 5.95, abs=1e-12)


def test_credible_interval_degenerate_draws():
    ci = credible_interval(np.full(10, 3.3), 0.05)
    assert (ci.mean, ci.lo, ci.hi, ci.length) == (3.3, 3.3, 3.3, 0.0)


def test_credible_interval_normal_quantiles():
    draws = derive_stream(1, 0).generator.standard_normal(100_000)
    ci = credible_interval(draws, 0.05)
    assert abs(ci.lo + 1.96) < 0.02
    assert abs(ci.hi - 1.96) < 0.02


def test_credible_interval_validation():
    with pytest.raises(ValueError, match="at least 2"):
        credible_interval(np.array([1.0]), 0.05)
    with pytest.raises(ValueError, match="alpha"):
        credible_interval(np.arange(10.0), 1.5)


# --------------------------------------------------------------------------
# draw sets and the mean-response driver


def test_drawset_identity_enforced():
    chi = np.array([1.0, 2.0])
    b = np.array([0.25, -0.5])
    ds = DrawSet(chi - b, "robart", "mean", chi_raw=chi, b_hat=b)
    assert np.array_equal(ds.draws, chi - b)
    with pytest.raises(MethodError, match="components"):
        DrawSet(chi, "robart", "mean", chi_raw=chi, b_hat=b)


def test_run_mean_response_noiseless_constant():
    n = 60
    x = derive_stream(2, 0).generator.normal(size=(n, 2))
    y = np.full(n, 5.0)
    data = MissingDataset(y, np.ones(n, dtype=int), x)
    cfg = small_bart(constant_outcome_jitter=1e-7)
    pilots = MeanResponsePilots(
        propensity=oracle_propensity_pilot(np.full(n, 0.99), clip_eps=0.005),
        outcome=oracle_outcome_pilot(np.full(n, 5.0)),
    )
    for method in ("plugin-bart", "robart"):
        ds = run_mean_response(data, method, pilots, cfg, 100, derive_stream(2, 1))
        summ = credible_interval(ds, 0.05)
        assert abs(summ.mean - 5.0) <= max(3 * ds.draws.std(), 1e-3)


def test_run_mean_response_shares_chain_and_weights():
    sim = gen_missing_data(120, DESIGNS["I"], derive_stream(3, 0))
    data = sim.data
    obs = data.r == 1
    cfg = small_bart()
    m_draws = run_bart_regression(data.x[obs], data.y[obs], cfg, derive_stream(3, 1), X_test=data.x)
    W = bootstrap_weight_matrix(100, data.n, derive_stream(3, 2))
    pilots = MeanResponsePilots(
        propensity=oracle_propensity_pilot(sim.truth.pi),
        outcome=oracle_outcome_pilot(sim.truth.m),
    )
    a = run_mean_response(data, "robart", pilots, cfg, 100, derive_stream(3, 3), m_draws=m_draws, weights=W)
    b = run_mean_response(data, "robart", pilots, cfg, 100, derive_stream(3, 4), m_draws=m_draws, weights=W)
    assert np.array_equal(a.draws, b.draws)  # fully determined by shared inputs
    assert np.array_equal(a.draws, a.chi_raw - a.b_hat)


def test_onestep_equals_robart_when_pilot_outcome_tracks_each_draw():
    # if the outcome pilot coincides with the current draw, the correction
    # vanishes and the debiased draw equals the one-step draw
    sim = gen_missing_data(80, DESIGNS["I"], derive_stream(4, 0))
    data = sim.data
    obs = data.r == 1
    cfg = small_bart(num_draws=50)
    m_draws = run_bart_regression(data.x[obs], data.y[obs], cfg, derive_stream(4, 1), X_test=data.x)
    W = bootstrap_weight_matrix(50, data.n, derive_stream(4, 2))
    pi_hat = np.clip(sim.truth.pi, 0.01, 0.99)
    gamma = data.r / pi_hat
    y_filled = data.observed_y()
    for s in range(0, 50, 7):
        m_s = m_draws.fitted_test[s]
        chi = chi_draw(m_s, gamma, data.y, data.r, W[s])
        b = debias_term(m_s, m_s, gamma)
        assert b == 0.0
        onestep_value = float(np.sum(W[s] * (m_s + gamma * (y_filled - m_s))))
        assert chi - b == pytest.approx(onestep_value, abs=1e-12)


def test_location_equivariance_at_the_correction_layer():
    sim = gen_missing_data(90, DESIGNS["II"], derive_stream(5, 0))
    data = sim.data
    obs = data.r == 1
    cfg = small_bart(num_draws=60)
    m_draws = run_bart_regression(data.x[obs], data.y[obs], cfg, derive_stream(5, 1), X_test=data.x)
    W = bootstrap_weight_matrix(60, data.n, derive_stream(5, 2))
    pilots = MeanResponsePilots(
        propensity=oracle_propensity_pilot(sim.truth.pi),
        outcome=oracle_outcome_pilot(sim.truth.m),
    )
    base = run_mean_response(data, "robart", pilots, cfg, 60, derive_stream(5, 3), m_draws=m_draws, weights=W)

    c = 17.25
    shifted_data = MissingDataset(data.y + c, data.r, data.x)
    shifted_draws = PosteriorDraws(
        m_draws.fitted + c, m_draws.sigma, m_draws.acceptance, m_draws.fitted_test + c
    )
    shifted_pilots = MeanResponsePilots(
        propensity=oracle_propensity_pilot(sim.truth.pi),
        outcome=oracle_outcome_pilot(sim.truth.m + c),
    )
    shifted = run_mean_response(
        shifted_data, "robart", shifted_pilots, cfg, 60, derive_stream(5, 3),
        m_draws=shifted_draws, weights=W,
    )
    assert np.max(np.abs(shifted.draws - base.draws - c)) < 1e-10
    for method in ("plugin-bart",):
        a = run_mean_response(data, method, None, cfg, 60, derive_stream(5, 4), m_draws=m_draws, weights=W)
        b = run_mean_response(shifted_data, method, None, cfg, 60, derive_stream(5, 4), m_draws=shifted_draws, weights=W)
        assert np.max(np.abs(b.draws - a.draws - c)) < 1e-10


def test_full_pipeline_location_equivariance_with_integer_exact_shift():
    # integer-valued outcomes and a power-of-two sample size keep the
    # centering arithmetic exact, so the whole chain path is preserved
    rng = derive_stream(6, 0).generator
    n = 64
    x = rng.normal(size=(n, 2))
    y = rng.integers(-3, 4, n).astype(float)
    r = np.ones(n, dtype=int)
    data = MissingDataset(y, r, x)
    shifted = MissingDataset(y + 256.0, r, x)
    cfg = small_bart(num_draws=40)
    pilots = MeanResponsePilots(
        propensity=oracle_propensity_pilot(np.full(n, 0.9)),
        outcome=oracle_outcome_pilot(np.zeros(n)),
    )
    pilots_shift = MeanResponsePilots(
        propensity=oracle_propensity_pilot(np.full(n, 0.9)),
        outcome=oracle_outcome_pilot(np.zeros(n) + 256.0),
    )
    a = run_mean_response(data, "robart", pilots, cfg, 40, derive_stream(6, 1))
    b = run_mean_response(shifted, "robart", pilots_shift, cfg, 40, derive_stream(6, 1))
    assert np.max(np.abs(b.draws - a.draws - 256.0)) < 1e-8


def test_run_mean_response_method_validation():
    data = toy_missing()
    cfg = small_bart(num_draws=20)
    with pytest.raises(MethodError, match="unknown method"):
        run_mean_response(data, "nope", None, cfg, 10, derive_stream(7, 0))
    with pytest.raises(MethodError, match="pi_draws"):
        run_mean_response(data, "onestep", None, cfg, 10, derive_stream(7, 1))
    with pytest.raises(MethodError, match="propensity pilot"):
        run_mean_response(data, "robart", None, cfg, 10, derive_stream(7, 2))
    with pytest.raises(MethodError, match="draws"):
        run_mean_response(data, "plugin-bart", None, cfg, 10_000, derive_stream(7, 3))


def test_onestep_uses_per_draw_propensities():
    sim = gen_missing_data(100, DESIGNS["I"], derive_stream(8, 0))
    data = sim.data
    cfg = small_bart(num_draws=60)
    pi_draws = run_bart_binary(data.x, data.r, cfg, derive_stream(8, 1))
    pilots = MeanResponsePilots(pi_draws=pi_draws)
    ds = run_mean_response(data, "onestep", pilots, cfg, 60, derive_stream(8, 2))
    assert ds.num_draws == 60
    assert np.all(np.isfinite(ds.draws))


def test_export_drawset_csv_roundtrip(tmp_path):
    chi = np.array([1.5, 2.5, 3.5])
    b = np.array([0.5, 0.25, 0.125])
    ds = DrawSet(chi - b, "robart", "mean", chi_raw=chi, b_hat=b)
    path = tmp_path / "draws.csv"
    export_drawset_csv(ds, path)
    rows = path.read_text().strip().splitlines()
    assert rows[0] == "draw_index,chi,b_hat,chi_corrected"
    parsed = np.array([[float(v) for v in row.split(",")[1:]] for row in rows[1:]])
    assert np.array_equal(parsed[:, 0], chi)
    assert np.array_equal(parsed[:, 1], b)
    assert np.array_equal(parsed[:, 2], chi - b)


# --------------------------------------------------------------------------
# treatment-effect drivers


def gen_treatment(n, seed, effect=1.0, pi=0.5, m0_fn=None):
    rng = derive_stream(900, seed).generator
    x = rng.normal(size=(n, 2))
    d = (rng.random(n) < pi).astype(int)
    m0 = m0_fn(x) if m0_fn else np.zeros(n)
    y = m0 + effect * d + 0.5 * rng.standard_normal(n)
    return TreatmentDataset(y, d, x), m0


def test_ate_null_effect_centers_at_zero():
    data, m0 = gen_treatment(300, 1, effect=0.0, m0_fn=lambda x: np.tanh(x[:, 0]))
    cfg = small_bart(num_draws=120)
    pilots = TreatmentPilots(
        propensity=oracle_propensity_pilot(np.full(data.n, 0.5)),
        outcome_table=np.column_stack([m0, m0]),
    )
    ds = run_ate(data, "robart", pilots, cfg, 120, derive_stream(9, 0))
    summ = credible_interval(ds, 0.05)
    assert abs(summ.mean) < 3 * ds.draws.std()


def test_ate_constant_effect_recovered():
    data, m0 = gen_treatment(400, 2, effect=1.0)
    cfg = small_bart(num_draws=120)
    pilots = TreatmentPilots(
        propensity=oracle_propensity_pilot(np.full(data.n, 0.5)),
        outcome_table=np.column_stack([m0, m0 + 1.0]),
    )
    for method in ("plugin-bart", "robart"):
        ds = run_ate(data, method, pilots, cfg, 120, derive_stream(10, 0))
        summ = credible_interval(ds, 0.05)
        assert abs(summ.mean - 1.0) < max(4 * ds.draws.std(), 0.2)


def test_att_gamma_hand_check_two_rows():
    # treated row contributes (1/pi_bar) * (y - m0); control row the weighted residual
    data = TreatmentDataset(
        np.array([2.0, 1.0]), np.array([1, 0]), np.zeros((2, 1))
    )
    m0_draws = PosteriorDraws(
        fitted=np.zeros((1, 1)), sigma=None, acceptance={},
        fitted_test=np.array([[0.5, 0.75]]),
    )
    W = np.array([[0.5, 0.5]])
    pilots = TreatmentPilots(
        propensity=oracle_propensity_pilot(np.array([0.5, 0.2])),
        outcome_table=np.column_stack([np.array([0.5, 0.75]), np.zeros(2)]),
    )
    ds = run_att(data, "robart", pilots, small_bart(num_draws=1), 1, derive_stream(11, 0),
                 m_draws=m0_draws, weights=W)
    pi_bar = 0.5
    gamma_t = 1 / pi_bar
    gamma_c = -(1 / pi_bar) * (0.2 / 0.8)
    theta = 0.5 * gamma_t * (2.0 - 0.5) + 0.5 * gamma_c * (1.0 - 0.75)
    assert ds.chi_raw[0] == pytest.approx(theta, abs=1e-12)
    assert ds.b_hat[0] == 0.0  # pilot table equals the draw exactly


def test_att_matches_ate_under_homogeneous_effect():
    data, m0 = gen_treatment(800, 3, effect=1.0, m0_fn=lambda x: 0.5 * x[:, 0])
    cfg = small_bart(num_trees=30, num_draws=150)
    pilots = TreatmentPilots(
        propensity=oracle_propensity_pilot(np.full(data.n, 0.5)),
        outcome_table=np.column_stack([m0, m0 + 1.0]),
    )
    ate = credible_interval(run_ate(data, "robart", pilots, cfg, 150, derive_stream(12, 0)), 0.05)
    att = credible_interval(run_att(data, "robart", pilots, cfg, 150, derive_stream(12, 1)), 0.05)
    joint_sd = math.sqrt(ate.length**2 + att.length**2) / 3.92
    assert abs(ate.mean - att.mean) < 3 * joint_sd


def test_treatment_driver_validation():
    data, _ = gen_treatment(50, 4)
    cfg = small_bart(num_draws=20)
    with pytest.raises(MethodError, match="unknown method"):
        run_ate(data, "nope", None, cfg, 10, derive_stream(13, 0))
    with pytest.raises(MethodError, match="propensity pilot"):
        run_ate(data, "robart", None, cfg, 10, derive_stream(13, 1))
    with pytest.raises(MethodError, match="propensity pilot"):
        run_att(data, "robart", None, cfg, 10, derive_stream(13, 2))
