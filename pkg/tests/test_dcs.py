import json
import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from nigdcs.dcs import (
    DcsCoefficients,
    DcsState,
    FitOptions,
    ModelFit,
    _density_scores_slopes,
    _loglik,
    contraction_rates,
    dcs_filter,
    dcs_update,
    fit_mle,
    forecast_one_step,
    inverse_link,
    link,
    log_cond_density,
    scores,
    simulate_dcs,
)
from nigdcs.errors import DataError, DomainError, EstimationError
from nigdcs.nig import NigParams, nig_fit_static, nig_log_pdf, nig_moments, nig_quantile, nig_sample

TRUE = DcsCoefficients(
    A=[0.0, -0.23, 0.0, -0.02],
    B=[0.0, 0.95, 0.9, 0.9],
    C=[0.0, 0.05, 0.02, 0.01],
)


def mp_log_density(mu, lam, v, eta, r):
    """Log-density written from the NIG formula in extended precision."""
    delta = mp.e**lam
    alpha = mp.e ** (v - lam)
    beta = alpha * mp.tanh(eta)
    gamma = mp.sqrt(alpha**2 - beta**2)
    s = mp.sqrt(delta**2 + (r - mu) ** 2)
    return mp.log(alpha * delta * mp.besselk(1, alpha * s) / (mp.pi * s)) + delta * gamma + beta * (r - mu)


def fd_scores(state, r, h=1e-6):
    """Central differences of the extended-precision log-density, step ``h``."""
    with mp.workdps(40):
        x = [mp.mpf(float(c)) for c in state]
        out = []
        for i in range(4):
            up, dn = list(x), list(x)
            up[i] += h
            dn[i] -= h
            out.append((mp_log_density(*up, mp.mpf(r)) - mp_log_density(*dn, mp.mpf(r))) / (2 * h))
        out[0] *= mp.e ** (2 * x[1])
        return np.array([float(o) for o in out])


def random_pairs(n, seed):
    rng = np.random.default_rng(seed)
    states = np.column_stack(
        [rng.uniform(-1, 1, n), rng.uniform(-3, 1, n), rng.uniform(-2, 3, n), rng.uniform(-2, 2, n)]
    )
    r = states[:, 0] + np.exp(states[:, 1]) * rng.standard_t(4, n) * 2.0
    return states, r


# ---------------------------------------------------------------------------
# link
# ---------------------------------------------------------------------------


def test_link_origin():
    assert link(DcsState(0, 0, 0, 0)) == NigParams(0.0, 1.0, 1.0, 0.0)


def test_link_saturated_skew_stays_inside():
    p = link(DcsState(0, math.log(2), math.log(2), 40.0))
    assert abs(p.beta) < p.alpha
    assert p.beta / p.alpha > 1 - 1e-12
    p = link(DcsState(0, 0, 0, -40.0))
    assert abs(p.beta) < p.alpha


def test_link_arithmetic():
    p = link(DcsState(0, 1, 3, 0))
    assert p.delta == pytest.approx(math.e, rel=1e-15)
    assert p.alpha == pytest.approx(math.e**2, rel=1e-15)


def test_link_rejects_non_finite():
    with pytest.raises(DomainError):
        link(DcsState(0, np.nan, 0, 0))


def test_inverse_link_roundtrip():
    p = NigParams(0.1, 0.7, 3.0, -1.2)
    q = link(inverse_link(p))
    for name in ("mu", "delta", "alpha", "beta"):
        assert getattr(q, name) == pytest.approx(getattr(p, name), rel=1e-14)


# ---------------------------------------------------------------------------
# density
# ---------------------------------------------------------------------------


def test_log_density_at_origin():
    k1, _ = integrate.quad(lambda t: math.exp(-math.cosh(t)) * math.cosh(t), 0, 10, epsabs=0, epsrel=1e-13)
    want = math.log(math.e * k1 / math.pi)
    assert log_cond_density(DcsState(0, 0, 0, 0), 0.0) == pytest.approx(want, rel=1e-12)
    assert want == pytest.approx(-0.6524, abs=1e-4)


def test_log_density_matches_nig_formula():
    states, r = random_pairs(100, 1)
    for s, x in zip(states, r):
        assert log_cond_density(s, x) == pytest.approx(nig_log_pdf(link(s), x), rel=1e-10, abs=1e-10)


def test_log_density_matches_extended_precision():
    states, r = random_pairs(50, 2)
    for s, x in zip(states, r):
        with mp.workdps(30):
            want = float(mp_log_density(*map(mp.mpf, s), mp.mpf(x)))
        assert log_cond_density(s, x) == pytest.approx(want, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("eta", [-3.0, 0.0, 3.0])
@pytest.mark.parametrize("sign", [-1.0, 1.0])
def test_log_density_far_tail_finite(eta, sign):
    s = DcsState(0.2, -1.0, 1.5, eta)
    val = log_cond_density(s, 0.2 + sign * 50 * math.exp(-1.0))
    assert math.isfinite(val)
    with mp.workdps(30):
        want = float(mp_log_density(*map(mp.mpf, s), mp.mpf(0.2 + sign * 50 * math.exp(-1.0))))
    assert val == pytest.approx(want, rel=1e-11)


def test_log_density_rejects_non_finite_observation():
    with pytest.raises(DomainError):
        log_cond_density(DcsState(0, 0, 0, 0), np.inf)


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------


def test_location_score_vanishes_at_symmetric_centre():
    assert scores(DcsState(0, 0, 0, 0), 0.0).s_mu == 0.0


def test_skew_score_read_off():
    assert scores(DcsState(0, 0, 0, 0), 0.3).s_eta == pytest.approx(0.3, abs=1e-15)


def test_scores_at_fixed_point_against_fd():
    s = DcsState(0.1, -0.5, 0.8, 0.4)
    got = np.array(scores(s, 0.7))
    np.testing.assert_allclose(got, fd_scores(s, 0.7), rtol=1e-6, atol=1e-9)


def test_scores_against_fd_random_pairs():
    states, r = random_pairs(200, 3)
    for s, x in zip(states, r):
        got = np.array(scores(s, x))
        want = fd_scores(s, x)
        assert np.all(np.abs(got - want) <= 1e-6 * np.abs(want) + 1e-9), (s, x, got, want)


def test_scores_have_zero_mean():
    p = NigParams(0.05, 0.8, 2.5, -0.6)
    s = inverse_link(p)
    xs = nig_sample(p, 400_000, seed=5)
    sc = np.array([scores(s, x) for x in xs[:100_000]])
    se = sc.std(axis=0) / math.sqrt(sc.shape[0])
    assert np.all(np.abs(sc.mean(axis=0)) < 4 * se)


def test_score_slopes_against_fd():
    """Analytic derivatives of the scores used by the contraction check."""
    states, r = random_pairs(100, 4)
    sc, sl = np.empty(4), np.empty(5)
    h = 1e-5
    for s, x in zip(states, r):
        _density_scores_slopes(*s, x, sc, sl)
        fd = np.empty(5)
        for i in range(4):
            up, dn = s.copy(), s.copy()
            up[i] += h
            dn[i] -= h
            fd[i] = (scores(up, x)[i] - scores(dn, x)[i]) / (2 * h)
        up, dn = s.copy(), s.copy()
        up[2] += h
        dn[2] -= h
        fd[4] = (scores(up, x)[1] - scores(dn, x)[1]) / (2 * h)
        np.testing.assert_allclose(sl, fd, rtol=1e-5, atol=1e-7)


@given(
    st.floats(-1, 1), st.floats(-4, 2), st.floats(-3, 4), st.floats(-4, 4), st.floats(-20, 20)
)
@settings(max_examples=300, deadline=None)
def test_scores_finite(mu, lam, v, eta, z):
    s = DcsState(mu, lam, v, eta)
    assert np.all(np.isfinite(scores(s, mu + z * math.exp(lam))))
    assert math.isfinite(log_cond_density(s, mu + z * math.exp(lam)))


# ---------------------------------------------------------------------------
# recursion
# ---------------------------------------------------------------------------


def test_update_without_dynamics_returns_intercepts():
    c = DcsCoefficients([0.1, 0.2, 0.3, 0.4], np.zeros(4), np.zeros(4))
    nxt = dcs_update(c, DcsState(5, 5, 5, 5), (1, 1, 1, 1), q=0.25)
    assert nxt == DcsState(0.1, 0.45, 0.3, 0.4)


def test_update_arithmetic():
    c = DcsCoefficients(np.full(4, 0.2), np.full(4, 0.5), np.zeros(4))
    assert dcs_update(c, DcsState(0, 1, 0, 0), (0, 0, 0, 0)).lam == pytest.approx(0.7, abs=1e-15)


def test_update_seasonal_shift_only_in_log_scale():
    s, sc = DcsState(0.1, 0.2, 0.3, 0.4), (0.5, -0.5, 0.25, 1.0)
    a = np.array(dcs_update(TRUE, s, sc, 0.0))
    b = np.array(dcs_update(TRUE, s, sc, 0.1))
    np.testing.assert_array_equal(np.delete(a, 1), np.delete(b, 1))
    assert b[1] - a[1] == pytest.approx(0.1, abs=1e-15)


def test_filter_without_dynamics_is_constant():
    c = DcsCoefficients([0.01, -0.5, 0.3, 0.1], np.zeros(4), np.zeros(4))
    r = np.random.default_rng(0).normal(size=30)
    f = dcs_filter(c, r, init=DcsState(1, 1, 1, 1))
    np.testing.assert_array_equal(f.states[1:], np.tile(c.A, (29, 1)))


def test_filter_single_observation():
    init = DcsState(0.1, -0.2, 0.5, 0.3)
    f = dcs_filter(TRUE, [0.4], init=init)
    assert f.log_likelihood == log_cond_density(init, 0.4)
    assert f.n_obs == 1


def test_filter_loglik_is_sum_of_terms():
    r = simulate_dcs(TRUE, 500, seed=1)
    f = dcs_filter(TRUE, r)
    terms = [log_cond_density(s, x) for s, x in zip(f.state_path, r)]
    assert f.log_likelihood == pytest.approx(math.fsum(terms), rel=1e-12)
    assert len(f.score_path) == len(f.state_path) == r.size


def test_filter_deterministic():
    r = simulate_dcs(TRUE, 300, seed=2)
    a, b = dcs_filter(TRUE, r), dcs_filter(TRUE, r)
    assert np.array_equal(a.states, b.states)
    assert a.log_likelihood == b.log_likelihood


def test_filter_additive_over_concatenation():
    r = simulate_dcs(TRUE, 400, seed=3)
    whole = dcs_filter(TRUE, r)
    head = dcs_filter(TRUE, r[:250])
    tail = dcs_filter(TRUE, r[250:], init=forecast_one_step(head, r[249]))
    assert whole.log_likelihood == pytest.approx(head.log_likelihood + tail.log_likelihood, rel=1e-13)
    np.testing.assert_array_equal(whole.states[250:], tail.states)


def test_filter_reproduces_simulated_states():
    r, states = simulate_dcs(TRUE, 400, seed=4, return_states=True)
    np.testing.assert_allclose(dcs_filter(TRUE, r).states, states, rtol=0, atol=1e-12)


def test_filtered_states_link_to_valid_params():
    r = simulate_dcs(TRUE, 1000, seed=5)
    for s in dcs_filter(TRUE, r).state_path:
        p = link(s)
        assert p.delta > 0 and abs(p.beta) < p.alpha


def test_seasonal_constant_folds_into_intercept():
    r = simulate_dcs(TRUE, 300, seed=6)
    q = np.sin(np.arange(300) / 20.0) * 0.1
    c = 0.07
    init = DcsState(0.0, -4.6 + q[0] + c, 0.0, -0.2)
    shifted = dcs_filter(TRUE, r, q + c, init=init)
    folded = DcsCoefficients(TRUE.A + [0, c, 0, 0], TRUE.B, TRUE.C)
    other = dcs_filter(folded, r, q, init=init)
    np.testing.assert_allclose(shifted.states, other.states, rtol=0, atol=1e-12)


def test_filter_names_bad_index():
    r = np.zeros(10)
    r[7] = np.nan
    with pytest.raises(DataError, match="index 7"):
        dcs_filter(TRUE, r)


def test_filter_rejects_misaligned_seasonal():
    with pytest.raises(DataError):
        dcs_filter(TRUE, np.zeros(10), np.zeros(9))


def test_average_loglik_matches_entropy_rate():
    r, states = simulate_dcs(TRUE, 5000, seed=7, return_states=True)
    f = dcs_filter(TRUE, r)
    rng = np.random.default_rng(70)
    fresh = [log_cond_density(s, nig_sample(link(s), 1, rng)[0]) for s in states]
    assert abs(f.log_likelihood / r.size - np.mean(fresh)) < 0.05


def test_contraction_rates_negative_under_true_coefficients():
    r = simulate_dcs(TRUE, 2000, seed=3)
    rates = contraction_rates(dcs_filter(TRUE, r), r)
    assert np.all(rates < 0)


def test_likelihood_rejects_non_contracting_filter():
    r = simulate_dcs(TRUE, 2000, seed=3)
    c = DcsCoefficients(TRUE.A, [0.5, 0.95, 0.9, 0.9], [3.0, 0.05, 0.02, 0.01])
    f = dcs_filter(c, r)
    assert f.clamp_count == 0
    assert contraction_rates(f, r)[0] > 0
    bound = 100 * np.abs(r).max()
    assert _loglik(c.A, c.B, c.C, r, np.zeros(r.size), np.array(c.unconditional()), bound) == -1e300
    val = _loglik(TRUE.A, TRUE.B, TRUE.C, r, np.zeros(r.size), np.array(TRUE.unconditional()), bound)
    assert val == pytest.approx(dcs_filter(TRUE, r).log_likelihood, rel=1e-12)


def test_contraction_rates_checks_length():
    r = simulate_dcs(TRUE, 50, seed=3)
    with pytest.raises(DataError):
        contraction_rates(dcs_filter(TRUE, r), r[:-1])


# ---------------------------------------------------------------------------
# forecasting
# ---------------------------------------------------------------------------


def test_forecast_arithmetic():
    c = DcsCoefficients(np.full(4, 0.2), np.full(4, 0.5), np.zeros(4))
    f = dcs_filter(c, [0.1], init=DcsState(0, 1, 0, 0))
    assert forecast_one_step(f, 0.1).lam == pytest.approx(0.7, abs=1e-15)


def test_forecast_applies_last_score_and_seasonal():
    r = simulate_dcs(TRUE, 100, seed=8)
    f = dcs_filter(TRUE, r)
    want = dcs_update(TRUE, f.final_state, scores(f.final_state, r[-1]), 0.05)
    assert forecast_one_step(f, r[-1], 0.05) == want
    p = link(want)
    assert abs(p.beta) < p.alpha


def test_forecast_on_empty_fit_fails():
    empty = ModelFit(TRUE, 0.0, np.empty((0, 4)), np.empty((0, 4)), np.empty(0))
    with pytest.raises(DataError):
        forecast_one_step(empty, 0.0)


def test_forecast_var_coverage():
    r, states = simulate_dcs(TRUE, 5000, seed=9, return_states=True)
    f = dcs_filter(TRUE, r[:-1])
    preds = np.vstack([f.states[1:], forecast_one_step(f, r[-2])])
    np.testing.assert_allclose(preds, states[1:], atol=1e-12)
    var = np.array([nig_quantile(link(s), 0.05) for s in preds])
    rate = np.mean(r[1:] < var)
    assert abs(rate - 0.05) <= 0.015


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def test_simulate_without_dynamics_is_iid_nig():
    c = DcsCoefficients([0.01, -0.5, 0.8, -0.3], np.zeros(4), np.zeros(4))
    r, states = simulate_dcs(c, 3000, seed=1, return_states=True)
    np.testing.assert_array_equal(states, np.tile(c.A, (3000, 1)))
    mean, var, _, _ = nig_moments(link(DcsState(*c.A)))
    assert abs(r.mean() - mean) < 4 * math.sqrt(var / r.size)


def test_simulate_reproducible():
    assert np.array_equal(simulate_dcs(TRUE, 200, seed=4), simulate_dcs(TRUE, 200, seed=4))
    assert not np.array_equal(simulate_dcs(TRUE, 200, seed=4), simulate_dcs(TRUE, 200, seed=5))


def test_simulated_variance_matches_stationary_law():
    c = DcsCoefficients([0.0, -0.3, 0.3, 0.0], [0.5, 0.5, 0.5, 0.5], np.zeros(4))
    r = simulate_dcs(c, 100_000, seed=2)
    var = nig_moments(link(c.unconditional()))[1]
    assert abs(r.var() / var - 1) < 0.10


def test_simulate_rejects_explosive_coefficients():
    c = DcsCoefficients(np.zeros(4), [0.0, 1.0, 0.5, 0.5], np.zeros(4))
    with pytest.raises(DomainError, match="explosive"):
        simulate_dcs(c, 10)
    with pytest.raises(DomainError):
        simulate_dcs(TRUE, 0)


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------


def test_fit_requires_minimum_length():
    with pytest.raises(DataError):
        fit_mle(np.random.default_rng(0).normal(size=100))


def test_fit_never_worse_than_start():
    r = simulate_dcs(TRUE, 400, seed=11)
    opts = FitOptions(restarts=0, maxiter=300, raise_on_failure=False)
    fit = fit_mle(r, options=opts)
    assert fit.log_likelihood >= fit.convergence["objective_start"] - 1e-9


def test_fit_failure_carries_best_so_far():
    r = simulate_dcs(TRUE, 400, seed=12)
    with pytest.raises(EstimationError) as err:
        fit_mle(r, options=FitOptions(restarts=0, maxiter=5))
    best = err.value.best
    assert isinstance(best, ModelFit)
    assert best.convergence["converged"] is False
    assert best.log_likelihood >= best.convergence["objective_start"] - 1e-9


def test_static_fit_agrees_with_constant_law():
    p = NigParams(0.0005, 0.012, 90.0, -12.0)
    r = nig_sample(p, 2000, seed=13)
    fit = fit_mle(r, options=FitOptions(fixed_c=np.zeros(4), restarts=1))
    got = link(fit.coefficients.unconditional())
    ref = nig_fit_static(r, method="mle")
    # compare on the dimensionless scale of the shape parameters
    assert abs(got.delta * got.alpha - ref.delta * ref.alpha) <= 0.1 * ref.delta * ref.alpha
    assert abs(got.beta / got.alpha - ref.beta / ref.alpha) <= 0.1
    assert abs(got.mu - ref.mu) <= 0.1 * ref.delta
    assert abs(got.delta / ref.delta - 1) <= 0.1


def test_fit_recovers_log_scale_dynamics():
    r = simulate_dcs(TRUE, 3000, seed=14)
    fit = fit_mle(r, options=FitOptions(restarts=1))
    c = fit.coefficients
    assert fit.convergence["converged"]
    assert abs(c.B[1] - TRUE.B[1]) <= 0.05
    assert c.C[1] > 0
    assert fit.log_likelihood >= dcs_filter(TRUE, r).log_likelihood - 0.5
    assert np.all(contraction_rates(fit, r) < 0)


def test_model_serialises():
    r = simulate_dcs(TRUE, 50, seed=1)
    doc = json.loads(dcs_filter(TRUE, r).to_json())
    back = DcsCoefficients.from_dict(doc["coefficients"])
    for name in "ABC":
        np.testing.assert_array_equal(getattr(back, name), getattr(TRUE, name))
    assert set(doc) >= {"coefficients", "final_state", "log_likelihood", "convergence", "clamp_count"}


def test_coefficients_validate_shape():
    with pytest.raises(DomainError):
        DcsCoefficients(np.zeros(3), np.zeros(4), np.zeros(4))
