import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from cfho import channel as ch

P = ch.ChannelParams()
AG = ch.AgingParams()


def test_q_function_values():
    assert ch.q_function(1.0) == pytest.approx(0.158655, abs=1e-6)
    assert ch.q_function(0.0) == 0.5
    assert ch.q_function(-1.0) + ch.q_function(1.0) == pytest.approx(1.0)


def test_representative_lsf_levels():
    # path loss at 150 m / 50 m / 200 m planar distance with 13.5 m height separation
    assert P.beta_threshold == pytest.approx(7.61e-9, rel=2e-3)
    assert P.beta_good == pytest.approx(4.40e-7, rel=2e-3)
    assert P.beta_bad == pytest.approx(2.57e-9, rel=2e-3)
    assert ch.path_loss(150.0, P) == pytest.approx((math.hypot(150, 13.5) / 1.1) ** -3.8)


def test_params_validation():
    with pytest.raises(ValueError):
        ch.ChannelParams(iota=1.0)
    with pytest.raises(ValueError):
        ch.ChannelParams(sigma_sh_db=0.0)
    with pytest.raises(ValueError):
        ch.ChannelParams(beta_threshold=1e-6)
    with pytest.raises(ValueError):
        ch.AgingParams(n_est=17)
    with pytest.raises(ValueError):
        ch.path_loss(-1.0, P)


def test_noise_and_doppler():
    assert 10 * math.log10(AG.noise_power * 1000) == pytest.approx(-92.99, abs=0.01)
    assert AG.doppler_fD == pytest.approx(60.04, abs=0.01)
    assert ch.dbm_to_w(30) == pytest.approx(1.0)
    assert AG.estimation_lag == 15


def test_shadowing_correlation_example():
    assert ch.shadowing_correlation(10.0, P) == pytest.approx(0.5 ** 0.1)
    assert ch.shadowing_correlation(10.0, P) == pytest.approx(0.933, abs=5e-4)
    assert ch.shadowing_correlation(0.0, P) == 1.0


def test_ar1_keeps_stationary_variance():
    rng = np.random.default_rng(0)
    sh = rng.standard_normal(200_000) * P.sigma_sh_db
    for _ in range(20):
        sh = ch.ar1_shadowing_step(sh, 10.0, P, rng)
    assert sh.std() == pytest.approx(P.sigma_sh_db, rel=0.01)
    assert ch.ar1_shadowing_step(sh[:5], 0.0, P, rng) == pytest.approx(sh[:5])


def test_link_record_state():
    good = ch.LinkRecord.make(3, 0.0, P.beta_threshold * 2, P)
    assert good.good and good.beta_linear == pytest.approx(2 * P.beta_threshold)
    rng = np.random.default_rng(1)
    moved = ch.advance_shadowing(good, 10.0, P, rng, path_loss_linear=P.beta_bad)
    assert moved.du_id == 3 and moved.path_loss_linear == P.beta_bad


def _mc_pair(sh0_samples, a_next, rho, rng):
    y = rho * sh0_samples + math.sqrt(1 - rho * rho) * P.sigma_sh_db * rng.standard_normal(sh0_samples.size)
    return np.mean(y > a_next)


def test_known_transition_matches_monte_carlo():
    rng = np.random.default_rng(11)
    rho = ch.shadowing_correlation(10.0, P)
    for _ in range(10):
        sh, a_next = rng.uniform(-10, 10), rng.uniform(-8, 8)
        mc = _mc_pair(np.full(1_000_000, sh), a_next, rho, rng)
        assert ch.transition_probs_known(sh, 0.0, a_next, 10.0, P) == pytest.approx(mc, abs=2e-3)


def test_event_transition_matches_monte_carlo():
    rng = np.random.default_rng(12)
    rho = ch.shadowing_correlation(10.0, P)
    for _ in range(10):
        a_prev = rng.uniform(-6, 6)
        a_next = a_prev + rng.uniform(-2, 2)
        sig = P.sigma_sh_db
        noise = math.sqrt(1 - rho * rho) * sig
        x_good = stats.truncnorm.rvs(a_prev / sig, np.inf, scale=sig, size=1_000_000, random_state=rng)
        x_bad = stats.truncnorm.rvs(-np.inf, a_prev / sig, scale=sig, size=1_000_000, random_state=rng)
        p11, p01 = ch.transition_probs_event(a_prev, a_next, 10.0, P)
        assert p11 == pytest.approx(np.mean(rho * x_good + noise * rng.standard_normal(x_good.size) > a_next), abs=2e-3)
        assert p01 == pytest.approx(np.mean(rho * x_bad + noise * rng.standard_normal(x_bad.size) > a_next), abs=2e-3)

def test_event_transition_matches_adaptive_quad_in_tails():
    rho = ch.shadowing_correlation(10.0, P)
    sc = P.sigma_sh_db * math.sqrt(1 - rho * rho)
    for a_prev, a_next in [(12.0, 13.0), (-30.0, -29.0), (40.0, 38.0)]:
        f = lambda x: stats.norm.pdf(x, 0, 6) * stats.norm.sf((a_next - rho * x) / sc)
        up = integrate.quad(f, a_prev, np.inf, epsabs=1e-14)[0] / stats.norm.sf(a_prev / 6)
        dn = integrate.quad(f, -np.inf, a_prev, epsabs=1e-14)[0] / stats.norm.cdf(a_prev / 6)
        p11, p01 = ch.transition_probs_event(a_prev, a_next, 10.0, P)
        assert p11 == pytest.approx(up, abs=1e-6)
        assert p01 == pytest.approx(dn, abs=1e-6)


def test_event_transition_frozen_channel_closed_form():
    # no movement: the state persists exactly
    p11, p01 = ch.transition_probs_event(2.0, 2.0, 0.0, P)
    assert (p11, p01) == (1.0, 0.0)
    assert ch.transition_probs_known(3.0, 0.0, 2.0, 0.0, P) == 1.0


def test_event_transition_prior_parameters():
    # a prior centred far above the margin makes Bad-state conditioning the only uncertain part
    p11, p01 = ch.transition_probs_event(0.0, 0.0, 10.0, P, prior_mean_db=20.0, prior_std_db=2.0)
    assert p11 > 0.99
    with pytest.raises(ValueError):
        ch.transition_probs_event(0.0, 0.0, 10.0, P, prior_std_db=0.0)


def test_quadrature_failure_is_reported():
    with pytest.raises(ch.QuadratureError):
        ch.transition_probs_event(0.0, 0.5, 10.0, P, tol=1e-16, max_panels=2)


@settings(max_examples=200, deadline=None)
@given(a_prev=st.floats(-60, 60), step=st.floats(-5, 5), dd=st.floats(0.5, 50))
def test_event_probabilities_valid_and_ordered(a_prev, step, dd):
    p11, p01 = ch.transition_probs_event(a_prev, a_prev + step, dd, P)
    assert 0.0 <= p01 <= 1.0 and 0.0 <= p11 <= 1.0
    # positive correlation: being Good now never lowers the chance of Good next
    assert p11 >= p01 - 1e-9


def test_event_vectorised_matches_scalar():
    a = np.array([-5.0, 0.0, 3.0])
    b = np.array([-4.0, 1.0, 2.0])
    p11, p01 = ch.transition_probs_event(a, b, 10.0, P)
    for i in range(3):
        s11, s01 = ch.transition_probs_event(a[i], b[i], 10.0, P)
        # panel refinement is shared across a batch, so agreement is at the quadrature tolerance
        assert p11[i] == pytest.approx(s11, abs=1e-6) and p01[i] == pytest.approx(s01, abs=1e-6)


def test_jakes_correlation():
    assert ch.jakes_rho(0, AG) == 1.0
    # first zero of J0 at 2.404826
    lag = 2.404826 / (2 * math.pi * AG.doppler_fD * AG.sample_period_Ts)
    assert abs(ch.jakes_rho(lag, AG)) < 1e-6
    assert ch.jakes_rho(-5, AG) == ch.jakes_rho(5, AG)


def test_estimation_variance_bounds():
    beta = 1e-7
    psi = ch.estimation_variance(beta, [], 0, AG)
    assert 0 < psi < beta
    # contamination lowers the estimate quality
    assert ch.estimation_variance(beta, [5e-8, 5e-8], 0, AG) < psi
    with pytest.raises(ValueError):
        ch.estimation_variance(0.0, [], 0, AG)


def _rate_oracle(betas, aging, M):
    # direct scalar evaluation of the per-symbol SINR sum
    rho_est = ch.jakes_rho(aging.n_est - aging.pilot_instant, aging)
    sig2 = aging.noise_power
    amp = sum(math.sqrt(rho_est ** 2 * aging.p_uplink * b * b / sig2) for b in betas)
    unc = M * aging.p_downlink * sum(betas)
    total = 0.0
    for n in range(aging.n_est, aging.tau_c + 1):
        rn = ch.jakes_rho(n - aging.n_est, aging)
        total += math.log2(1 + M * aging.p_downlink * rn * rn * amp * amp / (unc + sig2))
    return total / aging.tau_c


def test_snr_rate_matches_scalar_oracle():
    for betas in ([P.beta_good], [P.beta_bad], [P.beta_good, P.beta_bad, 3e-9]):
        got = ch.snr_rate(np.array(betas), np.ones(len(betas)), AG, 8)
        assert got == pytest.approx(_rate_oracle(betas, AG, 8), rel=1e-12)
    assert ch.snr_rate(np.array([P.beta_good]), np.ones(1), AG, 8) == pytest.approx(12.31, abs=0.01)
    assert ch.snr_rate(np.array([P.beta_bad]), np.ones(1), AG, 8) == pytest.approx(5.59, abs=0.01)


def test_snr_rate_disconnected_links_ignored():
    b = np.array([P.beta_good, P.beta_bad])
    assert ch.snr_rate(b, np.array([1, 0]), AG, 8) == pytest.approx(ch.snr_rate(b[:1], np.ones(1), AG, 8))
    assert ch.snr_rate(b, np.zeros(2), AG, 8) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-12, 1e-5), min_size=1, max_size=6), st.floats(1e-12, 1e-5))
def test_rate_increases_with_added_link(betas, extra):
    b = np.array(betas)
    before = ch.snr_rate(b, np.ones_like(b), AG, 8)
    after = ch.snr_rate(np.append(b, extra), np.ones(len(b) + 1), AG, 8)
    assert after >= before - 1e-12
