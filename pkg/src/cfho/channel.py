"""Large-scale fading, two-state quantisation and channel aging.

Shadowing is tracked per link in dB as a Gauss-Markov process whose
one-step correlation decays exponentially with travelled distance.  Links
are Good when their LSF exceeds ``beta_threshold``; the shadowing margin
``a_db = beta_threshold[dB] - PL[dB]`` is the shadowing level a link must
exceed to be Good at a given position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import special

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class ChannelParams:
    d0: float = 1.1
    alpha_pl: float = 3.8
    d_h: float = 13.5
    sigma_sh_db: float = 6.0
    d_decorr: float = 100.0
    iota: float = 0.5
    # representative LSF levels; None means "path loss at the matching *_distance"
    beta_threshold: float | None = None
    beta_good: float | None = None
    beta_bad: float | None = None
    threshold_distance: float = 150.0
    good_distance: float = 50.0
    bad_distance: float = 200.0

    def __post_init__(self):
        for name, dist in (("beta_threshold", self.threshold_distance),
                           ("beta_good", self.good_distance),
                           ("beta_bad", self.bad_distance)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, float(_path_loss(dist, self.d0, self.alpha_pl, self.d_h)))
        if not 0.0 < self.iota < 1.0:
            raise ValueError("iota must lie in (0, 1)")
        if self.sigma_sh_db <= 0:
            raise ValueError("sigma_sh_db must be positive")
        if self.d_h <= 0 or self.d0 <= 0 or self.d_decorr <= 0:
            raise ValueError("distances must be positive")
        if not self.beta_bad < self.beta_threshold < self.beta_good:
            raise ValueError("need beta_bad < beta_threshold < beta_good")

    @property
    def threshold_db(self) -> float:
        return 10.0 * math.log10(self.beta_threshold)


@dataclass(frozen=True)
class LinkRecord:
    du_id: int
    shadowing_db: float
    path_loss_linear: float
    beta_linear: float
    good: bool

    @classmethod
    def make(cls, du_id: int, shadowing_db: float, path_loss_linear: float,
             params: ChannelParams) -> "LinkRecord":
        beta = path_loss_linear * 10.0 ** (shadowing_db / 10.0)
        return cls(du_id, float(shadowing_db), float(path_loss_linear), float(beta),
                   bool(beta > params.beta_threshold))


@dataclass(frozen=True)
class AgingParams:
    carrier_hz: float = 1.8e9
    sample_period_Ts: float = 66.7e-6
    user_speed: float = 10.0
    tau_c: int = 200
    tau_p: int = 16
    n_est: int = 16
    pilot_instant: int = 1
    p_uplink: float = 0.1
    p_downlink: float = 1.0
    noise_power: float | None = None

    def __post_init__(self):
        if self.noise_power is None:
            object.__setattr__(self, "noise_power", noise_power_w())
        if not 0 < self.n_est <= self.tau_p < self.tau_c:
            raise ValueError("need 0 < n_est <= tau_p < tau_c")
        if not 1 <= self.pilot_instant <= self.n_est:
            raise ValueError("pilot_instant must lie in [1, n_est]")
        if self.p_uplink <= 0 or self.p_downlink <= 0 or self.noise_power <= 0:
            raise ValueError("powers must be positive")

    @property
    def doppler_fD(self) -> float:
        return self.user_speed * self.carrier_hz / SPEED_OF_LIGHT

    @property
    def estimation_lag(self) -> int:
        return self.n_est - self.pilot_instant


def dbm_to_w(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) / 1000.0


def noise_power_w(density_dbm_hz: float = -174.0, noise_figure_db: float = 8.0,
                  bandwidth_hz: float = 20e6) -> float:
    return dbm_to_w(density_dbm_hz + 10.0 * math.log10(bandwidth_hz) + noise_figure_db)


def q_function(x):
    """Standard Gaussian tail probability."""
    return 0.5 * special.erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))


def _path_loss(planar_distance, d0, alpha_pl, d_h):
    d = np.sqrt(np.asarray(planar_distance, dtype=float) ** 2 + d_h ** 2)
    return (d / d0) ** (-alpha_pl)


def path_loss(planar_distance, params: ChannelParams):
    """Linear path-loss gain; ``d_h`` acts as the minimum separation."""
    if np.any(np.asarray(planar_distance) < 0):
        raise ValueError("distance must be non-negative")
    out = _path_loss(planar_distance, params.d0, params.alpha_pl, params.d_h)
    return float(out) if np.ndim(out) == 0 else out


def path_loss_db(planar_distance, params: ChannelParams):
    return 10.0 * np.log10(path_loss(planar_distance, params))


def threshold_margin_db(planar_distance, params: ChannelParams):
    """Shadowing (dB) a link must exceed to be in the Good state at this distance."""
    return params.threshold_db - path_loss_db(planar_distance, params)


def shadowing_correlation(delta_d, params: ChannelParams):
    if np.any(np.asarray(delta_d) < 0):
        raise ValueError("delta_d must be non-negative")
    out = params.iota ** (np.asarray(delta_d, dtype=float) / params.d_decorr)
    return float(out) if np.ndim(out) == 0 else out


def ar1_shadowing_step(shadowing_db, delta_d, params: ChannelParams, rng: np.random.Generator):
    """One Gauss-Markov step for an array of shadowing values (dB)."""
    rho = shadowing_correlation(delta_d, params)
    sh = np.asarray(shadowing_db, dtype=float)
    if rho == 1.0:
        return sh.copy()
    noise = rng.standard_normal(sh.shape) * params.sigma_sh_db
    return rho * sh + math.sqrt(1.0 - rho * rho) * noise


def advance_shadowing(link: LinkRecord, delta_d: float, params: ChannelParams,
                      rng: np.random.Generator, path_loss_linear: float | None = None) -> LinkRecord:
    """Advance one link; ``path_loss_linear`` is the path loss at the new position."""
    sh = float(ar1_shadowing_step(link.shadowing_db, delta_d, params, rng))
    pl = link.path_loss_linear if path_loss_linear is None else path_loss_linear
    return LinkRecord.make(link.du_id, sh, pl, params)


def marginal_good_prob(a_db, params: ChannelParams):
    out = q_function(np.asarray(a_db, dtype=float) / params.sigma_sh_db)
    return float(out) if np.ndim(out) == 0 else out


def transition_probs_known(shadowing_db_prev, a_prev_db, a_next_db, delta_d, params: ChannelParams):
    """P(Good next | current shadowing known exactly).

    ``a_prev_db`` is accepted for symmetry with the event form; the known
    shadowing value already determines the current state.
    """
    rho = shadowing_correlation(delta_d, params)
    sh = np.asarray(shadowing_db_prev, dtype=float)
    a_next = np.asarray(a_next_db, dtype=float)
    if rho == 1.0:
        out = (sh > a_next).astype(float)
    else:
        scale = params.sigma_sh_db * math.sqrt(1.0 - rho * rho)
        out = q_function((a_next - rho * sh) / scale)
    return float(out) if np.ndim(out) == 0 else out


class QuadratureError(RuntimeError):
    pass


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


def _composite_gl(f, lo, hi, panels):
    """Composite 16-point Gauss-Legendre of f over [lo, hi] (arrays), per element."""
    edges = np.linspace(0.0, 1.0, panels + 1)
    left, right = edges[:-1], edges[1:]
    t = (0.5 * (right - left)[:, None] * (_GL_NODES[None, :] + 1.0) + left[:, None]).ravel()
    w = (0.5 * (right - left)[:, None] * _GL_WEIGHTS[None, :]).ravel()
    width = hi - lo
    x = lo[..., None] + width[..., None] * t
    return width * np.sum(f(x) * w, axis=-1)


def _adaptive_integral(f, lo, hi, scale, tol, max_panels):
    """Integral of f over [lo, hi] by panel doubling until |change| <= tol * scale."""
    panels = 1
    prev = _composite_gl(f, lo, hi, panels)
    while True:
        panels *= 2
        cur = _composite_gl(f, lo, hi, panels)
        resid = np.abs(cur - prev)
        if np.all(resid <= tol * scale):
            return cur
        if panels >= max_panels:
            raise QuadratureError(f"quadrature did not converge, residual {np.max(resid / scale):.3e}")
        prev = cur


_PRIOR_SPAN = 10.0  # prior standard deviations kept on each side


def transition_probs_event(a_prev_db, a_next_db, delta_d, params: ChannelParams, *,
                           prior_mean_db=0.0, prior_std_db=None, tol: float = 1e-6,
                           max_panels: int = 256):
    """(p11, p01) conditioned on the current state event only.

    The current shadowing has a Gaussian prior (the stationary marginal by
    default) truncated above ``a_prev_db`` for p11 and below it for p01; the
    conditional Good probability is averaged over that truncated prior.
    ``tol`` bounds the quadrature change of each returned probability.
    """
    sigma = params.sigma_sh_db
    s = sigma if prior_std_db is None else float(prior_std_db)
    if not s > 0:
        raise ValueError("prior_std_db must be > 0")
    rho = shadowing_correlation(delta_d, params)
    a_prev, a_next, mu = np.broadcast_arrays(np.asarray(a_prev_db, dtype=float),
                                             np.asarray(a_next_db, dtype=float),
                                             np.asarray(prior_mean_db, dtype=float))
    z_prev = (a_prev - mu) / s
    cut = special.ndtr(z_prev)  # prior mass in the Bad region
    upper = special.ndtr(-z_prev)

    if rho == 1.0:
        above = q_function((np.maximum(a_prev, a_next) - mu) / s)
        between = np.clip(cut - special.ndtr((a_next - mu) / s), 0.0, None)
        with np.errstate(divide="ignore", invalid="ignore"):
            p11 = np.where(upper > 0, above / upper, (a_prev > a_next).astype(float))
            p01 = np.where(cut > 0, between / cut, (a_prev > a_next).astype(float))
        return _squeeze(p11), _squeeze(p01)

    scale = sigma * math.sqrt(1.0 - rho * rho)
    a_next_e = a_next[..., None]
    mu_e = mu[..., None]

    def weighted(z):
        # z is the standardised prior coordinate
        return special.ndtr(-(a_next_e - rho * (mu_e + s * z)) / scale) * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)

    zc = np.clip(z_prev, -_PRIOR_SPAN, _PRIOR_SPAN)
    lo = np.full_like(zc, -_PRIOR_SPAN)
    hi = np.full_like(zc, _PRIOR_SPAN)
    tiny = 1e-300
    p11 = _adaptive_integral(weighted, zc, hi, np.maximum(upper, tiny), tol, max_panels) / np.maximum(upper, tiny)
    p01 = _adaptive_integral(weighted, lo, zc, np.maximum(cut, tiny), tol, max_panels) / np.maximum(cut, tiny)
    # regions with negligible prior mass collapse to the boundary value
    edge = q_function((a_next - rho * (mu + s * zc)) / scale)
    p11 = np.where(z_prev < _PRIOR_SPAN - 1.0, p11, edge)
    p01 = np.where(z_prev > -_PRIOR_SPAN + 1.0, p01, edge)
    return _squeeze(np.clip(p11, 0.0, 1.0)), _squeeze(np.clip(p01, 0.0, 1.0))


def _squeeze(x):
    return float(x) if np.ndim(x) == 0 else x


def jakes_rho(lag, aging: AgingParams):
    """Temporal correlation J0(2 pi |lag| f_D T_s) between channel uses ``lag`` apart."""
    arg = 2.0 * math.pi * np.abs(np.asarray(lag, dtype=float)) * aging.doppler_fD * aging.sample_period_Ts
    out = special.j0(arg)
    return float(out) if np.ndim(out) == 0 else out


def estimation_variance(beta, copilot_betas, lag_est, aging: AgingParams):
    """LMMSE variance of the estimated channel with pilot contamination.

    The denominator sums the pilot powers of every user on the pilot,
    ``beta`` included; ``copilot_betas`` lists the other users only.
    """
    beta = np.asarray(beta, dtype=float)
    if np.any(beta <= 0):
        raise ValueError("beta must be positive")
    rho = jakes_rho(lag_est, aging)
    others = float(np.sum(copilot_betas)) if len(copilot_betas) else 0.0
    denom = aging.p_uplink * (beta + others) + aging.noise_power
    out = rho * rho * aging.p_uplink * beta * beta / denom
    return float(out) if np.ndim(out) == 0 else out


def single_user_psi(beta, aging: AgingParams, lag_est: int | None = None):
    """Single-user estimate variance used inside the reward (noise-only denominator)."""
    lag = aging.estimation_lag if lag_est is None else lag_est
    rho = jakes_rho(lag, aging)
    beta = np.asarray(beta, dtype=float)
    return rho * rho * aging.p_uplink * beta * beta / aging.noise_power


def snr_rate(beta, connected, aging: AgingParams, num_antennas: int, loads=1.0):
    """SNR-based achievable rate (bits/s/Hz) of a user served by the connected links.

    ``beta`` and ``connected`` broadcast over leading dimensions with links on
    the last axis.  Conjugate beamforming with per-DU power split over
    ``loads`` users; interference from other users is ignored.
    """
    beta = np.asarray(beta, dtype=float)
    a = np.asarray(connected, dtype=float)
    loads = np.asarray(loads, dtype=float)
    psi = single_user_psi(beta, aging)
    gain = num_antennas * aging.p_downlink
    amp = np.sum(a * np.sqrt(psi / loads), axis=-1)
    desired = gain * amp * amp
    uncertainty = gain * np.sum(a * beta / loads, axis=-1)
    rho2 = jakes_rho(np.arange(aging.tau_c - aging.n_est + 1), aging) ** 2
    sinr = desired[..., None] * rho2 / (uncertainty + aging.noise_power)[..., None]
    out = np.sum(np.log2(1.0 + sinr), axis=-1) / aging.tau_c
    return float(out) if np.ndim(out) == 0 else out


def with_speed(aging: AgingParams, speed: float) -> AgingParams:
    return replace(aging, user_speed=speed)
