"""Monte Carlo trips, metric aggregation and report export."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import channel as ch
from .geometry import initial_user, place_dus, step_user
from .policies import (HoDecisionState, LinkContext, SolverSettings, apply_ho_control,
                       best_lsf_cluster, count_switched, lsf_threshold_triggered,
                       lsf_time_triggered, pomdp_ho_procedure, realized_rate)
from .pomdp import product_belief
from .solver import policy_action

log = logging.getLogger(__name__)

SCHEMES = ("pomdp", "lsf-time", "lsf-threshold")


@dataclass(frozen=True)
class SimConfig:
    # network
    num_dus: int = 125
    area_side: float = 1000.0
    num_antennas: int = 8
    speed: float = 10.0
    step_duration: float = 1.0
    wrap_margin: float = 200.0
    start_box: float = 100.0
    trip_length: float = 1000.0
    cycles: int | None = None        # overrides trip_length / (speed * step_duration)
    # path loss and shadowing
    d0: float = 1.1
    alpha_pl: float = 3.8
    d_h: float = 13.5
    sigma_sh_db: float = 6.0
    d_decorr: float = 100.0
    iota: float = 0.5
    threshold_distance: float = 150.0
    good_distance: float = 50.0
    bad_distance: float = 200.0
    # aging, power, noise
    carrier_hz: float = 1.8e9
    ts: float = 66.7e-6
    tau_c: int = 200
    tau_p: int = 16
    n_est: int = 16
    pilot_instant: int = 1
    p_d_dbm: float = 30.0
    p_u_dbm: float = 20.0
    noise_density_dbm_hz: float = -174.0
    noise_figure_db: float = 8.0
    bandwidth_hz: float = 20e6
    du_load: float = 1.0
    # handoff control and solver
    b_con: int = 5
    b_p: int = 6
    t_h: int = 10
    gamma: float = 0.95
    r_threshold: float = 1.0
    resolve_every: int = 1
    grid_size: int = 256
    grid_corners: bool = True
    expansion: str = "ssea"
    prune: bool = True
    # experiment
    n_trials: int = 100
    seed: int = 0
    scheme: str = "pomdp"

    def __post_init__(self):
        if self.b_p != self.b_con + 1:
            raise ValueError("b_p must equal b_con + 1")
        if not 1 <= self.b_con < self.num_dus:
            raise ValueError("need 1 <= b_con < num_dus")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.t_h < 1 or self.resolve_every < 1 or self.grid_size < 1 or self.n_trials < 1:
            raise ValueError("t_h, resolve_every, grid_size and n_trials must be >= 1")
        if self.speed < 0 or self.step_duration <= 0 or self.trip_length < 0:
            raise ValueError("need speed >= 0, step_duration > 0 and trip_length >= 0")
        if self.cycles is None and self.speed == 0:
            raise ValueError("a static user (speed 0) needs an explicit cycles count")
        if self.cycles is not None and self.cycles < 0:
            raise ValueError("cycles must be >= 0")
        if self.start_box < 0 or self.area_side <= 0:
            raise ValueError("invalid area geometry")
        if self.du_load < 1:
            raise ValueError("du_load must be >= 1")
        if self.r_threshold < 0 or math.isnan(self.r_threshold):
            raise ValueError("r_threshold must be >= 0")
        # surface channel/aging invariant violations at load time
        self.channel_params()
        self.aging_params()

    @property
    def num_cycles(self) -> int:
        if self.cycles is not None:
            return int(self.cycles)
        return int(round(self.trip_length / (self.speed * self.step_duration)))

    def channel_params(self) -> ch.ChannelParams:
        return ch.ChannelParams(self.d0, self.alpha_pl, self.d_h, self.sigma_sh_db, self.d_decorr,
                                self.iota, threshold_distance=self.threshold_distance,
                                good_distance=self.good_distance, bad_distance=self.bad_distance)

    def aging_params(self) -> ch.AgingParams:
        return ch.AgingParams(self.carrier_hz, self.ts, self.speed, self.tau_c, self.tau_p,
                              self.n_est, self.pilot_instant, ch.dbm_to_w(self.p_u_dbm),
                              ch.dbm_to_w(self.p_d_dbm),
                              ch.noise_power_w(self.noise_density_dbm_hz, self.noise_figure_db,
                                               self.bandwidth_hz))

    def solver_settings(self) -> SolverSettings:
        return SolverSettings(self.gamma, self.t_h, self.grid_size, self.grid_corners,
                              self.expansion, self.prune)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "SimConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Trace:
    """Geometry and shadowing for one trip, shared by every scheme."""

    du_positions: np.ndarray
    positions: np.ndarray      # (N+1, 2) user position per cycle (after wrap)
    lookahead: np.ndarray      # (N+1, 2) un-wrapped position one step ahead
    lookbehind: np.ndarray     # (N+1, 2) un-wrapped position one step back
    shadowing: np.ndarray      # (N+1, D) dB
    betas: np.ndarray          # (N+1, D)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.shadowing).tobytes()).hexdigest()


@dataclass
class TrialMetrics:
    scheme: str
    rates: np.ndarray                     # per cycle 1..N
    clusters: list                        # serving cluster per cycle 1..N
    switched: np.ndarray                  # switched DUs per cycle 1..N
    initial_rate: float
    trace_checksum: str
    subproblems_solved: int = 0
    subproblems_total: int = 0

    @property
    def accumulated(self) -> np.ndarray:
        return np.cumsum(self.switched)


def _seed_sequences(trial_seed):
    return np.random.SeedSequence(trial_seed).spawn(2)


def generate_trace(config: SimConfig, trial_seed) -> Trace:
    trace_seq, _ = _seed_sequences(trial_seed)
    rng = np.random.default_rng(trace_seq)
    params = config.channel_params()
    dus = place_dus(config.num_dus, config.area_side, rng.integers(2**63))
    user = initial_user(config.area_side, rng, box=config.start_box, speed_v=config.speed,
                        step_duration=config.step_duration, wrap_margin=config.wrap_margin)
    step = user.step_length
    heading = np.array(user.heading)
    n = config.num_cycles
    sh = rng.standard_normal(config.num_dus) * config.sigma_sh_db
    positions, shadows = [], []
    for t in range(n + 1):
        if t:
            user = step_user(user, config.area_side)
            sh = ch.ar1_shadowing_step(sh, step, params, rng)
        positions.append(user.position)
        shadows.append(sh)
    positions = np.array(positions)
    shadows = np.array(shadows)
    dist = np.linalg.norm(dus[None, :, :] - positions[:, None, :], axis=-1)
    betas = ch.path_loss(dist, params) * 10.0 ** (shadows / 10.0)
    return Trace(dus, positions, positions + step * heading, positions - step * heading,
                 shadows, betas)


def _margins(trace: Trace, pos, params):
    dist = np.linalg.norm(trace.du_positions - pos, axis=-1)
    return ch.threshold_margin_db(dist, params)


class _PomdpRunner:
    """Per-trial state for the POMDP scheme: per-DU beliefs and solver hooks."""

    def __init__(self, config: SimConfig, trace: Trace, trial_seed):
        self.cfg = config
        self.trace = trace
        self.params = config.channel_params()
        self.aging = config.aging_params()
        self.settings = config.solver_settings()
        _, solver_seq = _seed_sequences(trial_seed)
        self.solver_seed = int(solver_seq.generate_state(1)[0])
        self.step = config.speed * config.step_duration
        self.loads = np.full(config.num_dus, float(config.du_load))
        self.all_dus = np.arange(config.num_dus)
        self.solved = 0
        self.total = 0

    def upsilon_update(self, t, upsilon, serving):
        """Per-DU Good belief for cycle t given observations of the cycle t-1 serving set."""
        tr, p = self.trace, self.params
        a_prev = _margins(tr, tr.lookbehind[t], p)
        a_now = _margins(tr, tr.positions[t], p)
        p11, p01 = ch.transition_probs_event(a_prev, a_now, self.step, p)
        new = upsilon * p11 + (1.0 - upsilon) * p01
        idx = np.asarray(serving, dtype=int)
        new[idx] = ch.transition_probs_known(tr.shadowing[t - 1, idx], a_prev[idx], a_now[idx],
                                             self.step, p)
        return new

    def context(self, t, upsilon, base) -> LinkContext:
        """One-step link statistics ahead of the user; ``base`` links use their measured shadowing."""
        tr, p = self.trace, self.params
        a_now = _margins(tr, tr.positions[t], p)
        a_next = _margins(tr, tr.lookahead[t], p)
        p11, p01 = ch.transition_probs_event(a_now, a_next, self.step, p)
        idx = np.asarray(base, dtype=int)
        known = ch.transition_probs_known(tr.shadowing[t, idx], a_now[idx], a_next[idx], self.step, p)
        p11[idx] = known
        p01[idx] = known
        return LinkContext(p11, p01, ch.marginal_good_prob(a_now, p), upsilon)

    def run(self) -> tuple[list, np.ndarray, np.ndarray, float]:
        cfg, tr = self.cfg, self.trace
        c0 = best_lsf_cluster(tr.betas[0], cfg.b_con)
        r0 = realized_rate(c0, tr.betas[0], self.aging, cfg.num_antennas, self.loads)
        state = HoDecisionState(c0, c0, r0, cfg.r_threshold, 0)
        upsilon = ch.marginal_good_prob(_margins(tr, tr.positions[0], self.params), self.params)
        clusters, rates, switched = [], [], []
        cached, age = None, 0
        for t in range(1, cfg.num_cycles + 1):
            upsilon = self.upsilon_update(t, upsilon, state.serving_cluster)
            links = self.context(t, upsilon, state.potential_cluster)

            def procedure(base, links=links, t=t):
                res = pomdp_ho_procedure(self.all_dus, base, cfg.b_con, links, aging=self.aging,
                                         params=self.params, num_antennas=cfg.num_antennas,
                                         settings=self.settings, du_loads=self.loads,
                                         seed=self.solver_seed + t)
                self.solved += res.solved
                self.total += res.subproblems
                return res.policy, res.candidates

            def belief_of(cands, up=upsilon):
                return product_belief(up[np.asarray(cands, dtype=int)])

            def rate_of(cluster, t=t):
                return realized_rate(cluster, tr.betas[t], self.aging, cfg.num_antennas, self.loads)

            reuse = cached is not None and age < cfg.resolve_every
            steps_left = max(1, cfg.t_h - age) if reuse else None
            try:
                state, sw, sol = apply_ho_control(state, procedure, belief_of, rate_of,
                                                  cached=cached if reuse else None,
                                                  steps_left=steps_left)
            except Exception as exc:
                raise RuntimeError(f"POMDP scheme failed at cycle {t}: {exc}") from exc
            if reuse:
                age += 1
            else:
                cached, age = sol, 1
            clusters.append(state.serving_cluster)
            rates.append(state.last_rate)
            switched.append(sw)
        return clusters, np.array(rates), np.array(switched, dtype=int), r0


def run_trial(config: SimConfig, trial_seed, scheme: str | None = None) -> TrialMetrics:
    scheme = scheme or config.scheme
    trace = generate_trace(config, trial_seed)
    aging = config.aging_params()
    loads = np.full(config.num_dus, float(config.du_load))

    def rate_at(cluster, t):
        return realized_rate(cluster, trace.betas[t], aging, config.num_antennas, loads)

    solved = total = 0
    if scheme == "pomdp":
        runner = _PomdpRunner(config, trace, trial_seed)
        clusters, rates, switched, r0 = runner.run()
        solved, total = runner.solved, runner.total
    elif scheme in ("lsf-time", "lsf-threshold"):
        if scheme == "lsf-time":
            allc = lsf_time_triggered(trace.betas, config.b_con)
        else:
            allc = lsf_threshold_triggered(trace.betas, config.b_con, config.r_threshold, rate_at)
        r0 = rate_at(allc[0], 0)
        clusters = allc[1:]
        rates = np.array([rate_at(c, t) for t, c in enumerate(allc) if t > 0])
        switched = np.array([count_switched(allc[t - 1], allc[t]) for t in range(1, len(allc))],
                            dtype=int)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return TrialMetrics(scheme, rates, clusters, switched, r0, trace.checksum(), solved, total)


def trial_seeds(config: SimConfig) -> list:
    return [[int(config.seed), i] for i in range(config.n_trials)]


def _worker(args):
    config, seed, scheme = args
    return run_trial(config, seed, scheme)


def _max_workers() -> int:
    try:
        return max(1, int(os.environ.get("CFHO_THREADS", "1")))
    except ValueError:
        return 1


def run_trials(config: SimConfig, schemes) -> dict:
    jobs = [(config, s, sch) for sch in schemes for s in trial_seeds(config)]
    workers = _max_workers()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_worker, jobs))
    else:
        results = [_worker(j) for j in jobs]
    out = {sch: [] for sch in schemes}
    for (_, _, sch), res in zip(jobs, results):
        out[sch].append(res)
    return out


def summarize(trials: list, r_threshold: float) -> dict:
    rates = np.sort(np.concatenate([t.rates for t in trials]))
    acc = np.stack([t.accumulated for t in trials]) if trials else np.zeros((0, 0))
    after_first = np.concatenate([t.rates[1:] for t in trials])
    per_trial_p10 = [float(np.percentile(t.rates, 10)) for t in trials]
    return {
        "rates": rates.tolist(),
        "cdf": (np.arange(1, len(rates) + 1) / len(rates)).tolist(),
        "quantiles": {f"p{q}": float(np.percentile(rates, q)) for q in (5, 10, 50, 90)},
        "mean_accumulated_switches": acc.mean(axis=0).tolist(),
        "per_trial_total_switches": [int(t.switched.sum()) for t in trials],
        "per_trial_p10": per_trial_p10,
        "mean_total_switches": float(np.mean([t.switched.sum() for t in trials])),
        "fraction_below_threshold": float(np.mean(after_first < r_threshold)) if after_first.size else 0.0,
        "trace_checksums": [t.trace_checksum for t in trials],
        "subproblems_solved": int(sum(t.subproblems_solved for t in trials)),
        "subproblems_total": int(sum(t.subproblems_total for t in trials)),
    }


def reductions(report: dict) -> dict:
    """Relative HO reduction (percent) of the POMDP scheme against each baseline."""
    s = report["schemes"]
    out = {}
    if "pomdp" in s:
        p = s["pomdp"]["mean_total_switches"]
        for base in ("lsf-time", "lsf-threshold"):
            if base in s:
                b = s[base]["mean_total_switches"]
                out[base] = 100.0 * (1.0 - p / b) if b > 0 else float("nan")
    return out


def run_monte_carlo(config: SimConfig, schemes=None) -> dict:
    schemes = tuple(schemes or (config.scheme,))
    trials = run_trials(config, schemes)
    report = {
        "config": config.to_dict(),
        "r_threshold": config.r_threshold,
        "trial_seeds": trial_seeds(config),
        "schemes": {sch: summarize(trials[sch], config.r_threshold) for sch in schemes},
    }
    report["reductions_percent"] = reductions(report)
    return report


CSV_HEADER = ("scheme", "cycle", "rate", "mean_accumulated_switches")


def export(report: dict, path, fmt: str = "csv") -> None:
    try:
        if fmt == "json":
            with open(path, "w") as fh:
                json.dump(report, fh, indent=1, sort_keys=True)
        elif fmt == "csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CSV_HEADER)
                for sch, summ in report.get("schemes", {}).items():
                    for r in summ["rates"]:
                        w.writerow((sch, "", repr(float(r)), ""))
                    for c, v in enumerate(summ["mean_accumulated_switches"], start=1):
                        w.writerow((sch, c, "", repr(float(v))))
        else:
            raise ValueError(f"unknown format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def load_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def solve_snapshot(config: SimConfig, trial: int, cycle: int) -> dict:
    """Run the handoff procedure once at a trip snapshot.

    The base set is the best-LSF cluster at ``cycle`` and the per-link
    beliefs are the Good-state marginals there (no observation history).
    """
    if not 0 <= trial < config.n_trials:
        raise ValueError(f"trial must lie in [0, {config.n_trials})")
    if not 0 <= cycle <= config.num_cycles:
        raise ValueError(f"cycle must lie in [0, {config.num_cycles}]")
    seed = trial_seeds(config)[trial]
    trace = generate_trace(config, seed)
    runner = _PomdpRunner(config, trace, seed)
    base = best_lsf_cluster(trace.betas[cycle], config.b_con)
    upsilon = ch.marginal_good_prob(_margins(trace, trace.positions[cycle], runner.params), runner.params)
    links = runner.context(cycle, upsilon, base)
    res = pomdp_ho_procedure(runner.all_dus, base, config.b_con, links, aging=runner.aging,
                             params=runner.params, num_antennas=config.num_antennas,
                             settings=runner.settings, du_loads=runner.loads,
                             seed=runner.solver_seed + cycle)
    b0 = product_belief(upsilon[np.asarray(res.candidates)])
    a = policy_action(res.policy, b0)
    return {
        "trial_seed": seed,
        "cycle": cycle,
        "user_position": trace.positions[cycle].tolist(),
        "base_set": list(base),
        "candidates": list(res.candidates),
        "expected_reward": res.expected_reward,
        "subproblems_solved": res.solved,
        "subproblems_total": res.subproblems,
        "initial_action": int(a),
        "potential_cluster": [int(c) for c, bit in zip(res.candidates, res.policy.actions[a]) if bit],
        "policy": json.loads(res.policy.to_json()),
    }
