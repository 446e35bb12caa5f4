"""Handoff policies: the divide-and-conquer POMDP procedure, the
rate-threshold controller that decides when to apply it, and the two
LSF-based baselines."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .channel import AgingParams, ChannelParams, snr_rate
from .pomdp import PomdpModel, _bit_vectors, build_observation, build_reward, build_transition, \
    enumerate_spaces, product_belief
from .solver import Policy, expand_beliefs, policy_action, qmdp_bound, solve_batch

_PRUNE_RTOL = 1e-9


@dataclass(frozen=True)
class LinkContext:
    """Per-DU quantities available at one decision cycle (arrays indexed by DU id).

    ``p11``/``p01`` describe one cycle of channel evolution ahead of the user,
    ``p_good`` is the Good-state marginal used for unobserved links and
    ``upsilon`` is the current per-link Good belief.
    """

    p11: np.ndarray
    p01: np.ndarray
    p_good: np.ndarray
    upsilon: np.ndarray


@dataclass(frozen=True)
class SolverSettings:
    gamma: float = 0.95
    horizon: int = 10
    grid_size: int = 256
    corners: bool = True
    expansion: str = "ssea"
    prune: bool = True
    prune_tol: float = 1e-6
    chunk: int = 4


@dataclass(frozen=True)
class ProcedureResult:
    policy: Policy
    candidates: tuple
    expected_reward: float
    solved: int
    subproblems: int


def revealed_link_bound(pairs, upsilon, reward, gamma, horizon) -> float:
    """Upper bound on the optimal value of one sub-problem.

    Links with ``p11 == p01`` forget their state every cycle, so after the
    first cycle their belief is the fixed product of ``p11``.  Revealing the
    state of every other link before each decision can only help; the
    resulting problem is an MDP over those links with the memoryless links
    averaged out of the reward.  Value convention matches the solver:
    ``sum_{t=1..H} gamma^t R_t``.
    """
    pairs = np.asarray(pairs, dtype=float)
    upsilon = np.asarray(upsilon, dtype=float)
    n = pairs.shape[0]
    bits = _bit_vectors(n).astype(bool)
    mem = pairs[:, 0] == pairs[:, 1]
    keep = np.flatnonzero(~mem)
    powers = 1 << np.arange(len(keep))[::-1]
    key = bits[:, keep].astype(int) @ powers if len(keep) else np.zeros(len(bits), dtype=int)
    group = np.zeros((len(bits), 1 << len(keep)))
    group[np.arange(len(bits)), key] = 1.0

    def expected(p_links):
        # reward averaged over memoryless links, per revealed sub-state
        w = np.where(bits[:, mem], p_links[mem], 1.0 - p_links[mem]).prod(axis=1)
        return group.T @ (w[:, None] * reward)

    r_first = expected(upsilon).max(axis=1)
    r_later = expected(pairs[:, 0]).max(axis=1)
    T = build_transition(pairs[keep]) if len(keep) else np.ones((1, 1))
    u = np.zeros(len(r_later))
    for _ in range(horizon - 1):
        u = gamma * (r_later + T @ u)
    b0 = product_belief(upsilon[keep]) if len(keep) else np.ones(1)
    return float(b0 @ (gamma * (r_first + T @ u)))


def _subproblem_seed(seed, du_id):
    return np.random.SeedSequence([int(seed), int(du_id)])


def pomdp_ho_procedure(all_dus, base_set, b_con, links: LinkContext, *, aging: AgingParams,
                       params: ChannelParams, num_antennas: int, settings: SolverSettings,
                       du_loads=None, seed=0) -> ProcedureResult:
    """Solve one sub-problem per DU outside ``base_set`` and keep the best.

    Each sub-problem's candidate set is the base set (ascending id) followed by
    one extra DU.  With ``settings.prune`` sub-problems are visited in order of
    their full-observability upper bound and skipped once that bound falls
    below the best value already found.  With ``prune_tol == 0`` this leaves
    the selected sub-problem unchanged; a positive ``prune_tol`` also skips
    sub-problems that could beat the incumbent by at most that relative
    margin, so the selected value is within ``prune_tol`` of the unpruned one.
    """
    all_dus = sorted(int(d) for d in all_dus)
    base = tuple(sorted(int(d) for d in base_set))
    if len(all_dus) <= b_con:
        raise ValueError("need more DUs than b_con")
    if len(base) != b_con:
        raise ValueError(f"base set must hold exactly b_con={b_con} DUs")
    base_lookup = set(base)
    others = [d for d in all_dus if d not in base_lookup]
    n = b_con + 1
    cand = np.array([base + (d,) for d in others])                      # (L, n)
    pairs = np.stack([links.p11[cand], links.p01[cand]], axis=-1)       # (L, n, 2)
    T = build_transition(pairs)
    states, actions, _ = enumerate_spaces(range(n), b_con)
    loads = None if du_loads is None else np.asarray(du_loads, dtype=float)[cand]
    if loads is None or np.all(loads == loads.flat[0]):
        R = build_reward(states, actions, aging, num_antennas, params,
                         None if loads is None else loads[0])
        R_all = np.broadcast_to(R, (len(others),) + R.shape)
    else:
        R_all = np.stack([build_reward(states, actions, aging, num_antennas, params, ld)
                          for ld in loads])
    b0 = product_belief(links.upsilon[cand])
    bounds = qmdp_bound(T, R_all, settings.gamma, settings.horizon, b0)
    if settings.horizon is not None:
        revealed = np.array([revealed_link_bound(pairs[l], links.upsilon[cand[l]], R_all[l],
                                                 settings.gamma, settings.horizon)
                             for l in range(len(others))])
        bounds = np.minimum(bounds, revealed)

    order = np.argsort(-bounds, kind="stable") if settings.prune else np.arange(len(others))
    values = np.full(len(others), -np.inf)
    policies: dict[int, Policy] = {}
    best = -np.inf
    pos = 0
    while pos < len(order):
        chunk = order[pos:pos + settings.chunk]
        if settings.prune and np.isfinite(best):
            slack = settings.prune_tol * abs(best) - _PRUNE_RTOL * max(1.0, abs(best))
            chunk = chunk[bounds[chunk] > best + slack] if settings.prune_tol > 0 else \
                chunk[bounds[chunk] >= best + slack]
            if len(chunk) == 0:
                break
        O = build_observation(links.p_good[cand[chunk]], actions)
        sets = []
        for j, l in enumerate(chunk):
            rng = np.random.default_rng(_subproblem_seed(seed, others[l]))
            sets.append(expand_beliefs(b0[l], T[l], O[j], settings.grid_size, rng,
                                       corners=settings.corners, method=settings.expansion))
        G = max(len(s) for s in sets)
        sets = np.stack([np.concatenate([s, np.repeat(s[:1], G - len(s), axis=0)]) for s in sets])
        sols = solve_batch(T[chunk], O, R_all[chunk], b0[chunk], settings.gamma,
                           settings.horizon, sets, actions)
        for l, pol in zip(chunk, sols):
            values[l] = pol.expected_reward
            policies[int(l)] = pol
        best = max(best, float(values[chunk].max()))
        pos += settings.chunk
    top = values.max()
    ell = int(np.flatnonzero(values == top)[0])
    return ProcedureResult(policies[ell], tuple(int(d) for d in cand[ell]), float(top),
                           len(policies), len(others))


def build_subproblem(candidates, b_con, links: LinkContext, *, aging, params, num_antennas,
                     gamma=0.95, horizon=10, du_loads=None) -> PomdpModel:
    """Assemble the model for one explicit candidate set."""
    cand = np.asarray(candidates, dtype=int)
    states, actions, observations = enumerate_spaces(cand, b_con)
    pairs = np.stack([links.p11[cand], links.p01[cand]], axis=-1)
    reward = build_reward(states, actions, aging, num_antennas, params,
                          None if du_loads is None else np.asarray(du_loads)[cand])
    return PomdpModel(tuple(int(c) for c in cand), b_con, states, actions, observations,
                      build_transition(pairs), build_observation(links.p_good[cand], actions),
                      reward, gamma, horizon)


@dataclass(frozen=True)
class HoDecisionState:
    serving_cluster: tuple
    potential_cluster: tuple
    last_rate: float
    rate_threshold: float
    cycle_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "serving_cluster", tuple(sorted(int(d) for d in self.serving_cluster)))
        object.__setattr__(self, "potential_cluster", tuple(sorted(int(d) for d in self.potential_cluster)))
        if len(self.serving_cluster) != len(self.potential_cluster):
            raise ValueError("serving and potential clusters must have the same size")


def cluster_from_action(candidates, action_bits) -> tuple:
    return tuple(sorted(int(c) for c, a in zip(candidates, action_bits) if a))


def apply_ho_control(state: HoDecisionState, procedure, belief_of, rate_of, *, cached=None,
                     steps_left=None):
    """One decision cycle of the threshold-controlled POMDP handoff loop.

    ``procedure(base)`` returns ``(policy, candidates)``; ``belief_of(cands)``
    gives the joint belief over a candidate set; ``rate_of(cluster)`` the
    realised rate.  Passing ``cached=(policy, candidates)`` reuses an earlier
    solution instead of calling the procedure.

    Returns ``(new_state, switched, (policy, candidates))``.
    """
    policy, cands = cached if cached is not None else procedure(state.potential_cluster)
    omega = belief_of(cands)
    a = policy_action(policy, omega, steps_left)
    potential = cluster_from_action(cands, policy.actions[a])
    if state.last_rate >= state.rate_threshold:
        serving = state.serving_cluster
    else:
        serving = potential
    switched = count_switched(state.serving_cluster, serving)
    new = replace(state, serving_cluster=serving, potential_cluster=potential,
                  last_rate=float(rate_of(serving)), cycle_index=state.cycle_index + 1)
    return new, switched, (policy, cands)


def realized_rate(serving_cluster, betas, aging: AgingParams, num_antennas: int, du_loads=None) -> float:
    """Rate of a cluster with its actual (continuous) LSF values."""
    idx = np.asarray(sorted(serving_cluster), dtype=int)
    if idx.size == 0:
        raise ValueError("serving cluster must be non-empty")
    b = np.asarray(betas, dtype=float)[idx]
    loads = 1.0 if du_loads is None else np.asarray(du_loads, dtype=float)[idx]
    return float(snr_rate(b, np.ones_like(b), aging, num_antennas, loads))


def best_lsf_cluster(betas, b_con) -> tuple:
    """Top ``b_con`` DUs by LSF, ties to the lower id."""
    b = np.asarray(betas, dtype=float)
    if len(b) < b_con:
        raise ValueError("fewer DUs than b_con")
    order = np.lexsort((np.arange(len(b)), -b))
    return tuple(sorted(int(i) for i in order[:b_con]))


def count_switched(prev_cluster, new_cluster) -> int:
    prev, new = set(prev_cluster), set(new_cluster)
    if len(prev) != len(new):
        raise ValueError("clusters must have equal size")
    return len(new - prev)


def lsf_time_triggered(beta_trace, b_con):
    """Serving cluster per cycle when re-selecting the best-LSF DUs every cycle."""
    return [best_lsf_cluster(b, b_con) for b in np.asarray(beta_trace)]


def lsf_threshold_triggered(beta_trace, b_con, r_threshold, rate_of):
    """Best-LSF re-selection only on cycles following a rate below ``r_threshold``.

    ``rate_of(cluster, cycle)`` gives the realised rate; cycle 0 always
    selects the best cluster.
    """
    trace = np.asarray(beta_trace)
    clusters = [best_lsf_cluster(trace[0], b_con)]
    last = rate_of(clusters[0], 0)
    for t in range(1, len(trace)):
        c = best_lsf_cluster(trace[t], b_con) if last < r_threshold else clusters[-1]
        clusters.append(c)
        last = rate_of(c, t)
    return clusters
