import dataclasses

import numpy as np
import pytest

from cfho import channel as ch
from cfho.policies import (HoDecisionState, LinkContext, SolverSettings, apply_ho_control,
                           best_lsf_cluster, build_subproblem, cluster_from_action, count_switched,
                           lsf_threshold_triggered, lsf_time_triggered, pomdp_ho_procedure,
                           realized_rate, revealed_link_bound)
from cfho.pomdp import build_reward, enumerate_spaces, product_belief
from cfho.solver import solve

P = ch.ChannelParams()
AG = ch.AgingParams()
FAST = SolverSettings(horizon=5, grid_size=8, corners=False)


def _links(n, rng):
    p11 = rng.uniform(0.5, 1.0, n)
    p01 = rng.uniform(0.0, 0.5, n)
    return LinkContext(p11, p01, rng.uniform(0, 1, n), rng.uniform(0, 1, n))


def _proc(all_dus, base, links, settings=FAST, **kw):
    return pomdp_ho_procedure(all_dus, base, len(base), links, aging=AG, params=P,
                              num_antennas=8, settings=settings, **kw)


def test_minimal_pool_has_one_subproblem():
    links = _links(4, np.random.default_rng(0))
    res = _proc(range(4), (0, 1, 2), links)
    assert res.subproblems == 1 and res.solved == 1
    assert res.candidates == (0, 1, 2, 3)


def test_full_pool_sizes():
    rng = np.random.default_rng(1)
    links = _links(125, rng)
    base = (3, 17, 40, 77, 101)
    res = _proc(range(125), base, links)
    assert res.subproblems == 120
    assert res.candidates[:5] == base
    assert len(res.policy.alpha_vectors[0]) == 64 and len(res.policy.actions) == 6


def test_procedure_errors():
    links = _links(5, np.random.default_rng(2))
    with pytest.raises(ValueError):
        pomdp_ho_procedure(range(3), (0, 1, 2), 3, links, aging=AG, params=P, num_antennas=8,
                           settings=FAST)
    with pytest.raises(ValueError):
        pomdp_ho_procedure(range(5), (0, 1), 3, links, aging=AG, params=P, num_antennas=8,
                           settings=FAST)


def test_exact_pruning_keeps_the_selection():
    rng = np.random.default_rng(3)
    for trial in range(3):
        links = _links(30, rng)
        base = tuple(sorted(rng.choice(30, 4, replace=False)))
        full = _proc(range(30), base, links, dataclasses.replace(FAST, prune=False), seed=trial)
        exact = _proc(range(30), base, links, dataclasses.replace(FAST, prune_tol=0.0), seed=trial)
        loose = _proc(range(30), base, links, seed=trial)
        assert full.solved == 26
        assert exact.candidates == full.candidates
        assert exact.expected_reward == full.expected_reward
        assert loose.expected_reward >= full.expected_reward * (1 - 1e-6) - 1e-12


def test_better_extra_du_is_selected():
    n = 7
    base = (0, 1, 2, 3)
    p11 = np.full(n, 0.9)
    p01 = np.full(n, 0.2)
    pg = np.full(n, 0.5)
    up = np.full(n, 0.6)
    for arr, lo, hi in ((p11, 0.3, 0.95), (p01, 0.01, 0.3), (pg, 0.05, 0.8), (up, 0.05, 0.9)):
        arr[4:] = lo
        arr[5] = hi
    links = LinkContext(p11, p01, pg, up)
    res = _proc(range(n), base, links, dataclasses.replace(FAST, prune=False))
    assert res.candidates[-1] == 5
    # confirm by solving the two competing sub-problems directly
    vals = {}
    for extra in (5, 6):
        m = build_subproblem(base + (extra,), 4, links, aging=AG, params=P, num_antennas=8,
                             horizon=5)
        vals[extra] = solve(m, product_belief(up[list(base + (extra,))]), grid_size=8,
                            corners=False).expected_reward
    assert vals[5] > vals[6]


def test_procedure_deterministic():
    links = _links(20, np.random.default_rng(4))
    a = _proc(range(20), (1, 5, 9), links, seed=11)
    b = _proc(range(20), (1, 5, 9), links, seed=11)
    assert a.candidates == b.candidates and a.expected_reward == b.expected_reward
    assert all(np.array_equal(x, y) for x, y in zip(a.policy.stage_alphas, b.policy.stage_alphas))


def test_revealed_bound_is_upper_bound_and_tight_without_memory():
    rng = np.random.default_rng(5)
    states, actions, _ = enumerate_spaces(range(4), 3)
    R = build_reward(states, actions, AG, 8, P)
    for _ in range(5):
        pairs = np.column_stack([rng.uniform(0.5, 1, 4), rng.uniform(0, 0.5, 4)])
        pairs[:3, 1] = pairs[:3, 0]     # three memoryless links, one persistent
        up = rng.uniform(size=4)
        links = LinkContext(pairs[:, 0], pairs[:, 1], np.full(4, 0.5), up)
        m = build_subproblem(range(4), 3, links, aging=AG, params=P, num_antennas=8, horizon=4)
        v = solve(m, product_belief(up), grid_size=64).expected_reward
        assert revealed_link_bound(pairs, up, R, 0.95, 4) >= v - 1e-9
    # all links memoryless: nothing to learn, the bound is the value
    pairs = np.column_stack([np.full(4, 0.7), np.full(4, 0.7)])
    up = np.full(4, 0.4)
    links = LinkContext(pairs[:, 0], pairs[:, 1], np.full(4, 0.5), up)
    m = build_subproblem(range(4), 3, links, aging=AG, params=P, num_antennas=8, horizon=4)
    v = solve(m, product_belief(up), grid_size=16).expected_reward
    assert revealed_link_bound(pairs, up, R, 0.95, 4) == pytest.approx(v, rel=1e-12)


def _stub(cands, action_bits):
    class _Pol:
        actions = np.array([action_bits])
        stage_alphas = (np.zeros((1, 2 ** len(cands))),)
        stage_actions = (np.array([0]),)
    return lambda base: (_Pol(), cands)


def _run(state, cands, bits, rate=5.0):
    return apply_ho_control(state, _stub(cands, bits), lambda c: product_belief(np.full(len(c), 0.5)),
                            lambda c: rate)


def test_rate_above_threshold_keeps_cluster():
    st = HoDecisionState((1, 2, 3), (1, 2, 3), last_rate=8.0, rate_threshold=6.0)
    new, sw, _ = _run(st, (1, 2, 3, 7), [0, 1, 1, 1])
    assert new.serving_cluster == (1, 2, 3) and sw == 0
    assert new.potential_cluster == (2, 3, 7)
    assert new.cycle_index == 1 and new.last_rate == 5.0


def test_rate_below_threshold_switches():
    st = HoDecisionState((1, 2, 3), (1, 2, 3), last_rate=4.0, rate_threshold=6.0)
    new, sw, _ = _run(st, (1, 2, 3, 7), [0, 1, 1, 1])
    assert new.serving_cluster == (2, 3, 7) and sw == 1


def test_switch_to_same_cluster_is_noop():
    st = HoDecisionState((1, 2, 3), (1, 2, 3), last_rate=4.0, rate_threshold=6.0)
    new, sw, _ = _run(st, (1, 2, 3, 7), [1, 1, 1, 0])
    assert new.serving_cluster == (1, 2, 3) and sw == 0


def test_cached_solution_skips_procedure():
    st = HoDecisionState((1, 2, 3), (1, 2, 3), last_rate=4.0, rate_threshold=6.0)
    pol, cands = _stub((1, 2, 3, 7), [0, 1, 1, 1])(None)

    def boom(base):
        raise AssertionError("procedure must not run")
    new, _, _ = apply_ho_control(st, boom, lambda c: product_belief(np.full(4, 0.5)),
                                 lambda c: 1.0, cached=(pol, cands), steps_left=1)
    assert new.serving_cluster == (2, 3, 7)


def test_state_validation_and_action_mapping():
    with pytest.raises(ValueError):
        HoDecisionState((1, 2), (1, 2, 3), 0.0, 1.0)
    assert cluster_from_action((9, 4, 6), (1, 0, 1)) == (6, 9)


def test_realized_rate_properties():
    betas = np.zeros(10)
    betas[[2, 4]] = 1e-30
    assert realized_rate((2, 4), betas, AG, 8) < 1e-12
    betas[3] = P.beta_good
    states, actions, _ = enumerate_spaces(range(2), 1)
    R = build_reward(states, actions, AG, 8, P)
    assert realized_rate((3,), betas, AG, 8) == pytest.approx(R[0b10, 1], rel=1e-12)
    betas[5] = P.beta_good
    assert realized_rate((3, 5), betas, AG, 8) > realized_rate((3,), betas, AG, 8)
    with pytest.raises(ValueError):
        realized_rate((), betas, AG, 8)


def test_count_switched():
    assert count_switched((1, 2, 3), (1, 2, 3)) == 0
    assert count_switched((1, 2, 3, 4, 5), (6, 7, 8, 9, 10)) == 5
    assert count_switched({1, 2, 3}, {2, 3, 4}) == 1
    with pytest.raises(ValueError):
        count_switched((1, 2), (1, 2, 3))


def test_best_cluster_sorted_input_and_ties():
    assert best_lsf_cluster(np.linspace(1.0, 0.1, 10), 3) == (0, 1, 2)
    assert best_lsf_cluster(np.array([1.0, 2.0, 2.0, 2.0]), 2) == (1, 2)


def test_time_triggered_hand_trace():
    # five cycles, four DUs, clusters of two
    trace = np.array([[4, 3, 2, 1],
                      [4, 1, 3, 2],
                      [1, 2, 3, 4],
                      [1, 2, 3, 4],
                      [4, 3, 2, 1]], dtype=float)
    clusters = lsf_time_triggered(trace, 2)
    assert clusters == [(0, 1), (0, 2), (2, 3), (2, 3), (0, 1)]
    switched = [count_switched(a, b) for a, b in zip(clusters, clusters[1:])]
    assert switched == [1, 1, 0, 2]
    static = np.tile(np.arange(6.0), (5, 1))
    assert len(set(lsf_time_triggered(static, 3))) == 1


def test_threshold_triggered_cases():
    trace = np.array([[4, 3, 2, 1],
                      [1, 4, 3, 2],
                      [1, 2, 4, 3],
                      [3, 1, 2, 4]], dtype=float)

    def rate_of(cluster, t):
        return float(trace[t, list(cluster)].sum())
    assert lsf_threshold_triggered(trace, 2, 0.0, rate_of) == [(0, 1)] * 4
    assert lsf_threshold_triggered(trace, 2, np.inf, rate_of) == lsf_time_triggered(trace, 2)
    # the held cluster (0, 1) earns 7, 5, 3, 4; only the dip to 3 at cycle 2 triggers
    got = lsf_threshold_triggered(trace, 2, 4.0, rate_of)
    assert got == [(0, 1), (0, 1), (0, 1), (0, 3)]
