"""Point-based value iteration for finite-horizon POMDPs.

Values follow the discounted objective ``E[sum_{t=1..T_H} gamma^t R_t]``, so a
stage backup is ``alpha_k = gamma * (R_a + sum_o O_a(o) * T alpha_{k-1})``.
The solver keeps every stage's alpha set; acting greedily on the stage set
matching the steps left reproduces the conditional plan behind each value.

Batches of models sharing the same spaces are solved together; the
observation tables are handled through a sparse gather so that the
deterministic-observation structure of the handoff model stays cheap.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .pomdp import Belief, PomdpModel

SPAN_TOL = 1e-4
_DUP_TOL = 1e-9
_CHUNK_ELEMS = 4_000_000


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Policy:
    stage_alphas: tuple          # stage_alphas[k-1]: (K, S) alpha set with k steps to go
    stage_actions: tuple         # matching (K,) action indices
    actions: np.ndarray          # (A, n) action bit-vectors
    horizon_TH: int | None
    discount_gamma: float
    expected_reward: float

    @property
    def alpha_vectors(self) -> np.ndarray:
        return self.stage_alphas[-1]

    @property
    def alpha_actions(self) -> np.ndarray:
        return self.stage_actions[-1]

    def to_json(self) -> str:
        return json.dumps({
            "horizon_TH": self.horizon_TH,
            "discount_gamma": self.discount_gamma,
            "expected_reward": self.expected_reward,
            "actions": np.asarray(self.actions).tolist(),
            "stages": [{"alphas": a.tolist(), "actions": b.tolist()}
                       for a, b in zip(self.stage_alphas, self.stage_actions)],
        })

    @classmethod
    def from_json(cls, text: str) -> "Policy":
        doc = json.loads(text)
        alphas = tuple(np.asarray(s["alphas"], dtype=float) for s in doc["stages"])
        acts = tuple(np.asarray(s["actions"], dtype=np.int64) for s in doc["stages"])
        return cls(alphas, acts, np.asarray(doc["actions"], dtype=np.uint8), doc["horizon_TH"],
                   doc["discount_gamma"], doc["expected_reward"])


def _as_probs(belief) -> np.ndarray:
    return belief.probs if isinstance(belief, Belief) else np.asarray(belief, dtype=float)


def _best_index(values: np.ndarray, acts: np.ndarray) -> int:
    top = values.max()
    tol = 1e-12 * max(1.0, abs(top))
    cand = np.flatnonzero(values >= top - tol)
    return int(cand[np.argmin(acts[cand])])


def policy_action(policy: Policy, belief, steps_left: int | None = None) -> int:
    """Index of the chosen action; ties go to the lowest action index."""
    b = _as_probs(belief)
    k = len(policy.stage_alphas) if steps_left is None else steps_left
    alphas, acts = policy.stage_alphas[k - 1], policy.stage_actions[k - 1]
    if b.shape != (alphas.shape[1],):
        raise ValueError(f"belief has dimension {b.shape}, policy expects {alphas.shape[1]}")
    return int(acts[_best_index(alphas @ b, acts)])


def expected_total_reward(policy: Policy, belief) -> float:
    b = _as_probs(belief)
    if b.shape != (policy.alpha_vectors.shape[1],):
        raise ValueError("belief dimension mismatch")
    return float(np.max(policy.alpha_vectors @ b))


# ---------------------------------------------------------------- beliefs

def successor_belief(b, T, O, a, o):
    """Posterior after acting ``a`` and seeing ``o``, pushed one step through T."""
    w = b * O[a, :, o]
    z = w.sum()
    if z <= 0:
        return None, 0.0
    return (w / z) @ T, z


def expand_beliefs(b0, T, O, grid_size, rng, *, corners=True, method="ssea"):
    """Belief set: b0, optional corner beliefs, then reachable expansion.

    ``ssea`` grows the set in rounds: every point simulates one successor per
    action and keeps the one farthest (L1) from the set.  ``exhaustive`` adds
    all successors breadth-first.
    """
    S = len(b0)
    pts = [np.asarray(b0, dtype=float)]
    if corners and S <= 64:
        for i in range(S):
            e = np.zeros(S)
            e[i] = 1.0
            pts.append(e)
    pts = _dedupe(pts)[:grid_size]
    A, _, num_obs = O.shape

    if method == "exhaustive":
        frontier = [pts[0]]
        while frontier and len(pts) < grid_size:
            nxt = []
            for b in frontier:
                for a in range(A):
                    for o in range(num_obs):
                        nb, z = successor_belief(b, T, O, a, o)
                        if nb is None or _min_dist(nb, pts) <= _DUP_TOL:
                            continue
                        pts.append(nb)
                        nxt.append(nb)
                        if len(pts) >= grid_size:
                            return np.array(pts)
            frontier = nxt
        return np.array(pts)
    if method != "ssea":
        raise ValueError(f"unknown expansion method {method!r}")

    buf = np.zeros((max(grid_size, len(pts)), S))
    buf[:len(pts)] = pts
    n = len(pts)
    acts = np.arange(A)
    stale = 0
    while n < grid_size and stale < 3:
        added = False
        for i in range(n):
            b = buf[i]
            # one simulated (state, observation) per action, all actions at once
            s_idx = np.minimum(np.searchsorted(np.cumsum(b), rng.random(A) * b.sum(), side="right"), S - 1)
            po = O[acts, s_idx]                                         # (A, Obs)
            o_idx = np.minimum((po.cumsum(axis=1) < rng.random(A)[:, None] * po.sum(axis=1)[:, None]).sum(axis=1),
                               num_obs - 1)
            w = b[None, :] * O[acts, :, o_idx]                          # (A, S)
            z = w.sum(axis=1)
            ok = z > 0
            if not np.any(ok):
                continue
            nb = (w[ok] / z[ok, None]) @ T
            d = np.abs(nb[:, None, :] - buf[None, :n, :]).sum(axis=2).min(axis=1)
            j = int(np.argmax(d))
            if d[j] > _DUP_TOL:
                buf[n] = nb[j]
                n += 1
                added = True
                if n >= grid_size:
                    break
        stale = 0 if added else stale + 1
    return buf[:n].copy()


def _min_dist(b, pts):
    return float(np.min(np.abs(np.asarray(pts) - b).sum(axis=1)))


def _dedupe(pts):
    out = []
    for p in pts:
        if not out or _min_dist(p, out) > _DUP_TOL:
            out.append(p)
    return out


# ---------------------------------------------------------------- backups

def _sparse_pattern(O):
    """Column and row gather indices for observation tables O (L, A, S, Obs)."""
    L, A, S, num_obs = O.shape
    mask = np.any(O > 0, axis=0)                                   # (A, S, Obs)
    m_col = max(1, int(mask.sum(axis=1).max()))
    m_row = max(1, int(mask.sum(axis=2).max()))
    cidx = np.zeros((A, num_obs, m_col), dtype=np.int64)
    ridx = np.zeros((A, S, m_row), dtype=np.int64)
    for a in range(A):
        for o in range(num_obs):
            nz = np.flatnonzero(mask[a, :, o])
            cidx[a, o, :len(nz)] = nz
        for s in range(S):
            nz = np.flatnonzero(mask[a, s])
            ridx[a, s, :len(nz)] = nz
    # padded entries point at index 0 with zero weight
    cw = np.empty((L, A, num_obs, m_col))
    rw = np.empty((L, A, S, m_row))
    for a in range(A):
        cw[:, a] = O[:, a][:, cidx[a], np.arange(num_obs)[:, None]]
        rw[:, a] = O[:, a][:, np.arange(S)[:, None], ridx[a]]
        for o in range(num_obs):
            cw[:, a, o, int(mask[a, :, o].sum()):] = 0.0
        for s in range(S):
            rw[:, a, s, int(mask[a, s].sum()):] = 0.0
    return cidx, cw, ridx, rw


def _backup(alphas, beliefs, T, R, pattern, gamma):
    """One point-based backup for a batch.  Returns new (alphas, actions, values)."""
    cidx, cw, ridx, rw = pattern
    L, G, S = beliefs.shape
    K = alphas.shape[1]
    A = R.shape[2]
    Ta = np.matmul(alphas, np.swapaxes(T, 1, 2))                    # (L, K, S)
    num_obs = cidx.shape[1]
    q = np.empty((L, G, A))
    best_k = np.empty((L, G, A, num_obs), dtype=np.int64)
    immediate = np.einsum("lgs,lsa->lga", beliefs, R)
    step = max(1, _CHUNK_ELEMS // max(1, K * cidx.shape[1] * cidx.shape[2] * L))
    for g0 in range(0, G, step):
        sl = slice(g0, g0 + step)
        PA = beliefs[:, sl, None, :] * Ta[:, None, :, :]            # (L, g, K, S)
        for a in range(A):
            V = (PA[..., cidx[a]] * cw[:, None, None, a]).sum(-1)   # (L, g, K, Obs)
            best_k[:, sl, a] = V.argmax(axis=2)
            q[:, sl, a] = V.max(axis=2).sum(-1)
    q = gamma * (immediate + q)
    if not np.all(np.isfinite(q)):
        raise SolverError("non-finite value encountered during backup")
    a_star = q.argmax(axis=2)                                       # lowest index on ties
    # alpha(s) = gamma * (R(s,a*) + sum_o O(o|s,a*) Ta[k*(o), s])
    li = np.arange(L)[:, None, None, None]
    gi = np.arange(G)[None, :, None, None]
    obs_of = ridx[a_star]                                           # (L, G, S, m_row)
    w = rw[np.arange(L)[:, None], a_star]                           # (L, G, S, m_row)
    k_sel = best_k[li, gi, a_star[:, :, None, None], obs_of]        # (L, G, S, m_row)
    s_idx = np.arange(S)[None, None, :, None]
    future = (Ta[li, k_sel, s_idx] * w).sum(-1)                     # (L, G, S)
    r_sel = R[np.arange(L)[:, None], :, a_star]                      # (L, G, S)
    new_alphas = gamma * (r_sel + future)
    return new_alphas, a_star, q.max(axis=2)


def solve_batch(transition, observation, reward, beliefs, gamma, horizon, belief_sets,
                actions, max_iter=10_000):
    """Run the backups for a batch sharing spaces.

    ``belief_sets`` is (L, G, S); the first point of each set is the belief
    whose value is reported.  Returns a list of :class:`Policy`.
    """
    T = np.asarray(transition, dtype=float)
    O = np.asarray(observation, dtype=float)
    R = np.asarray(reward, dtype=float)
    L, S = T.shape[0], T.shape[1]
    if R.ndim == 2:
        R = np.broadcast_to(R, (L,) + R.shape)
    if horizon is not None and horizon < 1:
        raise SolverError("horizon must be at least 1")
    pattern = _sparse_pattern(O)
    pts = np.asarray(belief_sets, dtype=float)
    alphas = np.zeros((L, 1, S))
    stages_a, stages_act = [], []
    prev_vals = np.zeros(pts.shape[:2])
    n_iter = horizon if horizon is not None else max_iter
    for it in range(n_iter):
        alphas, acts, vals = _backup(alphas, pts, T, R, pattern, gamma)
        if horizon is not None:
            stages_a.append(alphas)
            stages_act.append(acts)
        elif np.max(np.abs(vals - prev_vals)) < SPAN_TOL:
            break
        prev_vals = vals
    if horizon is None:
        if it == n_iter - 1:
            raise SolverError("infinite-horizon iteration did not converge")
        stages_a, stages_act = [alphas], [acts]
    b0 = np.asarray(beliefs, dtype=float)
    policies = []
    for l in range(L):
        sa = tuple(s[l] for s in stages_a)
        sc = tuple(s[l] for s in stages_act)
        value = float(np.max(sa[-1] @ b0[l]))
        if not np.isfinite(value):
            raise SolverError("non-finite policy value")
        policies.append(Policy(sa, sc, actions, horizon, gamma, value))
    return policies


def solve(model: PomdpModel, initial_belief, grid_size: int = 256, *, seed=0,
          corners: bool = True, expansion: str = "ssea") -> Policy:
    """Solve one model with point-based value iteration from ``initial_belief``."""
    return solve_models([model], [initial_belief], grid_size, seeds=[seed], corners=corners,
                        expansion=expansion)[0]


def solve_models(models, initial_beliefs, grid_size: int = 256, *, seeds=None,
                 corners: bool = True, expansion: str = "ssea"):
    if grid_size < 1:
        raise ValueError("grid_size must be >= 1")
    if not models:
        return []
    m0 = models[0]
    if m0.horizon_TH is not None and m0.horizon_TH < 1:
        raise SolverError("horizon must be at least 1")
    seeds = list(range(len(models))) if seeds is None else list(seeds)
    b0s = [_as_probs(b) for b in initial_beliefs]
    sets = []
    for m, b0, sd in zip(models, b0s, seeds):
        if b0.shape != (m.num_states,):
            raise ValueError("belief dimension mismatch")
        rng = np.random.default_rng(sd)
        sets.append(expand_beliefs(b0, m.transition, m.observation, grid_size, rng,
                                   corners=corners, method=expansion))
    G = max(len(s) for s in sets)
    padded = np.stack([np.concatenate([s, np.repeat(s[:1], G - len(s), axis=0)]) for s in sets])
    return solve_batch(np.stack([m.transition for m in models]),
                       np.stack([m.observation for m in models]),
                       np.stack([m.reward for m in models]),
                       np.stack(b0s), m0.discount_gamma, m0.horizon_TH, padded, m0.actions)


def mdp_q_values(transition, reward, gamma, horizon, max_iter=10_000):
    """Full-observability Q table(s) under the same discounting as the POMDP.

    Accepts a single model's tables or a batch with a leading axis.
    """
    T = np.asarray(transition, dtype=float)
    R = np.asarray(reward, dtype=float)
    single = T.ndim == 2
    if single:
        T = T[None]
    if R.ndim == 2:
        R = np.broadcast_to(R, (T.shape[0],) + R.shape)
    V = np.zeros(T.shape[:2])
    n_iter = horizon if horizon is not None else max_iter
    Q = np.zeros(R.shape)
    for _ in range(n_iter):
        Q = gamma * (R + np.einsum("lst,lt->ls", T, V)[..., None])
        newV = Q.max(axis=2)
        if horizon is None and np.max(np.abs(newV - V)) < SPAN_TOL:
            V = newV
            break
        V = newV
    return Q[0] if single else Q


def qmdp_bound(transition, reward, gamma, horizon, beliefs):
    """Upper bound on the optimal POMDP value at ``beliefs``: max_a b . Q_MDP(., a)."""
    Q = mdp_q_values(transition, reward, gamma, horizon)
    b = np.asarray(beliefs, dtype=float)
    if Q.ndim == 2:
        return float(np.max(b @ Q))
    return np.max(np.einsum("ls,lsa->la", b, Q), axis=1)
