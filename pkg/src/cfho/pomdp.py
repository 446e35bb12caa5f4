"""Factored two-state POMDP for one candidate DU set.

States and observations are bit-vectors over the candidate links (1 = Good),
actions are bit-vectors with exactly ``b_con`` ones (1 = connected).  All
three spaces are enumerated in lexicographic order with candidate position
0 as the most significant bit.

Timing used throughout: at a decision cycle the user holds belief ``b`` over
the current state ``s``, picks ``a``, collects ``R(s, a)``, observes the
connected links of ``s`` (unconnected links yield an uninformative draw) and
the channel then moves to ``s'`` through the transition table.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .channel import AgingParams, ChannelParams, snr_rate

ROW_TOL = 1e-9


def enumerate_spaces(candidate_dus, b_con: int):
    """Return (states, actions, observations) as uint8 bit arrays."""
    n = len(candidate_dus)
    if not 1 <= b_con < n:
        raise ValueError(f"need 1 <= b_con < |candidate set| (got b_con={b_con}, n={n})")
    states = _bit_vectors(n)
    actions = states[states.sum(axis=1) == b_con]
    return states, actions, states.copy()


@lru_cache(maxsize=32)
def _bit_vectors_cached(n: int) -> np.ndarray:
    out = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.uint8).reshape(-1, n)
    out.flags.writeable = False
    return out


def _bit_vectors(n: int) -> np.ndarray:
    return _bit_vectors_cached(n).copy()


def link_matrix(p11: float, p01: float) -> np.ndarray:
    """2x2 per-link transition matrix, rows/cols ordered (Bad, Good)."""
    return np.array([[1.0 - p01, p01], [1.0 - p11, p11]])


def build_transition(pairs) -> np.ndarray:
    """Joint transition table as the Kronecker product of per-link matrices.

    ``pairs`` is a sequence of (p11, p01), or an array (..., n, 2) for a batch
    of candidate sets; the batch form returns (..., 2^n, 2^n).
    """
    pairs = np.asarray(pairs, dtype=float)
    if np.any(pairs < 0) or np.any(pairs > 1):
        raise ValueError("transition probabilities must lie in [0, 1]")
    p11, p01 = pairs[..., 0], pairs[..., 1]
    mats = np.stack([np.stack([1.0 - p01, p01], -1), np.stack([1.0 - p11, p11], -1)], -2)
    out = mats[..., 0, :, :]
    for k in range(1, pairs.shape[-2]):
        m = mats[..., k, :, :]
        out = (out[..., :, None, :, None] * m[..., None, :, None, :]).reshape(
            *out.shape[:-2], out.shape[-2] * 2, out.shape[-1] * 2)
    return out


def build_observation(p_good, actions) -> np.ndarray:
    """Observation table (A, S, O).

    Connected links are observed exactly; an unconnected link reports Good
    with its marginal probability ``p_good`` regardless of the state.
    ``p_good`` may carry leading batch dimensions: (..., n) -> (..., A, S, O).
    """
    p_good = np.asarray(p_good, dtype=float)
    if np.any(p_good < 0) or np.any(p_good > 1):
        raise ValueError("marginal probabilities must lie in [0, 1]")
    actions = np.asarray(actions, dtype=np.uint8)
    n = actions.shape[1]
    bits = _bit_vectors_cached(n)
    s_bits = bits[:, None, :]          # (S, 1, n)
    o_bits = bits[None, :, :]          # (1, O, n)
    match = (s_bits == o_bits)         # (S, O, n)
    pg = p_good[..., None, None, None, :]                          # (..., 1, 1, 1, n)
    unconn = np.where(o_bits[None] == 1, pg, 1.0 - pg)              # (..., 1, 1, O, n)
    conn = actions[:, None, None, :].astype(bool)                   # (A, 1, 1, n)
    per_link = np.where(conn, match[None].astype(float), unconn)    # (..., A, S, O, n)
    return per_link.prod(axis=-1)


def build_reward(states, actions, aging: AgingParams, num_antennas: int,
                 params: ChannelParams, du_loads=None) -> np.ndarray:
    """Reward table (S, A): the SNR-based rate with Good/Bad links at beta_good/beta_bad."""
    states = np.asarray(states)
    actions = np.asarray(actions)
    n = states.shape[1]
    loads = np.ones(n) if du_loads is None else np.asarray(du_loads, dtype=float)
    if np.any(loads < 1):
        raise ValueError("DU loads must be >= 1")
    return _reward_table(n, tuple(map(tuple, actions.tolist())), tuple(loads.tolist()), aging,
                         int(num_antennas), params.beta_good, params.beta_bad)[
        _state_rows(states)]


def _state_rows(states: np.ndarray) -> np.ndarray:
    n = states.shape[1]
    weights = 1 << np.arange(n - 1, -1, -1)
    return states.astype(np.int64) @ weights


@lru_cache(maxsize=64)
def _reward_table(n, actions, loads, aging, num_antennas, beta_good, beta_bad):
    bits = _bit_vectors_cached(n)
    betas = np.where(bits == 1, beta_good, beta_bad)                 # (S, n)
    acts = np.asarray(actions, dtype=float)                         # (A, n)
    table = snr_rate(betas[:, None, :], acts[None, :, :], aging, num_antennas, np.asarray(loads))
    table = np.asarray(table, dtype=float)
    table.flags.writeable = False
    return table


@dataclass(frozen=True)
class PomdpModel:
    candidate_dus: tuple
    b_con: int
    states: np.ndarray
    actions: np.ndarray
    observations: np.ndarray
    transition: np.ndarray
    observation: np.ndarray
    reward: np.ndarray
    discount_gamma: float = 0.95
    horizon_TH: int | None = 10

    def __post_init__(self):
        object.__setattr__(self, "candidate_dus", tuple(self.candidate_dus))
        if not 0.0 <= self.discount_gamma < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if self.horizon_TH is not None and self.horizon_TH < 0:
            raise ValueError("horizon must be non-negative")
        S, A, O = len(self.states), len(self.actions), len(self.observations)
        if self.transition.shape != (S, S) or self.observation.shape != (A, S, O) \
                or self.reward.shape != (S, A):
            raise ValueError("table shapes do not match the enumerated spaces")
        if np.any(np.abs(self.transition.sum(axis=1) - 1.0) > ROW_TOL):
            raise ValueError("transition rows must sum to 1")
        if np.any(np.abs(self.observation.sum(axis=2) - 1.0) > ROW_TOL):
            raise ValueError("observation rows must sum to 1")
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("reward entries must be finite")
        if self.b_con and np.any(self.actions.sum(axis=1) != self.b_con):
            raise ValueError("every action must connect exactly b_con links")

    @property
    def num_states(self) -> int:
        return len(self.states)

    def to_json(self) -> str:
        doc = {
            "candidate_dus": [int(d) for d in self.candidate_dus],
            "b_con": self.b_con,
            "discount_gamma": self.discount_gamma,
            "horizon_TH": self.horizon_TH,
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "observations": self.observations.tolist(),
            "transition": self.transition.tolist(),
            "observation": self.observation.tolist(),
            "reward": self.reward.tolist(),
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "PomdpModel":
        doc = json.loads(text)
        arr = {k: np.asarray(doc[k], dtype=float) for k in ("transition", "observation", "reward")}
        bits = {k: np.asarray(doc[k], dtype=np.uint8) for k in ("states", "actions", "observations")}
        return cls(doc["candidate_dus"], doc["b_con"], discount_gamma=doc["discount_gamma"],
                   horizon_TH=doc["horizon_TH"], **bits, **arr)


def build_model(candidate_dus, b_con, pairs, p_good, reward=None, *, aging=None,
                num_antennas=8, params=None, du_loads=None, gamma=0.95, horizon=10) -> PomdpModel:
    states, actions, observations = enumerate_spaces(candidate_dus, b_con)
    if reward is None:
        reward = build_reward(states, actions, aging or AgingParams(), num_antennas,
                              params or ChannelParams(), du_loads)
    return PomdpModel(candidate_dus, b_con, states, actions, observations,
                      build_transition(pairs), build_observation(p_good, actions),
                      np.asarray(reward, dtype=float), gamma, horizon)


@dataclass(frozen=True)
class Belief:
    probs: np.ndarray
    per_link_good: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if np.any(p < -1e-15) or abs(p.sum() - 1.0) > ROW_TOL:
            raise ValueError("belief must be a probability vector")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "per_link_good", np.asarray(self.per_link_good, dtype=float))


def product_belief(per_link_good) -> np.ndarray:
    """Joint state distribution of independent links (lexicographic state order)."""
    up = np.asarray(per_link_good, dtype=float)
    out = np.ones(up.shape[:-1] + (1,))
    for k in range(up.shape[-1]):
        g = up[..., k:k + 1]
        out = (out[..., :, None] * np.stack([1.0 - g, g], -1)).reshape(*out.shape[:-1], -1)
    return out


def initial_belief(p_good) -> Belief:
    p_good = np.asarray(p_good, dtype=float)
    if np.any(p_good < 0) or np.any(p_good > 1):
        raise ValueError("marginal probabilities must lie in [0, 1]")
    return Belief(product_belief(p_good), p_good)


def belief_update(belief: Belief, action, observation, pairs) -> Belief:
    """Per-link good-state belief after one cycle.

    Connected links collapse to p11 or p01 depending on the observed state;
    unconnected ones are propagated through their two-state chain.
    ``observation`` holds observed states (entries of unconnected links are
    ignored).
    """
    action = np.asarray(action, dtype=bool)
    obs = np.asarray(observation, dtype=bool)
    pairs = np.asarray(pairs, dtype=float)
    p11, p01 = pairs[:, 0], pairs[:, 1]
    ups = belief.per_link_good
    new = np.where(action, np.where(obs, p11, p01), ups * p11 + (1.0 - ups) * p01)
    return Belief(product_belief(new), new)
