"""DU placement, straight-line user mobility with wrap-around, and 3-D distances."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class NetworkTopology:
    du_positions: np.ndarray
    area_side: float = 1000.0
    num_antennas_M: int = 8
    height_sep_dh: float = 13.5

    def __post_init__(self):
        pos = np.asarray(self.du_positions, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "du_positions", pos)
        if self.area_side <= 0:
            raise ValueError("area_side must be positive")
        if pos.size and (pos.min() < 0 or pos.max() > self.area_side):
            raise ValueError("DU positions must lie inside the square area")
        if self.num_antennas_M < 1:
            raise ValueError("num_antennas_M must be >= 1")
        if self.height_sep_dh <= 0:
            raise ValueError("height_sep_dh must be positive")

    @property
    def num_dus(self) -> int:
        return len(self.du_positions)


@dataclass(frozen=True)
class UserTrajectory:
    """Straight-line trip state. ``travelled`` counts metres moved, wraps included."""

    position: tuple[float, float]
    heading: tuple[float, float]
    speed_v: float = 10.0
    step_duration: float = 1.0
    wrap_margin: float = 200.0
    travelled: float = field(default=0.0)

    def __post_init__(self):
        hx, hy = (float(c) for c in self.heading)
        norm = math.hypot(hx, hy)
        if norm == 0.0 or not math.isfinite(norm):
            raise ValueError("heading must be a non-zero finite vector")
        object.__setattr__(self, "heading", (hx / norm, hy / norm))
        object.__setattr__(self, "position", tuple(float(c) for c in self.position))
        if self.speed_v < 0 or self.step_duration <= 0 or self.wrap_margin < 0:
            raise ValueError("invalid speed, step duration or wrap margin")

    @property
    def step_length(self) -> float:
        return self.speed_v * self.step_duration


def place_dus(count: int, area_side: float, seed) -> np.ndarray:
    """Return ``count`` i.i.d. uniform points in ``[0, area_side]^2`` as a (count, 2) array."""
    if count < 0 or area_side <= 0:
        raise ValueError("count must be >= 0 and area_side > 0")
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, area_side, size=(count, 2))


def initial_user(area_side: float, rng: np.random.Generator, *, box: float = 100.0,
                 speed_v: float = 10.0, step_duration: float = 1.0,
                 wrap_margin: float = 200.0) -> UserTrajectory:
    """Start in a ``box`` x ``box`` square at the area centre with a uniform heading."""
    centre = area_side / 2.0
    pos = rng.uniform(centre - box / 2.0, centre + box / 2.0, size=2)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    return UserTrajectory(
        position=(pos[0], pos[1]),
        heading=(math.cos(angle), math.sin(angle)),
        speed_v=speed_v,
        step_duration=step_duration,
        wrap_margin=wrap_margin,
    )


def _wrap_coord(x: float, lo: float, hi: float) -> float:
    # beyond the margin line: re-enter at the opposite margin line plus the overshoot
    if x > hi:
        return lo + (x - hi)
    if x < lo:
        return hi - (lo - x)
    return x


def step_user(traj: UserTrajectory, area_side: float) -> UserTrajectory:
    step = traj.step_length
    x = traj.position[0] + step * traj.heading[0]
    y = traj.position[1] + step * traj.heading[1]
    lo, hi = traj.wrap_margin, area_side - traj.wrap_margin
    if hi > lo:
        x = _wrap_coord(x, lo, hi)
        y = _wrap_coord(y, lo, hi)
    return replace(traj, position=(x, y), travelled=traj.travelled + step)


def effective_distance(user_pos, du_pos, d_h: float):
    """Distance including the height separation; broadcasts over arrays of positions."""
    if d_h <= 0:
        raise ValueError("d_h must be positive")
    diff = np.asarray(du_pos, dtype=float) - np.asarray(user_pos, dtype=float)
    planar_sq = np.sum(diff * diff, axis=-1)
    out = np.sqrt(planar_sq + d_h * d_h)
    return float(out) if np.ndim(out) == 0 else out
