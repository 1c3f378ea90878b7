"""Multi-objective navigation gridworlds.

Objectives, in order: stay on the road, avoid hazards, move right, move up,
move toward the center row, move toward the center column. Every reward map is
an (height, width) array with entries in [0, 1]; the reward for a transition is
read at the arrived-at cell.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, EpisodeOver

ACTIONS = ("up", "down", "left", "right")
UP, DOWN, LEFT, RIGHT = range(4)
# (dx, dy); row 0 is the top of the grid
DELTAS = ((0, -1), (0, 1), (-1, 0), (1, 0))

OBJECTIVE_NAMES = ("road", "hazards", "right", "up", "center-row", "center-column")
OBJECTIVE_COUNTS = (2, 3, 4, 6)
ROAD_FALLOFF = 3
SLIP_PROB = 0.1
MIN_SAFE_FRACTION = 0.2


@dataclass(frozen=True)
class SizeSpec:
    side: int
    horizon: int
    hazards: int
    hazard_radius: int


SIZES = {
    "small": SizeSpec(5, 50, 3, 2),
    "medium": SizeSpec(12, 100, 5, 4),
    "large": SizeSpec(20, 150, 8, 4),
}


class MOState(NamedTuple):
    x: int
    y: int
    t: int


@dataclass(frozen=True)
class Transition:
    s: MOState
    a: int
    s_next: MOState
    terminal: bool
    r: np.ndarray


@dataclass(frozen=True, eq=False)
class GridWorld:
    size: str
    width: int
    height: int
    n_objectives: int
    slip_prob: float
    horizon: int
    reward_maps: np.ndarray = field(repr=False)
    hazard_centers: tuple[tuple[int, int], ...]
    road_cells: frozenset[tuple[int, int]] = field(repr=False)
    seed: int = 0

    @property
    def n_states(self) -> int:
        return self.width * self.height

    def cell(self, x: int, y: int) -> int:
        return y * self.width + x

    def coords(self, cell: int) -> tuple[int, int]:
        return cell % self.width, cell // self.width

    def reward_table(self) -> np.ndarray:
        """Reward vectors of every cell, shape (n_states, n_objectives)."""
        return self.reward_maps.reshape(self.n_objectives, -1).T.copy()

    def with_slip(self, slip_prob: float) -> "GridWorld":
        return replace(self, slip_prob=slip_prob)

    def transition_kernel(self) -> np.ndarray:
        """P[a, s, s'] for the stationary (step-counter-free) dynamics."""
        n = self.n_states
        moves = np.zeros((4, n), dtype=int)
        for s in range(n):
            x, y = self.coords(s)
            for d, (dx, dy) in enumerate(DELTAS):
                nx = min(max(x + dx, 0), self.width - 1)
                ny = min(max(y + dy, 0), self.height - 1)
                moves[d, s] = self.cell(nx, ny)
        kernel = np.zeros((4, n, n))
        rows = np.arange(n)
        for a in range(4):
            for d in range(4):
                p = 1.0 - self.slip_prob if d == a else self.slip_prob / 3
                np.add.at(kernel[a], (rows, moves[d]), p)
        return kernel

    def state_features(self, s) -> np.ndarray:
        """One-hot cell encoding; accepts an MOState or a cell index."""
        out = np.zeros(self.n_states)
        out[s if isinstance(s, (int, np.integer)) else self.cell(s.x, s.y)] = 1.0
        return out

    def to_dict(self) -> dict:
        return {
            "size": self.size,
            "width": self.width,
            "height": self.height,
            "n_objectives": self.n_objectives,
            "objectives": list(OBJECTIVE_NAMES[: self.n_objectives]),
            "slip_prob": self.slip_prob,
            "horizon": self.horizon,
            "seed": self.seed,
            "hazard_centers": [list(c) for c in self.hazard_centers],
            "road_cells": sorted(list(c) for c in self.road_cells),
            "reward_maps": self.reward_maps.tolist(),
        }


def _road(width: int, height: int) -> set[tuple[int, int]]:
    runs = max(2, round(height / 4))
    rows = [int(v) for v in np.round(np.linspace(1, height - 2, runs))]
    cells = {(x, y) for y in rows for x in range(width)}
    for i in range(len(rows) - 1):
        x = width - 1 if i % 2 == 0 else 0
        cells.update((x, y) for y in range(rows[i], rows[i + 1] + 1))
    return cells


def _chebyshev_to(points, width: int, height: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    dist = np.full((height, width), np.inf)
    for px, py in points:
        dist = np.minimum(dist, np.maximum(np.abs(xs - px), np.abs(ys - py)))
    return dist


def build(size: str = "medium", n_objectives: int = 3, seed: int = 0,
          slip_prob: float = SLIP_PROB) -> GridWorld:
    """Construct a world deterministically from ``seed``."""
    if size not in SIZES:
        raise ConfigError(f"unknown size {size!r}; choose from {sorted(SIZES)}")
    if n_objectives not in OBJECTIVE_COUNTS:
        raise ConfigError(f"n_objectives must be one of {OBJECTIVE_COUNTS}, got {n_objectives}")
    if not 0.0 <= slip_prob <= 1.0:
        raise ConfigError("slip_prob must lie in [0, 1]")
    spec = SIZES[size]
    w = h = spec.side
    road = _road(w, h)
    road_map = np.maximum(0.0, 1.0 - _chebyshev_to(road, w, h) / ROAD_FALLOFF)

    rng = np.random.default_rng(seed)
    off_road = [(x, y) for y in range(h) for x in range(w) if (x, y) not in road]
    for _ in range(10_000):
        picks = rng.choice(len(off_road), size=spec.hazards, replace=False)
        centers = tuple(sorted(off_road[i] for i in picks))
        hazard_map = np.minimum(1.0, _chebyshev_to(centers, w, h) / spec.hazard_radius)
        if np.mean(hazard_map == 1.0) >= MIN_SAFE_FRACTION:
            break
    else:  # pragma: no cover - unreachable for the shipped size table
        raise ConfigError(f"could not place hazards for size {size!r}")

    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    cx, cy = (w - 1) / 2, (h - 1) / 2
    maps = [
        road_map,
        hazard_map,
        xs / (w - 1),
        (h - 1 - ys) / (h - 1),
        1.0 - np.abs(ys - cy) / cy,
        1.0 - np.abs(xs - cx) / cx,
    ]
    reward_maps = np.stack(maps[:n_objectives]).astype(float)
    reward_maps.setflags(write=False)
    return GridWorld(size=size, width=w, height=h, n_objectives=n_objectives,
                     slip_prob=slip_prob, horizon=spec.horizon, reward_maps=reward_maps,
                     hazard_centers=centers, road_cells=frozenset(road), seed=seed)


def reset(world: GridWorld, rng: np.random.Generator) -> MOState:
    """Uniformly random start cell with the step counter at zero."""
    cell = int(rng.integers(world.n_states))
    x, y = world.coords(cell)
    return MOState(x, y, 0)


def reward_vector(world: GridWorld, s: MOState) -> np.ndarray:
    return world.reward_maps[:, s.y, s.x].copy()


def move(world: GridWorld, x: int, y: int, direction: int) -> tuple[int, int]:
    dx, dy = DELTAS[direction]
    return min(max(x + dx, 0), world.width - 1), min(max(y + dy, 0), world.height - 1)


def step(world: GridWorld, s: MOState, a: int, rng: np.random.Generator) -> Transition:
    """Apply action ``a``; with probability slip_prob a different direction is executed."""
    if s.t >= world.horizon:
        raise EpisodeOver(f"state at t={s.t} already reached the horizon {world.horizon}")
    if a not in (UP, DOWN, LEFT, RIGHT):
        raise ValueError(f"invalid action {a!r}")
    executed = a
    if world.slip_prob > 0.0 and rng.random() < world.slip_prob:
        executed = (a + 1 + int(rng.integers(3))) % 4
    x, y = move(world, s.x, s.y, executed)
    s_next = MOState(x, y, s.t + 1)
    return Transition(s, a, s_next, s_next.t == world.horizon, reward_vector(world, s_next))


def export_world(world: GridWorld, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(world.to_dict(), fh, indent=1)
