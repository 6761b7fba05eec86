"""Reward field composition from the goal posterior and feature fields.

The robot's reward is a grid scalar field rebuilt between episodes: a
scaled goal density, minus a constant offset that keeps only promising
regions positive, plus a weighted blend of the four guidance features.
Per-step rewards sample the field bilinearly at the ball position.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FEATURE_IDS, FeatureField
from .grids import GoalGrid, field_checksum
from .inference import GoalField, to_density

REWARD_MODES = ("evl", "bayes_only", "fixed_external")
FALL_PENALTY_FACTOR = 10.0


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 10000.0
    beta: tuple[float, float, float, float] = (1000.0, 10000.0, 10000.0,
                                               10000.0)
    eta: float = 10.0
    mode: str = "evl"

    def __post_init__(self) -> None:
        if self.mode not in REWARD_MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if len(self.beta) != 4 or any(b < 0 for b in self.beta):
            raise ValueError("beta must be four non-negative weights")
        if self.mode == "bayes_only":
            object.__setattr__(self, "beta", (0.0, 0.0, 0.0, 0.0))

    @property
    def fall_penalty(self) -> float:
        return -FALL_PENALTY_FACTOR * self.eta


@dataclass(frozen=True, eq=False)
class RewardField:
    grid: GoalGrid
    values: np.ndarray
    iteration_index: int
    provenance: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.n_cells,):
            raise ValueError("values must have one entry per grid cell")
        if not np.all(np.isfinite(values)):
            raise ValueError("reward values must be finite")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def compose(goal: GoalField, features: dict[str, FeatureField],
            cfg: RewardConfig) -> RewardField:
    """Blend posterior density and feature fields into one reward grid."""
    grid = goal.grid
    if set(features) != set(FEATURE_IDS):
        raise ValueError(f"features must contain exactly {FEATURE_IDS}")
    for f in features.values():
        if f.bin_count != (grid.nx, grid.ny):
            raise ValueError("feature fields must share the goal grid")
    values = cfg.alpha * to_density(goal) - cfg.eta
    for weight, fid in zip(cfg.beta, FEATURE_IDS):
        if weight != 0.0:
            values = values + weight * features[fid].joint
    provenance = (field_checksum("goal_mean", grid, goal.mean,
                                 goal.iteration_index),) + tuple(
        field_checksum(fid, grid, features[fid].joint,
                       goal.iteration_index)
        for fid in FEATURE_IDS)
    return RewardField(grid=grid, values=values,
                       iteration_index=goal.iteration_index,
                       provenance=provenance)


def constant_field(grid: GoalGrid, value: float = 0.0,
                   iteration_index: int = 0) -> RewardField:
    return RewardField(grid=grid, values=np.full(grid.n_cells, value),
                       iteration_index=iteration_index)


def gaussian_bump_field(grid: GoalGrid, center: tuple[float, float],
                        height: float, width: float,
                        offset: float = 0.0) -> RewardField:
    """Single smooth peak, used for fixed-goal pretraining and sanity runs."""
    pts = grid.cell_centers
    d2 = (pts[:, 0] - center[0]) ** 2 + (pts[:, 1] - center[1]) ** 2
    values = height * np.exp(-d2 / (2.0 * width * width)) + offset
    return RewardField(grid=grid, values=values, iteration_index=0)


def reward_at(field: RewardField, x: float, y: float,
              clamp_counter: list | None = None) -> float:
    """Bilinear sample of the field at a board position.

    Positions beyond the outermost cell centers clamp to the edge value;
    pass a single-element list to count how often that happens.
    """
    grid = field.grid
    cx, cy = grid.centers_x, grid.centers_y
    clamped = not (cx[0] <= x <= cx[-1]) or not (cy[0] <= y <= cy[-1])
    if clamped and clamp_counter is not None:
        clamp_counter[0] += 1
    xq = min(max(x, cx[0]), cx[-1])
    yq = min(max(y, cy[0]), cy[-1])

    ix = min(int(np.searchsorted(cx, xq, side="right")) - 1, grid.nx - 2)
    iy = min(int(np.searchsorted(cy, yq, side="right")) - 1, grid.ny - 2)
    ix = max(ix, 0)
    iy = max(iy, 0)
    tx = (xq - cx[ix]) / (cx[ix + 1] - cx[ix])
    ty = (yq - cy[iy]) / (cy[iy + 1] - cy[iy])

    v = field.values
    v00 = v[iy * grid.nx + ix]
    v01 = v[iy * grid.nx + ix + 1]
    v10 = v[(iy + 1) * grid.nx + ix]
    v11 = v[(iy + 1) * grid.nx + ix + 1]
    top = v00 * (1 - tx) + v01 * tx
    bot = v10 * (1 - tx) + v11 * tx
    return float(top * (1 - ty) + bot * ty)


def field_distance(a: RewardField, b: RewardField) -> float:
    """Largest per-cell difference between two fields on one grid."""
    if a.grid != b.grid:
        raise ValueError("fields live on different grids")
    return float(np.abs(a.values - b.values).max())
