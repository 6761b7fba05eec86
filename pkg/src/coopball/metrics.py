"""Evaluation metrics over episode trajectories and action logs.

All six quantities summarize where the ball spent the episode and how the
two players' commands related: mean position, specificity (cumulative
spread around the mean), path length, density ratio near the mean, human
effort, and human/robot agreement.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .board import ActionPair, Trajectory


@dataclass(frozen=True)
class MetricsRecord:
    mean_x: float
    mean_y: float
    specificity: float
    path_length: float
    density_ratio: float
    human_effort: float
    agreement_ratio: float
    iteration_index: int = 0

    def __post_init__(self) -> None:
        if min(self.specificity, self.path_length, self.human_effort) < 0:
            raise ValueError("specificity, path_length and human_effort "
                             "must be nonnegative")
        if not 0.0 <= self.density_ratio <= 1.0:
            raise ValueError("density_ratio must lie in [0, 1]")
        if not 0.0 <= self.agreement_ratio <= 1.0:
            raise ValueError("agreement_ratio must lie in [0, 1]")

    FIELDS = ("mean_x", "mean_y", "specificity", "path_length",
              "density_ratio", "human_effort", "agreement_ratio")

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]


def _positions(traj: Trajectory | np.ndarray | Sequence) -> np.ndarray:
    if isinstance(traj, Trajectory):
        pts = traj.positions()
    else:
        pts = np.asarray(traj, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
        raise ValueError("expected a non-empty sequence of (x, y) points")
    return pts


def _mean(pts: np.ndarray) -> np.ndarray:
    # anchored at the first point so constant trajectories are exact
    return pts[0] + (pts - pts[0]).mean(axis=0)


def mean_position(traj) -> tuple[float, float]:
    pts = _positions(traj)
    mx, my = _mean(pts)
    return float(mx), float(my)


def specificity(traj) -> float:
    """Summed distance of every visited point from the trajectory mean."""
    pts = _positions(traj)
    return float(np.hypot(*(pts - _mean(pts)).T).sum())


def path_length(traj) -> float:
    pts = _positions(traj)
    if len(pts) < 2:
        warnings.warn("path length of a single-point trajectory is 0",
                      stacklevel=2)
        return 0.0
    seg = np.diff(pts, axis=0)
    return float(np.hypot(seg[:, 0], seg[:, 1]).sum())


def density_ratio(traj, scale: float | None = None) -> float:
    """Fraction of steps closer to the mean than 5% of the spread scale.

    The scale defaults to the trajectory's own maximum distance from its
    mean; pass e.g. the board diagonal to use a fixed reference instead.
    A perfectly stationary trajectory has zero spread and counts as fully
    dense (ratio 1).
    """
    pts = _positions(traj)
    rho = np.hypot(*(pts - _mean(pts)).T)
    rho_max = float(rho.max()) if scale is None else float(scale)
    if rho_max == 0.0:
        return 1.0
    return float(np.mean(rho < 0.05 * rho_max))


def human_effort(actions) -> float:
    """Total command magnitude, summed over both axes and all steps."""
    if isinstance(actions, Trajectory):
        arr = actions.human_actions()
    else:
        arr = np.asarray(actions, dtype=float)
    if arr.size == 0:
        raise ValueError("expected at least one command")
    return float(np.abs(arr).sum())


def agreement_ratio(pairs) -> float:
    """Fraction of axis command pairs where both players push the same way.

    A zero command on either side counts as non-agreement for that axis.
    """
    if isinstance(pairs, Trajectory):
        human = pairs.human_actions()
        robot = pairs.robot_actions()
    else:
        pairs = list(pairs)
        if not pairs:
            raise ValueError("expected at least one action pair")
        if isinstance(pairs[0], ActionPair):
            human = np.array([p.human for p in pairs])
            robot = np.array([p.robot for p in pairs])
        else:
            human = np.array([p[0] for p in pairs], dtype=float)
            robot = np.array([p[1] for p in pairs], dtype=float)
    if human.size == 0:
        raise ValueError("expected at least one action pair")
    return float(np.mean((human * robot) > 0.0))


def compute_metrics(traj: Trajectory, iteration_index: int = 0,
                    density_scale: float | None = None) -> MetricsRecord:
    mx, my = mean_position(traj)
    return MetricsRecord(
        mean_x=mx,
        mean_y=my,
        specificity=specificity(traj),
        path_length=path_length(traj),
        density_ratio=density_ratio(traj, scale=density_scale),
        human_effort=human_effort(traj),
        agreement_ratio=agreement_ratio(traj),
        iteration_index=iteration_index,
    )
