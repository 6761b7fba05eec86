"""Goal-specificity feature distributions extracted from trajectory history.

Four normalized grid distributions summarize how the human has been
moving the ball: where the motion is spectrally busy, where the ball
actually spent time, where it moved slowly, and where it was steered
gently. Each is built per axis over the grid's bins and combined into a
joint field by an outer product, so downstream consumers can treat every
feature exactly like a probability map over cells.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .board import Trajectory
from .grids import GoalGrid

FEATURE_IDS = ("spectral_entropy", "visit_frequency", "pace", "reaction")

ENTROPY_WINDOW = 64
ENTROPY_STRIDE = 32
MIN_ENTROPY_SAMPLES = 8


@dataclass(frozen=True)
class History:
    """Rolling record of collected trajectories with recency weighting.

    Entries are kept sorted by (iteration, content hash) so that the
    order trajectories were appended within one iteration can never
    change any downstream result.
    """

    entries: tuple[tuple[int, Trajectory], ...] = ()
    recency_discount: float = 0.9
    window: int = 10

    def __post_init__(self) -> None:
        if not 0.0 < self.recency_discount <= 1.0:
            raise ValueError("recency_discount must be in (0, 1]")
        if self.window < 1:
            raise ValueError("window must be at least 1")
        iterations = [it for it, _ in self.entries]
        if any(b < a for a, b in zip(iterations, iterations[1:])):
            raise ValueError("iteration indices must be non-decreasing")

    def __len__(self) -> int:
        return len(self.entries)

    def with_trajectory(self, traj: Trajectory,
                        iteration_index: int) -> "History":
        if len(traj) == 0:
            raise ValueError("cannot record an empty trajectory")
        if self.entries and iteration_index < self.entries[-1][0]:
            raise ValueError("iteration indices must be non-decreasing")
        merged = sorted(
            self.entries + ((iteration_index, traj),),
            key=lambda e: (e[0], e[1].content_hash))
        return History(entries=tuple(merged),
                       recency_discount=self.recency_discount,
                       window=self.window)

    def recent(self) -> list[tuple[Trajectory, float]]:
        """The last `window` trajectories with their recency weights."""
        kept = self.entries[-self.window:]
        if not kept:
            return []
        newest = kept[-1][0]
        return [(traj, self.recency_discount ** (newest - it))
                for it, traj in kept]

    def to_json(self) -> str:
        return json.dumps({
            "recency_discount": self.recency_discount,
            "window": self.window,
            "entries": [
                {"iteration": it, "sample_time": traj.sample_time,
                 "termination": traj.termination, "csv": traj.to_csv()}
                for it, traj in self.entries
            ],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "History":
        data = json.loads(text)
        entries = tuple(
            (e["iteration"],
             Trajectory.from_csv(e["csv"], e["sample_time"]))
            for e in data["entries"])
        return cls(entries=entries,
                   recency_discount=data["recency_discount"],
                   window=data["window"])


@dataclass(frozen=True, eq=False)
class FeatureField:
    """One feature as normalized per-axis and joint grid distributions."""

    feature_id: str
    axis_x: np.ndarray
    axis_y: np.ndarray
    joint: np.ndarray
    window: int
    bin_count: tuple[int, int]

    def __post_init__(self) -> None:
        if self.feature_id not in FEATURE_IDS:
            raise ValueError(f"unknown feature_id {self.feature_id!r}")
        nx, ny = self.bin_count
        for name, arr, size in (("axis_x", self.axis_x, nx),
                                ("axis_y", self.axis_y, ny),
                                ("joint", self.joint, nx * ny)):
            arr = np.asarray(arr, dtype=float)
            if arr.shape != (size,):
                raise ValueError(f"{name} must have {size} entries")
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError(f"{name} must be finite and non-negative")
            if abs(arr.sum() - 1.0) > 1e-6:
                raise ValueError(f"{name} must sum to 1")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def _normalize_or_uniform(acc: np.ndarray) -> np.ndarray:
    total = acc.sum()
    if total <= 0 or not np.isfinite(total):
        return np.full(acc.shape, 1.0 / acc.size)
    return acc / total


def _joint(axis_x: np.ndarray, axis_y: np.ndarray) -> np.ndarray:
    j = np.outer(axis_y, axis_x).ravel()
    return j / j.sum()


def _axis_signal(traj: Trajectory, axis: int) -> np.ndarray:
    pts = traj.positions()
    return pts[:, axis]


def _axis_bins(grid: GoalGrid, values: np.ndarray, axis: int) -> np.ndarray:
    return np.array([grid.axis_bin(v, axis)[0] for v in values], dtype=int)


def _field(feature_id: str, grid: GoalGrid, acc_x: np.ndarray,
           acc_y: np.ndarray, window: int) -> FeatureField:
    ax = _normalize_or_uniform(acc_x)
    ay = _normalize_or_uniform(acc_y)
    return FeatureField(feature_id=feature_id, axis_x=ax, axis_y=ay,
                        joint=_joint(ax, ay), window=window,
                        bin_count=(grid.nx, grid.ny))


def window_entropy(samples: np.ndarray) -> float:
    """Spectral entropy of one window, in bits.

    The constant (DC) bin is excluded, and so is the Nyquist bin for
    even-length windows, leaving n/2 - 1 frequency lines. A window with
    no off-DC power carries no information and scores 0.
    """
    x = np.asarray(samples, dtype=float)
    power = np.abs(np.fft.rfft(x)) ** 2
    power = power[1:]
    if len(x) % 2 == 0 and power.size > 0:
        power = power[:-1]
    total = power.sum()
    if total <= 0 or not np.isfinite(total):
        return 0.0
    p = power / total
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def sliding_windows(n: int, length: int = ENTROPY_WINDOW,
                    stride: int = ENTROPY_STRIDE) -> list[tuple[int, int]]:
    """(start, end) index pairs; one full-span window when n < length."""
    if n < length:
        return [(0, n)]
    return [(s, s + length) for s in range(0, n - length + 1, stride)]


def spectral_entropy(history: History, grid: GoalGrid) -> FeatureField:
    """Where the ball moves with a broad frequency content."""
    acc_x = np.zeros(grid.nx)
    acc_y = np.zeros(grid.ny)
    for traj, weight in history.recent():
        if len(traj) < MIN_ENTROPY_SAMPLES:
            continue
        for axis, acc in ((0, acc_x), (1, acc_y)):
            signal = _axis_signal(traj, axis)
            bins = _axis_bins(grid, signal, axis)
            for start, end in sliding_windows(len(signal)):
                e = window_entropy(signal[start:end])
                if e <= 0.0:
                    continue
                np.add.at(acc, bins[start:end], e * weight)
    return _field("spectral_entropy", grid, acc_x, acc_y, history.window)


def visit_frequency(history: History, grid: GoalGrid) -> FeatureField:
    """Where the ball has actually been, recency-discounted."""
    acc_x = np.zeros(grid.nx)
    acc_y = np.zeros(grid.ny)
    for traj, weight in history.recent():
        for axis, acc in ((0, acc_x), (1, acc_y)):
            bins = _axis_bins(grid, _axis_signal(traj, axis), axis)
            np.add.at(acc, bins, weight)
    return _field("visit_frequency", grid, acc_x, acc_y, history.window)


def first_differences(traj: Trajectory, axis: int) -> np.ndarray:
    """Per-step rate of change of one position component."""
    return np.diff(_axis_signal(traj, axis)) / traj.sample_time


def second_differences(traj: Trajectory, axis: int) -> np.ndarray:
    """Per-step second-order rate of change of one position component."""
    return np.diff(_axis_signal(traj, axis), n=2) / traj.sample_time ** 2


def _calm_weight(stats: np.ndarray, scale: float) -> np.ndarray:
    # slow or gentle samples score near 1, busy ones decay toward 0
    if scale > 0:
        return np.exp(-np.abs(stats) / scale)
    return (stats == 0.0).astype(float)


def _derivative_field(feature_id: str, history: History, grid: GoalGrid,
                      order: int) -> FeatureField:
    diff = first_differences if order == 1 else second_differences
    min_len = order + 1
    used = [(traj, w) for traj, w in history.recent()
            if len(traj) >= min_len]
    acc_x = np.zeros(grid.nx)
    acc_y = np.zeros(grid.ny)
    for axis, acc in ((0, acc_x), (1, acc_y)):
        pooled = [diff(traj, axis) for traj, _ in used]
        if not pooled:
            continue
        scale = float(np.median(np.abs(np.concatenate(pooled))))
        for (traj, weight), stats in zip(used, pooled):
            signal = _axis_signal(traj, axis)
            bins = _axis_bins(grid, signal[order:], axis)
            np.add.at(acc, bins, weight * _calm_weight(stats, scale))
    return _field(feature_id, grid, acc_x, acc_y, history.window)


def pace(history: History, grid: GoalGrid) -> FeatureField:
    """Where the ball dwells or moves slowly; fast sweeps score low."""
    return _derivative_field("pace", history, grid, order=1)


def reaction(history: History, grid: GoalGrid) -> FeatureField:
    """Where steering is gentle; sharp velocity reversals score low."""
    return _derivative_field("reaction", history, grid, order=2)


_FEATURE_FNS = {
    "spectral_entropy": spectral_entropy,
    "visit_frequency": visit_frequency,
    "pace": pace,
    "reaction": reaction,
}


def feature_fields(history: History, grid: GoalGrid
                   ) -> dict[str, FeatureField]:
    """All four features for one history snapshot."""
    if len(history) == 0:
        raise ValueError("history must contain at least one trajectory")
    return {fid: fn(history, grid) for fid, fn in _FEATURE_FNS.items()}
