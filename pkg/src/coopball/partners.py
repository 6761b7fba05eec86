"""Scripted stand-ins for human partners.

Each partner holds a general goal region rather than a point: it steers
the ball toward an internal target sampled inside the region, reacts more
firmly when the ball moves against its intent, pushes harder the longer
the ball sits stalled outside the region, abandons a hopeless standoff
after a while and re-grips toward a fresh spot, relaxes once the ball
sits calmly where it wants it, and shrinks the region between iterations
as its idea of the goal sharpens. Stability of the steering law matters
because commands drive tilt rate, two integrations away from position;
the velocity and tilt feedback terms keep the closed loop damped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .board import BoardState, Trajectory
from .metrics import mean_position, specificity

DEFAULT_RADIUS_FLOOR = 0.045  # a couple of grid cells; a policy can hit it


@dataclass
class GeneralGoalPartner:
    goal_center: tuple[float, float]
    goal_radius: float = 0.1
    specification_rate: float = 0.9
    radius_floor: float = DEFAULT_RADIUS_FLOOR
    reactivity_gain: float = 1.0
    velocity_damping: float = 2.0
    tilt_damping: float = 1.2
    comfort_threshold: float = 0.03
    comfort_relax: float = 0.2
    disagreement_response: float = 1.6
    impatience: float = 12.0
    frustration_rate: float = 0.02
    retry_patience: int = 100
    noise_std: float = 0.05
    stop_specificity: float = 20.0
    rng_seed: int = 0

    FRUSTRATION_DECAY = 0.97

    def __post_init__(self) -> None:
        if not 0.0 < self.specification_rate <= 1.0:
            raise ValueError("specification_rate must be in (0, 1]")
        if self.radius_floor <= 0 or self.goal_radius < self.radius_floor:
            raise ValueError("need goal_radius >= radius_floor > 0")
        if self.disagreement_response < 1.0:
            raise ValueError("disagreement_response must be at least 1")
        if self.impatience < 1.0:
            raise ValueError("impatience must be at least 1")
        if not 0.0 <= self.frustration_rate <= 1.0:
            raise ValueError("frustration_rate must be in [0, 1]")
        if self.retry_patience < 1:
            raise ValueError("retry_patience must be at least 1")
        self.current_radius = self.goal_radius
        self.internal_target = tuple(self.goal_center)
        self._target_rng = np.random.default_rng(self.rng_seed)
        self._noise_rng = np.random.default_rng(self.rng_seed + 1)
        self._frustration = 0.0
        self._standoff_steps = 0

    def begin_iteration(self, iteration_index: int) -> None:
        """Shrink the region and pick a fresh target inside it."""
        if iteration_index < 0:
            raise ValueError("iteration_index must be non-negative")
        self.current_radius = max(
            self.radius_floor,
            self.goal_radius * self.specification_rate ** iteration_index)
        angle = self._target_rng.uniform(0.0, 2.0 * math.pi)
        dist = self.current_radius * math.sqrt(self._target_rng.uniform())
        self.internal_target = (self.goal_center[0] + dist * math.cos(angle),
                                self.goal_center[1] + dist * math.sin(angle))

    def begin_episode(self, seed: int) -> None:
        self._noise_rng = np.random.default_rng(seed)
        self._frustration = 0.0
        self._standoff_steps = 0

    def _inside_region(self, x: float, y: float) -> bool:
        return math.hypot(x - self.goal_center[0],
                          y - self.goal_center[1]) <= self.current_radius

    def _retry(self) -> None:
        """Abandon a hopeless standoff: relax, aim for a fresh spot."""
        self._frustration = 0.0
        self._standoff_steps = 0
        angle = self._noise_rng.uniform(0.0, 2.0 * math.pi)
        dist = self.current_radius * math.sqrt(self._noise_rng.uniform())
        self.internal_target = (self.goal_center[0] + dist * math.cos(angle),
                                self.goal_center[1] + dist * math.sin(angle))

    def __call__(self, state: BoardState) -> tuple[float, float]:
        noise = self._noise_rng.normal(0.0, self.noise_std, 2)
        inside = self._inside_region(state.x, state.y)
        slow = math.hypot(state.vx, state.vy) < self.comfort_threshold
        calm = inside and slow
        stalled = slow and not inside
        if stalled:
            # a parked ball in the wrong place gets shoved harder and
            # harder; a robot that cancels the push loses the standoff
            self._frustration = min(1.0,
                                    self._frustration + self.frustration_rate)
            if self._frustration >= 1.0:
                self._standoff_steps += 1
                if self._standoff_steps >= self.retry_patience:
                    self._retry()
        else:
            # authority fades slowly so a drag in progress is not dropped
            self._frustration *= self.FRUSTRATION_DECAY
            self._standoff_steps = 0
        boost = 1.0 + (self.impatience - 1.0) * self._frustration
        cmds = []
        for err, vel, tilt, n in (
                (self.internal_target[0] - state.x, state.vx, state.roll,
                 noise[0]),
                (self.internal_target[1] - state.y, state.vy, state.pitch,
                 noise[1])):
            gain = self.reactivity_gain * boost
            if err * vel < 0.0:
                gain *= self.disagreement_response
            u = (gain * err - self.velocity_damping * vel
                 - self.tilt_damping * tilt)
            if calm:
                u *= self.comfort_relax
            cmds.append(max(-1.0, min(1.0, u + n)))
        return (cmds[0], cmds[1])

    def goal_satisfied(self, traj: Trajectory) -> bool:
        """Whether the partner would call this episode good and stop.

        Requires a full episode whose mean position sits inside the
        current region and whose positional spread stays under the
        partner's tolerance.
        """
        if traj.termination != "episode_end" or len(traj) == 0:
            return False
        mx, my = mean_position(traj)
        if not self._inside_region(mx, my):
            return False
        return specificity(traj) <= self.stop_specificity

    def parameters(self) -> dict:
        return {
            "goal_center": list(self.goal_center),
            "goal_radius": self.goal_radius,
            "specification_rate": self.specification_rate,
            "radius_floor": self.radius_floor,
            "reactivity_gain": self.reactivity_gain,
            "velocity_damping": self.velocity_damping,
            "tilt_damping": self.tilt_damping,
            "comfort_threshold": self.comfort_threshold,
            "comfort_relax": self.comfort_relax,
            "disagreement_response": self.disagreement_response,
            "impatience": self.impatience,
            "frustration_rate": self.frustration_rate,
            "retry_patience": self.retry_patience,
            "noise_std": self.noise_std,
            "stop_specificity": self.stop_specificity,
            "rng_seed": self.rng_seed,
        }


GOAL_PRESETS = {
    "env1": {"center": (0.0, 0.15), "radius": 0.1},
    "env2": {"center": (-0.15, -0.15), "radius": 0.1},
}


def make_partner(environment: str, seed: int = 0,
                 **overrides) -> GeneralGoalPartner:
    if environment not in GOAL_PRESETS:
        raise ValueError(f"unknown environment {environment!r}")
    preset = GOAL_PRESETS[environment]
    kwargs = dict(goal_center=preset["center"],
                  goal_radius=preset["radius"], rng_seed=seed)
    kwargs.update(overrides)
    return GeneralGoalPartner(**kwargs)


def population(environment: str, count: int = 15, seed: int = 0,
               **overrides) -> list[GeneralGoalPartner]:
    """Deterministic family of partner parameterizations.

    Gains, noise levels, patience and shrink rates cycle through small
    grids so any two members differ in at least one trait; the damping
    terms grow with the proportional gain to keep every member's control
    loop stable.
    """
    members = []
    for i in range(count):
        kwargs = dict(
            reactivity_gain=0.7 + 0.12 * (i % 5),
            velocity_damping=2.0 + 0.4 * (i % 3),
            tilt_damping=1.2 + 0.1 * (i % 2),
            noise_std=0.02 + 0.03 * (i % 3),
            specification_rate=0.86 + 0.04 * (i % 3),
            comfort_threshold=0.02 + 0.01 * (i % 2),
            disagreement_response=1.3 + 0.3 * (i % 2),
            impatience=8.0 + 4.0 * (i % 3),
            frustration_rate=0.02 + 0.01 * (i % 2),
            retry_patience=80 + 40 * (i % 2),
        )
        kwargs.update(overrides)
        members.append(make_partner(environment, seed=seed + i, **kwargs))
    return members
