"""Fixed-timestep physics for a ball rolling on a jointly tilted board.

Both players command tilt rates; the commands add, the tilt integrates
with clamping, and the ball rolls under the tilt-projected gravity with a
capped Coulomb-style rolling resistance. Environment 1 is fully walled;
environment 2 leaves the +x and +y edges open so the ball can fall off.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Protocol, Sequence

TERMINATION_CAUSES = ("none", "fell_off", "episode_end", "human_stop")


class EpisodeTerminatedError(RuntimeError):
    """Raised when stepping a state that has already terminated."""


def _clamp(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


@dataclass(frozen=True)
class BoardConfig:
    half_width: float = 0.25
    half_height: float = 0.25
    # wall flags per edge; an absent wall is an open edge the ball falls off
    wall_pos_x: bool = True
    wall_neg_x: bool = True
    wall_pos_y: bool = True
    wall_neg_y: bool = True
    max_tilt: float = 0.26
    max_tilt_rate: float = 0.52
    gravity: float = 9.81
    rolling_friction_coeff: float = 0.05
    restitution: float = 0.5
    sample_time: float = 0.05
    episode_steps: int = 800
    ball_start: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if min(self.half_width, self.half_height, self.max_tilt,
               self.sample_time) <= 0:
            raise ValueError(
                "half_width, half_height, max_tilt and sample_time "
                "must be positive")
        if not 0.0 <= self.restitution <= 1.0:
            raise ValueError("restitution must be in [0, 1]")
        if not 0.0 <= self.rolling_friction_coeff < 1.0:
            raise ValueError("rolling_friction_coeff must be in [0, 1)")
        if self.episode_steps < 1:
            raise ValueError("episode_steps must be at least 1")

    @classmethod
    def env1(cls, **overrides) -> "BoardConfig":
        """Rectangular board, all four walls present."""
        return cls(**overrides)

    @classmethod
    def env2(cls, **overrides) -> "BoardConfig":
        """Square board with the two adjacent +x/+y walls removed.

        The safe area is therefore the lower-left quadrant.
        """
        overrides.setdefault("wall_pos_x", False)
        overrides.setdefault("wall_pos_y", False)
        return cls(**overrides)

    @classmethod
    def preset(cls, environment: str, timing: str = "sim",
               **overrides) -> "BoardConfig":
        """Named environment ('env1'|'env2') and timing ('sim'|'physical')."""
        if timing == "physical":
            overrides.setdefault("sample_time", 0.1)
            overrides.setdefault("episode_steps", 400)
        elif timing != "sim":
            raise ValueError(f"unknown timing preset {timing!r}")
        if environment == "env1":
            return cls.env1(**overrides)
        if environment == "env2":
            return cls.env2(**overrides)
        raise ValueError(f"unknown environment {environment!r}")

    def to_json(self) -> str:
        data = dict(self.__dict__)
        data["ball_start"] = list(self.ball_start)
        return json.dumps(data, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BoardConfig":
        data = json.loads(text)
        if "ball_start" in data:
            data["ball_start"] = tuple(data["ball_start"])
        return cls(**data)


@dataclass(frozen=True)
class BoardState:
    x: float
    y: float
    vx: float
    vy: float
    roll: float   # tilt about the x command axis; positive drives +x
    pitch: float  # tilt about the y command axis; positive drives +y
    step_index: int = 0
    terminated: str = "none"

    @property
    def ball_pos(self) -> tuple[float, float]:
        return (self.x, self.y)

    @property
    def ball_vel(self) -> tuple[float, float]:
        return (self.vx, self.vy)


@dataclass(frozen=True)
class ActionPair:
    human: tuple[float, float] = (0.0, 0.0)
    robot: tuple[float, float] = (0.0, 0.0)

    def clamped(self) -> "ActionPair":
        return ActionPair(
            human=(_clamp(self.human[0], -1.0, 1.0),
                   _clamp(self.human[1], -1.0, 1.0)),
            robot=(_clamp(self.robot[0], -1.0, 1.0),
                   _clamp(self.robot[1], -1.0, 1.0)),
        )


@dataclass(frozen=True)
class TrajectoryRecord:
    step_index: int
    state: BoardState
    actions: ActionPair


@dataclass(frozen=True)
class Trajectory:
    """States and the actions taken from them, one record per executed step."""

    records: tuple[TrajectoryRecord, ...]
    termination: str
    final_state: BoardState
    sample_time: float

    def __len__(self) -> int:
        return len(self.records)

    @cached_property
    def content_hash(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()

    def positions(self):
        import numpy as np
        return np.array([(r.state.x, r.state.y) for r in self.records])

    def human_actions(self):
        import numpy as np
        return np.array([r.actions.human for r in self.records])

    def robot_actions(self):
        import numpy as np
        return np.array([r.actions.robot for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "x", "y", "vx", "vy", "roll", "pitch",
                         "h_roll", "h_pitch", "r_roll", "r_pitch",
                         "terminated"])
        last = len(self.records) - 1
        for i, rec in enumerate(self.records):
            s, a = rec.state, rec.actions
            writer.writerow([
                rec.step_index,
                repr(float(s.x)), repr(float(s.y)),
                repr(float(s.vx)), repr(float(s.vy)),
                repr(float(s.roll)), repr(float(s.pitch)),
                repr(float(a.human[0])), repr(float(a.human[1])),
                repr(float(a.robot[0])), repr(float(a.robot[1])),
                self.termination if i == last else "none",
            ])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, sample_time: float) -> "Trajectory":
        reader = csv.reader(io.StringIO(text))
        next(reader)  # header
        records = []
        termination = "episode_end"
        for row in reader:
            step = int(row[0])
            x, y, vx, vy, roll, pitch = (float(v) for v in row[1:7])
            actions = ActionPair(human=(float(row[7]), float(row[8])),
                                 robot=(float(row[9]), float(row[10])))
            state = BoardState(x=x, y=y, vx=vx, vy=vy, roll=roll,
                               pitch=pitch, step_index=step)
            records.append(TrajectoryRecord(step, state, actions))
            if row[11] != "none":
                termination = row[11]
        final = replace(records[-1].state,
                        step_index=records[-1].step_index + 1,
                        terminated=termination)
        return cls(records=tuple(records), termination=termination,
                   final_state=final, sample_time=sample_time)


def initial_state(cfg: BoardConfig) -> BoardState:
    return BoardState(x=cfg.ball_start[0], y=cfg.ball_start[1],
                      vx=0.0, vy=0.0, roll=0.0, pitch=0.0)


def _resolve_axis(pos: float, vel: float, limit: float, wall_lo: bool,
                  wall_hi: bool, restitution: float
                  ) -> tuple[float, float, bool]:
    """Mirror-reflect off a wall or report a fall past an open edge."""
    if pos > limit:
        if not wall_hi:
            return pos, vel, True
        pos = 2.0 * limit - pos
        vel = -restitution * vel
    elif pos < -limit:
        if not wall_lo:
            return pos, vel, True
        pos = -2.0 * limit - pos
        vel = -restitution * vel
    return _clamp(pos, -limit, limit), vel, False


def step(state: BoardState, actions: ActionPair,
         cfg: BoardConfig) -> BoardState:
    """Advance one fixed timestep.

    Tilt integrates the summed clamped commands at max_tilt_rate and is
    clamped to +/-max_tilt. The ball uses semi-implicit Euler with
    acceleration g*sin(tilt) per axis; rolling resistance removes at most
    the current speed so it can hold the ball at rest but never reverse
    it. Wall contact mirrors position and scales the normal velocity by
    the restitution; crossing an open edge terminates with the position
    frozen at the last in-bounds value.
    """
    if state.terminated != "none":
        raise EpisodeTerminatedError(
            f"cannot step a state terminated with {state.terminated!r}")
    a = actions.clamped()
    tau = cfg.sample_time
    rate = cfg.max_tilt_rate

    roll = _clamp(state.roll + (a.human[0] + a.robot[0]) * rate * tau,
                  -cfg.max_tilt, cfg.max_tilt)
    pitch = _clamp(state.pitch + (a.human[1] + a.robot[1]) * rate * tau,
                   -cfg.max_tilt, cfg.max_tilt)

    g = cfg.gravity
    friction_dv = cfg.rolling_friction_coeff * g * tau
    vx = state.vx + g * math.sin(roll) * tau
    if vx:
        vx -= math.copysign(min(friction_dv, abs(vx)), vx)
    vy = state.vy + g * math.sin(pitch) * tau
    if vy:
        vy -= math.copysign(min(friction_dv, abs(vy)), vy)

    x = state.x + vx * tau
    y = state.y + vy * tau

    x, vx, fell_x = _resolve_axis(x, vx, cfg.half_width,
                                  cfg.wall_neg_x, cfg.wall_pos_x,
                                  cfg.restitution)
    y, vy, fell_y = _resolve_axis(y, vy, cfg.half_height,
                                  cfg.wall_neg_y, cfg.wall_pos_y,
                                  cfg.restitution)

    step_index = state.step_index + 1
    if fell_x or fell_y:
        return BoardState(x=state.x, y=state.y, vx=0.0, vy=0.0,
                          roll=roll, pitch=pitch, step_index=step_index,
                          terminated="fell_off")
    terminated = "episode_end" if step_index >= cfg.episode_steps else "none"
    return BoardState(x=x, y=y, vx=vx, vy=vy, roll=roll, pitch=pitch,
                      step_index=step_index, terminated=terminated)


class EpisodePolicy(Protocol):
    def __call__(self, state: BoardState) -> tuple[float, float]: ...


PolicyFn = Callable[[BoardState], tuple[float, float]]


def run_episode(human: PolicyFn, robot: PolicyFn, cfg: BoardConfig,
                seed: int = 0) -> Trajectory:
    """Roll out one episode; same seed and policies give an identical result.

    Policies exposing `begin_episode(seed)` are reset first (human gets
    2*seed, robot 2*seed+1 so their streams never collide).
    """
    for policy, sub in ((human, 0), (robot, 1)):
        begin = getattr(policy, "begin_episode", None)
        if begin is not None:
            begin(2 * seed + sub)
    state = initial_state(cfg)
    records = []
    while state.terminated == "none":
        actions = ActionPair(human=tuple(human(state)),
                             robot=tuple(robot(state)))
        nxt = step(state, actions, cfg)
        records.append(TrajectoryRecord(state.step_index, state, actions))
        state = nxt
    return Trajectory(records=tuple(records), termination=state.terminated,
                      final_state=state, sample_time=cfg.sample_time)


def zero_policy(state: BoardState) -> tuple[float, float]:
    return (0.0, 0.0)
