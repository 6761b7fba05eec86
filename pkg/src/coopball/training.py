"""Cooperative training loop: collect, infer, recompose, update.

Each iteration runs one shared-control episode, scores it against the
reward field that was active while it ran, refreshes the goal posterior
and guidance features from the new trajectory, and swaps in a freshly
composed reward field for the next episode. Policy gradient updates
fire whenever enough steps have accumulated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .board import (ActionPair, BoardConfig, BoardState, Trajectory,
                    initial_state, run_episode, step, zero_policy)
from .features import FEATURE_IDS, FeatureField, History, feature_fields
from .grids import GoalGrid
from .inference import GoalField, initial_field, to_density, update_posterior
from .metrics import MetricsRecord, compute_metrics
from .ppo import PpoConfig, PpoPolicy, RolloutBatch, UpdateStats, compute_gae
from .reward import (RewardConfig, RewardField, compose, field_distance,
                     gaussian_bump_field, reward_at)

STOP_REASONS = ("human_stop", "plateau", "budget", "running")

SNAPSHOT_KINDS = ("goal_density", "reward") + FEATURE_IDS


def observation(state: BoardState) -> np.ndarray:
    """Policy input vector: position, velocity, and current tilt."""
    return np.array([state.x, state.y, state.vx, state.vy,
                     state.roll, state.pitch])


class RecordingRobot:
    """Stochastic policy wrapper that logs exactly what the nets saw.

    Observations are stored post-normalization so a later gradient update
    replays the same inputs even after the running statistics move on.
    """

    def __init__(self, policy: PpoPolicy):
        self.policy = policy
        self.raw_obs: list[np.ndarray] = []
        self.norm_obs: list[np.ndarray] = []
        self.raw_actions: list[tuple[float, float]] = []
        self.log_probs: list[float] = []
        self.values: list[float] = []

    def begin_episode(self, seed: int) -> None:
        self.policy.reseed(seed)

    def __call__(self, state: BoardState) -> tuple[float, float]:
        obs = observation(state)
        step = self.policy.act(obs)
        self.raw_obs.append(obs)
        self.norm_obs.append(self.policy.norm.normalize(obs))
        self.raw_actions.append(step.raw_action)
        self.log_probs.append(step.log_prob)
        self.values.append(step.value)
        return step.action


class StochasticRobot:
    """Sampling wrapper for frozen policies that still act with noise.

    The non-learning baseline keeps its parameters fixed but samples its
    action head like any other mode during collection, so all methods
    face the board with the same acting regime.
    """

    def __init__(self, policy: PpoPolicy):
        self.policy = policy

    def begin_episode(self, seed: int) -> None:
        self.policy.reseed(seed)

    def __call__(self, state: BoardState) -> tuple[float, float]:
        return self.policy.act(observation(state)).action


class DeterministicRobot:
    """Frozen mean-action wrapper used for validation episodes."""

    def __init__(self, policy: PpoPolicy):
        self.policy = policy

    def begin_episode(self, seed: int) -> None:
        pass

    def __call__(self, state: BoardState) -> tuple[float, float]:
        return self.policy.act(observation(state), deterministic=True).action


class RewardScaler:
    """Scales rewards by the running std of the discounted return.

    Keeps value targets near unit magnitude while the reward field's
    absolute scale drifts over a run; scaled values are clipped to
    +/-10 so single spikes cannot dominate an update.
    """

    def __init__(self, discount: float):
        self.discount = discount
        self._ret = 0.0
        self._count = 0.0
        self._mean = 0.0
        self._m2 = 0.0

    def scale(self, reward: float, done: bool) -> float:
        self._ret = reward + self.discount * self._ret
        self._count += 1.0
        delta = self._ret - self._mean
        self._mean += delta / self._count
        self._m2 += delta * (self._ret - self._mean)
        var = self._m2 / self._count if self._count > 1 else 1.0
        if done:
            self._ret = 0.0
        return float(np.clip(reward / math.sqrt(var + 1e-8), -10.0, 10.0))


def episode_rewards(traj: Trajectory, reward_field: RewardField,
                    fall_penalty: float = 0.0) -> np.ndarray:
    """Per-step rewards: field value at each successor position.

    The last transition lands on the trajectory's final state; falling
    off the board adds the penalty there.
    """
    if len(traj) == 0:
        raise ValueError("cannot score an empty trajectory")
    out = np.empty(len(traj))
    for t in range(len(traj) - 1):
        nxt = traj.records[t + 1].state
        out[t] = reward_at(reward_field, nxt.x, nxt.y)
    final = traj.final_state
    out[-1] = reward_at(reward_field, final.x, final.y)
    if traj.termination == "fell_off":
        out[-1] += fall_penalty
    return out


class _RolloutAccumulator:
    """Buffers episode steps and fires PPO updates per full horizon.

    Episodes rarely align with the experience horizon, so steps pool
    across episodes and each update consumes the oldest `horizon` of
    them, bootstrapping from the stored value of the step after the cut.
    """

    def __init__(self, policy: PpoPolicy, scaler: RewardScaler | None):
        self.policy = policy
        self.scaler = scaler
        self._obs: list[np.ndarray] = []
        self._actions: list[tuple[float, float]] = []
        self._log_probs: list[float] = []
        self._values: list[float] = []
        self._rewards: list[float] = []
        self._dones: list[float] = []

    def __len__(self) -> int:
        return len(self._obs)

    def add_episode(self, recorder: RecordingRobot,
                    rewards: np.ndarray) -> list[UpdateStats]:
        n = len(rewards)
        if n != len(recorder.norm_obs):
            raise ValueError("reward count differs from recorded steps")
        self._obs.extend(recorder.norm_obs)
        self._actions.extend(recorder.raw_actions)
        self._log_probs.extend(recorder.log_probs)
        self._values.extend(recorder.values)
        for i, r in enumerate(rewards):
            done = i == n - 1
            scaled = (self.scaler.scale(float(r), done)
                      if self.scaler is not None else float(r))
            self._rewards.append(scaled)
            self._dones.append(1.0 if done else 0.0)
        stats = self._drain()
        self.policy.norm.update(np.array(recorder.raw_obs))
        return stats

    def _drain(self) -> list[UpdateStats]:
        horizon = self.policy.cfg.horizon
        all_stats = []
        while len(self._obs) >= horizon:
            last_value = (self._values[horizon]
                          if len(self._obs) > horizon else 0.0)
            batch = RolloutBatch(
                obs=np.array(self._obs[:horizon]),
                actions=np.array(self._actions[:horizon]),
                log_probs=np.array(self._log_probs[:horizon]),
                rewards=np.array(self._rewards[:horizon]),
                values=np.array(self._values[:horizon]),
                dones=np.array(self._dones[:horizon]),
                last_value=last_value)
            compute_gae(batch, self.policy.cfg)
            all_stats.append(self.policy.update(batch))
            for buf in (self._obs, self._actions, self._log_probs,
                        self._values, self._rewards, self._dones):
                del buf[:horizon]
        return all_stats


@dataclass(frozen=True)
class TrainingConfig:
    """Loop-level knobs, independent of the PPO and reward configs."""

    max_iterations: int = 40
    satisfied_stop: int = 3
    plateau_window: int = 5
    plateau_tolerance: float = 0.02
    plateau_min_iterations: int = 10
    kernel_lengthscale: float | None = None
    obs_noise: float = 1.0
    snapshot_every: int = 1
    reward_scaling: bool = True
    keep_trajectories: bool = False
    density_scale: float | None = None

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.satisfied_stop < 1:
            raise ValueError("satisfied_stop must be at least 1")
        if self.plateau_window < 2:
            raise ValueError("plateau_window must be at least 2")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be at least 1")


@dataclass
class IterationLog:
    iteration_index: int
    metrics: MetricsRecord
    goal_satisfied: bool
    new_cells_visited: bool
    reward_distance: float | None
    update_stats: list[UpdateStats]
    snapshots: dict[str, np.ndarray] | None


@dataclass
class TrainingResult:
    logs: list[IterationLog]
    stop_reason: str
    convergence_iteration: int | None
    trajectories: list[Trajectory] = field(default_factory=list)

    @property
    def specificity_curve(self) -> list[float]:
        return [log.metrics.specificity for log in self.logs]


def _uniform_features(grid: GoalGrid) -> dict[str, FeatureField]:
    """Flat feature set used before any trajectory has been observed."""
    ax = np.full(grid.nx, 1.0 / grid.nx)
    ay = np.full(grid.ny, 1.0 / grid.ny)
    joint = np.full(grid.n_cells, 1.0 / grid.n_cells)
    return {fid: FeatureField(feature_id=fid, axis_x=ax.copy(),
                              axis_y=ay.copy(), joint=joint.copy(),
                              window=0, bin_count=(grid.nx, grid.ny))
            for fid in FEATURE_IDS}


class CooperativeTrainer:
    """Owns the per-iteration pipeline; the caller owns episode collection.

    Batch experiments drive it through `train`; the live service feeds it
    trajectories it collected tick by tick. Either way the sequence per
    iteration is identical: score the episode against the reward field it
    ran under, update the policy, then refresh posterior, features, and
    reward for the next episode.
    """

    def __init__(self, board_cfg: BoardConfig, grid: GoalGrid,
                 policy: PpoPolicy, reward_cfg: RewardConfig,
                 train_cfg: TrainingConfig = TrainingConfig()):
        self.board_cfg = board_cfg
        self.grid = grid
        self.policy = policy
        self.reward_cfg = reward_cfg
        self.train_cfg = train_cfg
        self.iteration = 0
        self.stop_reason = "running"
        self.convergence_iteration: int | None = None
        self.logs: list[IterationLog] = []
        self.trajectories: list[Trajectory] = []
        self.learning = reward_cfg.mode != "fixed_external"
        self._satisfied_streak = 0
        self._visited: set[int] = set()
        self._stop_requested = False

        if self.learning:
            self.goal = initial_field(
                grid, lengthscale=train_cfg.kernel_lengthscale,
                obs_noise=train_cfg.obs_noise)
            self.history = History()
            self.features = _uniform_features(grid)
            self.reward_field: RewardField | None = compose(
                self.goal, self.features, reward_cfg)
            scaler = (RewardScaler(policy.cfg.discount)
                      if train_cfg.reward_scaling else None)
            self._accumulator = _RolloutAccumulator(policy, scaler)
        else:
            self.goal = None
            self.history = History()
            self.features = None
            self.reward_field = None
            self._accumulator = None

    def should_continue(self) -> bool:
        return self.stop_reason == "running"

    def request_stop(self) -> None:
        """External stop signal; takes effect after the current episode."""
        self._stop_requested = True

    def robot_policy(self):
        if self.learning:
            return RecordingRobot(self.policy)
        return StochasticRobot(self.policy)

    def _mark_visits(self, traj: Trajectory) -> bool:
        fresh = False
        for rec in traj.records:
            idx, _ = self.grid.cell_index(rec.state.x, rec.state.y)
            if idx not in self._visited:
                self._visited.add(idx)
                fresh = True
        return fresh

    def _snapshots(self) -> dict[str, np.ndarray]:
        snaps = {"goal_density": to_density(self.goal),
                 "reward": self.reward_field.values.copy()}
        for fid in FEATURE_IDS:
            snaps[fid] = self.features[fid].joint.copy()
        return snaps

    def _plateaued(self) -> bool:
        cfg = self.train_cfg
        if len(self.logs) < max(cfg.plateau_window,
                                cfg.plateau_min_iterations):
            return False
        tail = [log.metrics.specificity
                for log in self.logs[-cfg.plateau_window:]]
        center = max(abs(sum(tail) / len(tail)), 1e-12)
        return (max(tail) - min(tail)) / center < cfg.plateau_tolerance

    def process_episode(self, traj: Trajectory,
                        recorder: RecordingRobot | None = None,
                        satisfied: bool = False) -> IterationLog:
        """Consume one collected episode and advance every component."""
        if not self.should_continue():
            raise RuntimeError("training already stopped")
        k = self.iteration
        metrics = compute_metrics(traj, iteration_index=k,
                                  density_scale=self.train_cfg.density_scale)
        new_cells = self._mark_visits(traj)
        update_stats: list[UpdateStats] = []
        reward_distance: float | None = None

        if self.learning:
            if recorder is None:
                raise ValueError("learning modes need the episode recorder")
            rewards = episode_rewards(traj, self.reward_field,
                                      self.reward_cfg.fall_penalty)
            update_stats = self._accumulator.add_episode(recorder, rewards)

            self.history = self.history.with_trajectory(traj, k)
            self.goal = update_posterior(self.goal, traj)
            self.features = feature_fields(self.history, self.grid)
            next_field = compose(self.goal, self.features, self.reward_cfg)
            reward_distance = field_distance(next_field, self.reward_field)
            self.reward_field = next_field

        self._satisfied_streak = self._satisfied_streak + 1 if satisfied else 0
        self.iteration = k + 1

        if satisfied and self._satisfied_streak >= self.train_cfg.satisfied_stop:
            self.stop_reason = "human_stop"
            self.convergence_iteration = k
        elif self._stop_requested:
            self.stop_reason = "human_stop"
            self.convergence_iteration = k

        log = IterationLog(
            iteration_index=k, metrics=metrics, goal_satisfied=satisfied,
            new_cells_visited=new_cells, reward_distance=reward_distance,
            update_stats=update_stats, snapshots=None)
        self.logs.append(log)

        if self.stop_reason == "running":
            if self._plateaued():
                self.stop_reason = "plateau"
                self.convergence_iteration = k
            elif self.iteration >= self.train_cfg.max_iterations:
                self.stop_reason = "budget"

        last = self.stop_reason != "running"
        if self.learning and (k % self.train_cfg.snapshot_every == 0 or last):
            log.snapshots = self._snapshots()
        if self.train_cfg.keep_trajectories:
            self.trajectories.append(traj)
        return log

    def result(self) -> TrainingResult:
        return TrainingResult(logs=self.logs, stop_reason=self.stop_reason,
                              convergence_iteration=self.convergence_iteration,
                              trajectories=self.trajectories)


def _episode_seed(base_seed: int, iteration: int) -> int:
    return base_seed * 100003 + iteration


def train(policy: PpoPolicy, partner, board_cfg: BoardConfig,
          grid: GoalGrid, reward_cfg: RewardConfig,
          train_cfg: TrainingConfig = TrainingConfig(),
          seed: int = 0) -> TrainingResult:
    """Run the full cooperative loop against a synthetic partner."""
    trainer = CooperativeTrainer(board_cfg, grid, policy, reward_cfg,
                                 train_cfg)
    while trainer.should_continue():
        k = trainer.iteration
        partner.begin_iteration(k)
        robot = trainer.robot_policy()
        traj = run_episode(partner, robot, board_cfg,
                           seed=_episode_seed(seed, k))
        recorder = robot if isinstance(robot, RecordingRobot) else None
        trainer.process_episode(traj, recorder,
                                satisfied=partner.goal_satisfied(traj))
    return trainer.result()


def validation_episode(policy: PpoPolicy, human, board_cfg: BoardConfig,
                       seed: int, iteration_index: int = 0,
                       density_scale: float | None = None
                       ) -> tuple[Trajectory, MetricsRecord]:
    """One frozen-policy episode scored with the standard metrics."""
    traj = run_episode(human, DeterministicRobot(policy), board_cfg,
                       seed=seed)
    return traj, compute_metrics(traj, iteration_index=iteration_index,
                                 density_scale=density_scale)


@dataclass
class StaticEvalPoint:
    iteration_index: int
    mean_x: float
    mean_y: float
    entropy: float


@dataclass
class StaticTrainingResult:
    evals: list[StaticEvalPoint]
    iterations_run: int
    reached: bool


def normalization_warmup(policy: PpoPolicy, board_cfg: BoardConfig,
                         episodes: int, seed: int) -> None:
    """Seed observation statistics with random-action episodes.

    Without this, the first episode's near-still states make the running
    variance tiny, later inputs rail against the normalization clip, and
    the tanh layers saturate exactly when learning should start.
    """
    rng = np.random.default_rng([seed, 0x7A3F1])
    rows = []
    for _ in range(episodes):
        state = initial_state(board_cfg)
        for _ in range(board_cfg.episode_steps):
            action = (float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)))
            rows.append(observation(state))
            state = step(state, ActionPair(human=(0.0, 0.0), robot=action),
                         board_cfg)
            if state.terminated != "none":
                break
    policy.norm.update(np.array(rows))


def train_on_static_field(policy: PpoPolicy, board_cfg: BoardConfig,
                          reward_field: RewardField, iterations: int,
                          seed: int = 0, human=zero_policy,
                          fall_penalty: float = 0.0,
                          reward_scaling: bool = True,
                          eval_every: int = 10,
                          stop_within: tuple[tuple[float, float], float]
                          | None = None,
                          exploring_start_range: float | None = None,
                          entropy_anneal: bool = True,
                          norm_warmup_episodes: int = 3
                          ) -> StaticTrainingResult:
    """PPO against a frozen reward field with a scripted (or idle) human.

    Unassisted training needs help no cooperative partner provides, so
    three mechanisms are on by default: observation statistics warm up on
    random-action episodes, training episodes can start from random board
    positions (`exploring_start_range` sets the half-width of the start
    box), and the entropy bonus anneals linearly to zero over the first
    half of the budget so exploration gives way to exploitation.
    Evaluation episodes
    always start from the configured ball start with the deterministic
    policy; `stop_within` (target point, radius) ends training early once
    an evaluation's mean position lands inside it.
    """
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    scaler = RewardScaler(policy.cfg.discount) if reward_scaling else None
    accumulator = _RolloutAccumulator(policy, scaler)
    if norm_warmup_episodes > 0:
        normalization_warmup(policy, board_cfg, norm_warmup_episodes,
                             seed=seed)
    start_rng = np.random.default_rng([seed, 0xB0A2D])
    base_cfg = policy.cfg
    evals: list[StaticEvalPoint] = []
    reached = False
    ran = 0

    def evaluate(k: int) -> StaticEvalPoint:
        _, metrics = validation_episode(policy, human, board_cfg,
                                        seed=_episode_seed(seed, k) + 1,
                                        iteration_index=k)
        return StaticEvalPoint(iteration_index=k, mean_x=metrics.mean_x,
                               mean_y=metrics.mean_y,
                               entropy=policy.entropy())

    try:
        for k in range(iterations):
            if entropy_anneal:
                # bonus hits zero at half budget; the rest is exploitation
                weight = base_cfg.entropy_weight * max(
                    0.0, 1.0 - 2.0 * k / iterations)
                policy.cfg = replace(base_cfg, entropy_weight=weight)
            episode_cfg = board_cfg
            if exploring_start_range is not None:
                r = exploring_start_range
                episode_cfg = replace(
                    board_cfg,
                    ball_start=(float(start_rng.uniform(-r, r)),
                                float(start_rng.uniform(-r, r))))
            recorder = RecordingRobot(policy)
            traj = run_episode(human, recorder, episode_cfg,
                               seed=_episode_seed(seed, k))
            rewards = episode_rewards(traj, reward_field, fall_penalty)
            accumulator.add_episode(recorder, rewards)
            ran = k + 1
            if (k + 1) % eval_every == 0 or k == iterations - 1:
                point = evaluate(k)
                evals.append(point)
                if stop_within is not None:
                    (tx, ty), radius = stop_within
                    if math.hypot(point.mean_x - tx,
                                  point.mean_y - ty) <= radius:
                        reached = True
                        break
    finally:
        policy.cfg = base_cfg
    return StaticTrainingResult(evals=evals, iterations_run=ran,
                                reached=reached)


def pretrain_center_policy(board_cfg: BoardConfig | None = None,
                           ppo_cfg: PpoConfig | None = None,
                           seed: int = 0, iterations: int = 200,
                           ) -> tuple[PpoPolicy, StaticTrainingResult]:
    """Train the non-learning baseline: a policy that parks at the start.

    Runs PPO against a static peak centered on the ball's start position
    with an idle human. Training episodes begin from random positions so
    the policy learns to bring the ball back, not merely to sit still;
    it stops once the deterministic policy holds the episode mean within
    a quarter of the peak width of the start point.
    """
    board_cfg = board_cfg or BoardConfig.env1()
    grid = GoalGrid.for_board(board_cfg)
    peak = gaussian_bump_field(grid, board_cfg.ball_start, height=10.0,
                               width=0.15)
    policy = PpoPolicy(ppo_cfg or PpoConfig.sim(), seed=seed)
    span = 0.9 * min(board_cfg.half_width, board_cfg.half_height)
    result = train_on_static_field(policy, board_cfg, peak, iterations,
                                   seed=seed,
                                   stop_within=(board_cfg.ball_start, 0.04),
                                   exploring_start_range=span)
    return policy, result
