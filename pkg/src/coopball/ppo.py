"""Actor-critic PPO for continuous 2-D tilt-rate control, in plain numpy.

Small tanh networks, a global learned log-std, clipped-surrogate updates
with GAE advantages, and Adam. Everything is explicit so gradients can be
verified against finite differences, and checkpoints are plain JSON.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class PpoConfig:
    discount: float = 0.995
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.05
    entropy_weight: float = 0.02
    value_weight: float = 0.5
    learning_rate: float = 0.001
    epochs: int = 3
    minibatch_size: int = 64
    horizon: int = 512
    hidden_layout: tuple[int, ...] = (64, 64)

    def __post_init__(self) -> None:
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if min(self.epochs, self.minibatch_size, self.horizon) < 1:
            raise ValueError("epochs, minibatch_size and horizon must be "
                             "at least 1")
        if not self.hidden_layout:
            raise ValueError("hidden_layout must name at least one layer")

    @classmethod
    def sim(cls, **overrides) -> "PpoConfig":
        return cls(**overrides)

    @classmethod
    def physical(cls, **overrides) -> "PpoConfig":
        overrides.setdefault("entropy_weight", 0.04)
        overrides.setdefault("minibatch_size", 128)
        overrides.setdefault("horizon", 256)
        return cls(**overrides)


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_value: float = 0.0
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __post_init__(self) -> None:
        n = len(self.obs)
        for name in ("actions", "log_probs", "rewards", "values", "dones"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from obs length")

    def __len__(self) -> int:
        return len(self.obs)


def compute_gae(batch: RolloutBatch, cfg: PpoConfig) -> RolloutBatch:
    """Fill advantages and returns with the standard GAE recursion."""
    n = len(batch)
    advantages = np.zeros(n)
    running = 0.0
    for t in reversed(range(n)):
        nonterminal = 1.0 - batch.dones[t]
        next_value = batch.values[t + 1] if t + 1 < n else batch.last_value
        delta = (batch.rewards[t]
                 + cfg.discount * next_value * nonterminal
                 - batch.values[t])
        running = delta + cfg.discount * cfg.gae_lambda * nonterminal * running
        advantages[t] = running
    batch.advantages = advantages
    batch.returns = advantages + batch.values
    return batch


class RunningNorm:
    """Streaming mean/variance used to whiten observations."""

    def __init__(self, dim: int):
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, rows: np.ndarray) -> None:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        for row in rows:
            self.count += 1.0
            delta = row - self.mean
            self.mean = self.mean + delta / self.count
            self.m2 = self.m2 + delta * (row - self.mean)

    @property
    def variance(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.mean)
        return self.m2 / self.count

    def normalize(self, row: np.ndarray) -> np.ndarray:
        scaled = (np.asarray(row, dtype=float) - self.mean) / np.sqrt(
            self.variance + 1e-8)
        return np.clip(scaled, -10.0, 10.0)

    def state(self) -> dict:
        return {"count": self.count, "mean": self.mean.tolist(),
                "m2": self.m2.tolist()}

    @classmethod
    def from_state(cls, data: dict) -> "RunningNorm":
        norm = cls(len(data["mean"]))
        norm.count = float(data["count"])
        norm.mean = np.array(data["mean"], dtype=float)
        norm.m2 = np.array(data["m2"], dtype=float)
        return norm


def _orthogonal(rng: np.random.Generator, rows: int, cols: int,
                gain: float) -> np.ndarray:
    a = rng.standard_normal((rows, cols))
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    w = u if u.shape == (rows, cols) else vt
    return gain * w


def _init_mlp(rng: np.random.Generator, prefix: str, in_dim: int,
              hidden: tuple[int, ...], out_dim: int,
              out_gain: float) -> dict[str, np.ndarray]:
    params = {}
    last = in_dim
    for i, width in enumerate(hidden):
        params[f"{prefix}_w{i}"] = _orthogonal(rng, width, last,
                                               math.sqrt(2.0))
        params[f"{prefix}_b{i}"] = np.zeros(width)
        last = width
    n = len(hidden)
    params[f"{prefix}_w{n}"] = _orthogonal(rng, out_dim, last, out_gain)
    params[f"{prefix}_b{n}"] = np.zeros(out_dim)
    return params


def _mlp_forward(params: dict, prefix: str, x: np.ndarray,
                 n_hidden: int) -> tuple[np.ndarray, list[np.ndarray]]:
    caches = [x]
    h = x
    for i in range(n_hidden):
        h = np.tanh(h @ params[f"{prefix}_w{i}"].T + params[f"{prefix}_b{i}"])
        caches.append(h)
    out = h @ params[f"{prefix}_w{n_hidden}"].T + params[
        f"{prefix}_b{n_hidden}"]
    return out, caches


def _mlp_backward(params: dict, prefix: str, caches: list[np.ndarray],
                  d_out: np.ndarray, n_hidden: int) -> dict[str, np.ndarray]:
    grads = {}
    grads[f"{prefix}_w{n_hidden}"] = d_out.T @ caches[n_hidden]
    grads[f"{prefix}_b{n_hidden}"] = d_out.sum(axis=0)
    dh = d_out @ params[f"{prefix}_w{n_hidden}"]
    for i in reversed(range(n_hidden)):
        dz = dh * (1.0 - caches[i + 1] ** 2)
        grads[f"{prefix}_w{i}"] = dz.T @ caches[i]
        grads[f"{prefix}_b{i}"] = dz.sum(axis=0)
        dh = dz @ params[f"{prefix}_w{i}"]
    return grads


@dataclass(frozen=True)
class ActStep:
    action: tuple[float, float]       # clamped command sent to the board
    raw_action: tuple[float, float]   # pre-clamp Gaussian sample
    log_prob: float
    value: float


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float
    aborted: bool = False


class PpoPolicy:
    """Gaussian actor plus value critic with persistent Adam state."""

    def __init__(self, cfg: PpoConfig, obs_dim: int = 6, action_dim: int = 2,
                 seed: int = 0):
        self.cfg = cfg
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self.params.update(_init_mlp(rng, "actor", obs_dim,
                                     cfg.hidden_layout, action_dim, 0.01))
        self.params.update(_init_mlp(rng, "critic", obs_dim,
                                     cfg.hidden_layout, 1, 1.0))
        self.params["log_std"] = np.full(action_dim, -0.5)
        self.norm = RunningNorm(obs_dim)
        self._rng = np.random.default_rng(seed + 1)
        self._adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._adam_t = 0
        self._n_hidden = len(cfg.hidden_layout)

    def reseed(self, seed: int) -> None:
        self._rng = np.random.default_rng(seed)

    # --- acting ---------------------------------------------------------

    def _heads(self, normalized_obs: np.ndarray
               ) -> tuple[np.ndarray, float]:
        x = np.atleast_2d(normalized_obs)
        mu, _ = _mlp_forward(self.params, "actor", x, self._n_hidden)
        v, _ = _mlp_forward(self.params, "critic", x, self._n_hidden)
        return mu[0], float(v[0, 0])

    def log_prob(self, normalized_obs: np.ndarray,
                 raw_action: np.ndarray) -> float:
        mu, _ = self._heads(normalized_obs)
        log_std = np.clip(self.params["log_std"], LOG_STD_MIN, LOG_STD_MAX)
        z = (np.asarray(raw_action) - mu) / np.exp(log_std)
        return float(-0.5 * (z ** 2).sum() - log_std.sum()
                     - 0.5 * self.action_dim * LOG_2PI)

    def act(self, obs: np.ndarray, deterministic: bool = False) -> ActStep:
        normalized = self.norm.normalize(obs)
        mu, value = self._heads(normalized)
        log_std = np.clip(self.params["log_std"], LOG_STD_MIN, LOG_STD_MAX)
        std = np.exp(log_std)
        if deterministic:
            raw = mu
        else:
            raw = mu + std * self._rng.standard_normal(self.action_dim)
        z = (raw - mu) / std
        log_prob = float(-0.5 * (z ** 2).sum() - log_std.sum()
                         - 0.5 * self.action_dim * LOG_2PI)
        clamped = np.clip(raw, -1.0, 1.0)
        return ActStep(action=(float(clamped[0]), float(clamped[1])),
                       raw_action=(float(raw[0]), float(raw[1])),
                       log_prob=log_prob, value=value)

    def value_of(self, obs: np.ndarray) -> float:
        return self._heads(self.norm.normalize(obs))[1]

    def entropy(self) -> float:
        log_std = np.clip(self.params["log_std"], LOG_STD_MIN, LOG_STD_MAX)
        return float((log_std + 0.5 * (1.0 + LOG_2PI)).sum())

    # --- learning -------------------------------------------------------

    def loss_and_grads(self, obs: np.ndarray, actions: np.ndarray,
                       old_log_probs: np.ndarray, advantages: np.ndarray,
                       returns: np.ndarray
                       ) -> tuple[float, dict[str, np.ndarray], UpdateStats]:
        """Total clipped-surrogate loss and its exact parameter gradient."""
        cfg = self.cfg
        b = len(obs)
        mu, actor_caches = _mlp_forward(self.params, "actor", obs,
                                        self._n_hidden)
        v_out, critic_caches = _mlp_forward(self.params, "critic", obs,
                                            self._n_hidden)
        v = v_out[:, 0]
        log_std = self.params["log_std"]
        std = np.exp(log_std)
        z = (actions - mu) / std
        log_probs = (-0.5 * (z ** 2).sum(axis=1) - log_std.sum()
                     - 0.5 * self.action_dim * LOG_2PI)
        ratio = np.exp(log_probs - old_log_probs)
        clipped = np.clip(ratio, 1.0 - cfg.clip_epsilon,
                          1.0 + cfg.clip_epsilon)
        surr1 = ratio * advantages
        surr2 = clipped * advantages
        policy_loss = -np.minimum(surr1, surr2).mean()
        value_err = v - returns
        value_loss = (value_err ** 2).mean()
        entropy = float((log_std + 0.5 * (1.0 + LOG_2PI)).sum())
        total = (policy_loss + cfg.value_weight * value_loss
                 - cfg.entropy_weight * entropy)

        # gradient flows through surr1 only where it is the active branch
        active = (surr1 <= surr2).astype(float)
        d_log_probs = -(1.0 / b) * advantages * ratio * active
        d_mu = d_log_probs[:, None] * (actions - mu) / (std ** 2)
        d_log_std = (d_log_probs[:, None] * (z ** 2 - 1.0)).sum(axis=0)
        d_log_std = d_log_std - cfg.entropy_weight
        d_v = (cfg.value_weight * 2.0 / b) * value_err

        grads = _mlp_backward(self.params, "actor", actor_caches, d_mu,
                              self._n_hidden)
        grads.update(_mlp_backward(self.params, "critic", critic_caches,
                                   d_v[:, None], self._n_hidden))
        grads["log_std"] = d_log_std
        stats = UpdateStats(
            policy_loss=float(policy_loss),
            value_loss=float(value_loss),
            entropy=entropy,
            clip_fraction=float(np.mean(np.abs(ratio - 1.0)
                                        > cfg.clip_epsilon)),
            approx_kl=float(np.mean(old_log_probs - log_probs)),
        )
        return float(total), grads, stats

    def _adam_step(self, grads: dict[str, np.ndarray]) -> None:
        self._adam_t += 1
        lr = self.cfg.learning_rate
        t = self._adam_t
        for key, g in grads.items():
            m = self._adam_m[key] = (ADAM_BETA1 * self._adam_m[key]
                                     + (1 - ADAM_BETA1) * g)
            v = self._adam_v[key] = (ADAM_BETA2 * self._adam_v[key]
                                     + (1 - ADAM_BETA2) * g * g)
            m_hat = m / (1 - ADAM_BETA1 ** t)
            v_hat = v / (1 - ADAM_BETA2 ** t)
            self.params[key] = self.params[key] - lr * m_hat / (
                np.sqrt(v_hat) + ADAM_EPS)
        self.params["log_std"] = np.clip(self.params["log_std"],
                                         LOG_STD_MIN, LOG_STD_MAX)

    def update(self, batch: RolloutBatch) -> UpdateStats:
        """Epochs of minibatched clipped-surrogate steps on one batch."""
        cfg = self.cfg
        if len(batch) < cfg.minibatch_size:
            raise ValueError("batch shorter than one minibatch")
        if batch.advantages is None or batch.returns is None:
            raise ValueError("run compute_gae before update")
        adv = batch.advantages
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

        snapshot = {k: v.copy() for k, v in self.params.items()}
        adam_snapshot = (self._adam_t,
                         {k: v.copy() for k, v in self._adam_m.items()},
                         {k: v.copy() for k, v in self._adam_v.items()})
        last_stats: UpdateStats | None = None
        indices = np.arange(len(batch))
        for _ in range(cfg.epochs):
            self._rng.shuffle(indices)
            for start in range(0, len(batch), cfg.minibatch_size):
                sel = indices[start:start + cfg.minibatch_size]
                total, grads, stats = self.loss_and_grads(
                    batch.obs[sel], batch.actions[sel],
                    batch.log_probs[sel], adv[sel], batch.returns[sel])
                finite = math.isfinite(total) and all(
                    np.all(np.isfinite(g)) for g in grads.values())
                if not finite:
                    self.params = snapshot
                    self._adam_t, self._adam_m, self._adam_v = adam_snapshot
                    broken = last_stats or stats
                    return replace(broken, aborted=True)
                self._adam_step(grads)
                last_stats = stats
        return last_stats

    # --- persistence ----------------------------------------------------

    def checkpoint(self) -> str:
        return json.dumps({
            "version": CHECKPOINT_VERSION,
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "config": {
                "discount": self.cfg.discount,
                "gae_lambda": self.cfg.gae_lambda,
                "clip_epsilon": self.cfg.clip_epsilon,
                "entropy_weight": self.cfg.entropy_weight,
                "value_weight": self.cfg.value_weight,
                "learning_rate": self.cfg.learning_rate,
                "epochs": self.cfg.epochs,
                "minibatch_size": self.cfg.minibatch_size,
                "horizon": self.cfg.horizon,
                "hidden_layout": list(self.cfg.hidden_layout),
            },
            "params": {k: v.tolist() for k, v in
                       sorted(self.params.items())},
            "norm": self.norm.state(),
        }, sort_keys=True)

    @classmethod
    def from_checkpoint(cls, text: str) -> "PpoPolicy":
        data = json.loads(text)
        if data["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version "
                             f"{data['version']}")
        cfg_data = dict(data["config"])
        cfg_data["hidden_layout"] = tuple(cfg_data["hidden_layout"])
        cfg = PpoConfig(**cfg_data)
        policy = cls(cfg, obs_dim=data["obs_dim"],
                     action_dim=data["action_dim"])
        policy.params = {k: np.array(v, dtype=float)
                         for k, v in data["params"].items()}
        policy._adam_m = {k: np.zeros_like(v)
                          for k, v in policy.params.items()}
        policy._adam_v = {k: np.zeros_like(v)
                          for k, v in policy.params.items()}
        policy.norm = RunningNorm.from_state(data["norm"])
        return policy
