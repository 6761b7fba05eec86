"""Experiment orchestration: batch runs, artifacts, and report tables.

An experiment is one (environment, method) pair swept over seeds and a
family of scripted partners. Every run trains a policy, plays one
frozen-policy validation episode with the same partner, and persists
its raw logs; the summary aggregates specificity curves and validation
metrics across runs. Reports turn summaries into comparison tables
with bootstrap confidence intervals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .board import BoardConfig
from .grids import GoalGrid, field_dump
from .metrics import MetricsRecord
from .partners import population
from .ppo import PpoConfig, PpoPolicy
from .reward import RewardConfig
from .training import (TrainingConfig, TrainingResult, _episode_seed,
                       pretrain_center_policy, train, validation_episode)

ENVIRONMENTS = ("env1", "env2")
METHOD_ORDER = ("evl", "bayes", "fixed")
METHOD_MODES = {"evl": "evl", "bayes": "bayes_only",
                "fixed": "fixed_external"}
PRESETS = ("sim", "physical")

# experiments run a coarser goal grid than the library default; posterior
# updates scale steeply with resolution and the comparative structure is
# insensitive to it
EXPERIMENT_GRID_RESOLUTION = 21

FIXTURE_DIR = Path(__file__).parent / "fixtures"
FIXED_POLICY_PATH = FIXTURE_DIR / "fixed_policy.json"


@dataclass(frozen=True)
class ExperimentSpec:
    """One batch: a single environment and method, many seeds and partners."""

    environment: str
    method: str
    seeds: tuple[int, ...]
    partner_count: int = 5
    partner_seed: int = 0
    max_iterations: int = 40
    grid_resolution: int = EXPERIMENT_GRID_RESOLUTION
    snapshot_every: int = 1
    preset: str = "sim"

    def __post_init__(self) -> None:
        if self.environment not in ENVIRONMENTS:
            raise ValueError(f"unknown environment {self.environment!r}")
        if self.method not in METHOD_MODES:
            raise ValueError(f"unknown method {self.method!r}")
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be unique")
        object.__setattr__(self, "seeds", seeds)
        if self.partner_count < 1:
            raise ValueError("partner_count must be at least 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.grid_resolution < 3:
            raise ValueError("grid_resolution must be at least 3")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be at least 1")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")

    def to_dict(self) -> dict:
        return {
            "environment": self.environment,
            "method": self.method,
            "seeds": list(self.seeds),
            "partner_count": self.partner_count,
            "partner_seed": self.partner_seed,
            "max_iterations": self.max_iterations,
            "grid_resolution": self.grid_resolution,
            "snapshot_every": self.snapshot_every,
            "preset": self.preset,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        if not isinstance(data, dict):
            raise ValueError("experiment spec must be a JSON object")
        known = {"environment", "method", "seeds", "partner_count",
                 "partner_seed", "max_iterations", "grid_resolution",
                 "snapshot_every", "preset"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown spec fields: {sorted(unknown)}")
        missing = {"environment", "method", "seeds"} - set(data)
        if missing:
            raise ValueError(f"missing spec fields: {sorted(missing)}")
        kwargs = dict(data)
        kwargs["seeds"] = tuple(kwargs["seeds"])
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"spec is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def board_for(environment: str, preset: str = "sim") -> BoardConfig:
    maker = BoardConfig.env1 if environment == "env1" else BoardConfig.env2
    if preset == "physical":
        return maker(sample_time=0.1, episode_steps=400)
    return maker()


def ppo_config_for(preset: str) -> PpoConfig:
    return PpoConfig.physical() if preset == "physical" else PpoConfig.sim()


def load_fixed_policy(path: Path | None = None) -> PpoPolicy:
    """The bundled pretrained keeper used by the non-learning baseline."""
    text = (path or FIXED_POLICY_PATH).read_text()
    return PpoPolicy.from_checkpoint(text)


def write_fixed_policy(path: Path, seed: int = 0,
                       iterations: int = 200) -> Path:
    policy, result = pretrain_center_policy(seed=seed, iterations=iterations)
    if not result.reached:
        raise RuntimeError(
            f"keeper pretraining missed its target in {iterations} "
            "iterations")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(policy.checkpoint())
    return path


@dataclass
class RunRecord:
    seed: int
    partner_index: int
    directory: str
    stop_reason: str = ""
    convergence_iteration: int | None = None
    final_specificity: float | None = None
    validation: dict[str, float] | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "partner_index": self.partner_index,
            "directory": self.directory,
            "stop_reason": self.stop_reason,
            "convergence_iteration": self.convergence_iteration,
            "final_specificity": self.final_specificity,
            "validation": self.validation,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        return cls(**data)


@dataclass
class RunSummary:
    environment: str
    method: str
    preset: str
    budget: int
    curve_mean: list[float]
    curve_std: list[float]
    validation: dict[str, dict[str, float]]
    runs: list[RunRecord]

    @property
    def failed_runs(self) -> list[RunRecord]:
        return [r for r in self.runs if r.error is not None]

    def to_dict(self) -> dict:
        return {
            "environment": self.environment,
            "method": self.method,
            "preset": self.preset,
            "budget": self.budget,
            "curve_mean": self.curve_mean,
            "curve_std": self.curve_std,
            "validation": self.validation,
            "runs": [r.to_dict() for r in self.runs],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunSummary":
        kwargs = dict(data)
        kwargs["runs"] = [RunRecord.from_dict(r) for r in data["runs"]]
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunSummary":
        return cls.from_dict(json.loads(text))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


TRAINING_LOG_HEADER = (
    "iteration,specificity,mean_x,mean_y,path_length,density_ratio,"
    "human_effort,agreement_ratio,goal_satisfied,new_cells,"
    "reward_distance,updates,policy_loss,value_loss,entropy,"
    "clip_fraction,approx_kl")


def training_log_csv(result: TrainingResult) -> str:
    """Per-iteration CSV of the metrics and update statistics."""
    lines = [TRAINING_LOG_HEADER]
    for log in result.logs:
        m = log.metrics
        stats = log.update_stats
        if stats:
            agg = [float(np.mean([s.policy_loss for s in stats])),
                   float(np.mean([s.value_loss for s in stats])),
                   float(np.mean([s.entropy for s in stats])),
                   float(np.mean([s.clip_fraction for s in stats])),
                   float(np.mean([s.approx_kl for s in stats]))]
        else:
            agg = [None] * 5
        row = [log.iteration_index, m.specificity, m.mean_x, m.mean_y,
               m.path_length, m.density_ratio, m.human_effort,
               m.agreement_ratio, log.goal_satisfied,
               log.new_cells_visited, log.reward_distance,
               len(stats)] + agg
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def _write_snapshots(result: TrainingResult, grid: GoalGrid,
                     run_dir: Path) -> None:
    snap_dir = run_dir / "snapshots"
    for log in result.logs:
        if not log.snapshots:
            continue
        snap_dir.mkdir(exist_ok=True)
        for kind, values in sorted(log.snapshots.items()):
            name = f"iter_{log.iteration_index:03d}_{kind}.txt"
            text = field_dump(kind, grid, values, log.iteration_index)
            (snap_dir / name).write_text(text)


def _run_seed(seed: int, partner_index: int) -> int:
    # decorrelates episode streams across the (seed, partner) sweep
    return seed * 1009 + partner_index


def run_one(spec: ExperimentSpec, seed: int, partner_index: int,
            run_dir: Path) -> tuple[TrainingResult, MetricsRecord]:
    """Train one policy against one partner and validate it frozen."""
    board = board_for(spec.environment, spec.preset)
    grid = GoalGrid.for_board(board, resolution=spec.grid_resolution)
    partner = population(spec.environment, count=spec.partner_count,
                         seed=spec.partner_seed)[partner_index]
    if spec.method == "fixed":
        policy = load_fixed_policy()
    else:
        policy = PpoPolicy(ppo_config_for(spec.preset), seed=seed)
    reward_cfg = RewardConfig(mode=METHOD_MODES[spec.method])
    train_cfg = TrainingConfig(max_iterations=spec.max_iterations,
                               snapshot_every=spec.snapshot_every)
    base = _run_seed(seed, partner_index)
    result = train(policy, partner, board, grid, reward_cfg, train_cfg,
                   seed=base)

    k = len(result.logs)
    partner.begin_iteration(k)
    traj, metrics = validation_episode(
        policy, partner, board,
        seed=_episode_seed(base, spec.max_iterations + 1),
        iteration_index=k)

    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "training_log.csv").write_text(training_log_csv(result))
    (run_dir / "validation.csv").write_text(traj.to_csv())
    (run_dir / "validation_metrics.json").write_text(json.dumps(
        {f: float(getattr(metrics, f)) for f in MetricsRecord.FIELDS},
        sort_keys=True, indent=2) + "\n")
    (run_dir / "policy.json").write_text(policy.checkpoint())
    (run_dir / "partner.json").write_text(
        json.dumps(partner.parameters(), sort_keys=True, indent=2) + "\n")
    _write_snapshots(result, grid, run_dir)
    return result, metrics


def _padded_curve(result: TrainingResult, budget: int) -> list[float]:
    curve = list(result.specificity_curve)
    if curve:
        curve += [curve[-1]] * (budget - len(curve))
    return curve


def run_experiment(spec: ExperimentSpec, out_dir: Path) -> RunSummary:
    """Sweep seeds and partners; isolate per-run failures; persist all."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(spec.to_json())

    records: list[RunRecord] = []
    curves: list[list[float]] = []
    validations: list[MetricsRecord] = []
    for seed in spec.seeds:
        for pj in range(spec.partner_count):
            rel = f"run_s{seed:03d}_p{pj:02d}"
            record = RunRecord(seed=seed, partner_index=pj, directory=rel)
            try:
                result, metrics = run_one(spec, seed, pj, out / rel)
            except Exception as exc:
                record.error = f"{type(exc).__name__}: {exc}"
            else:
                record.stop_reason = result.stop_reason
                record.convergence_iteration = result.convergence_iteration
                record.final_specificity = float(
                    result.specificity_curve[-1])
                record.validation = {
                    f: float(getattr(metrics, f))
                    for f in MetricsRecord.FIELDS}
                curves.append(_padded_curve(result, spec.max_iterations))
                validations.append(metrics)
            records.append(record)

    if curves:
        arr = np.array(curves)
        curve_mean = [float(v) for v in arr.mean(axis=0)]
        curve_std = [float(v) for v in arr.std(axis=0)]
    else:
        curve_mean, curve_std = [], []
    validation = {}
    for f in MetricsRecord.FIELDS:
        vals = np.array([getattr(m, f) for m in validations], dtype=float)
        if vals.size:
            validation[f] = {"mean": float(vals.mean()),
                             "std": float(vals.std()),
                             "n": int(vals.size)}
        else:
            validation[f] = {"mean": float("nan"), "std": float("nan"),
                             "n": 0}

    summary = RunSummary(environment=spec.environment, method=spec.method,
                         preset=spec.preset, budget=spec.max_iterations,
                         curve_mean=curve_mean, curve_std=curve_std,
                         validation=validation, runs=records)
    (out / "summary.json").write_text(summary.to_json())
    return summary


def bootstrap_ci(values, n_boot: int = 10000, seed: int = 0,
                 alpha: float = 0.05) -> tuple[float, float]:
    """Percentile bootstrap CI for the mean of a sample."""
    vals = np.asarray(values, dtype=float)
    if vals.size == 0:
        raise ValueError("cannot bootstrap an empty sample")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, vals.size, size=(n_boot, vals.size))
    means = vals[idx].mean(axis=1)
    lo, hi = np.quantile(means, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


def difference_ci(low_sample, high_sample, n_boot: int = 10000,
                  seed: int = 0, alpha: float = 0.05
                  ) -> tuple[float, float]:
    """Percentile bootstrap CI for mean(high_sample) - mean(low_sample)."""
    a = np.asarray(low_sample, dtype=float)
    b = np.asarray(high_sample, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("cannot bootstrap an empty sample")
    rng = np.random.default_rng(seed)
    ia = rng.integers(0, a.size, size=(n_boot, a.size))
    ib = rng.integers(0, b.size, size=(n_boot, b.size))
    diffs = b[ib].mean(axis=1) - a[ia].mean(axis=1)
    lo, hi = np.quantile(diffs, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


REPORT_COLUMNS = ("specificity", "path_length", "density_ratio",
                  "human_effort", "agreement_ratio")

TABLE_HEADER = "method,n," + ",".join(
    f"{c}_{suffix}" for c in REPORT_COLUMNS
    for suffix in ("mean", "std", "ci_lo", "ci_hi"))


def make_report(summaries: list[RunSummary], out_dir: Path) -> list[Path]:
    """Comparison tables and curve files, one table per environment."""
    if not summaries:
        raise ValueError("report needs at least one summary")
    seen = set()
    for s in summaries:
        key = (s.environment, s.method)
        if key in seen:
            raise ValueError(
                f"duplicate summary for {key}; merge runs upstream")
        seen.add(key)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    environments = sorted({s.environment for s in summaries})
    for env in environments:
        rows = [TABLE_HEADER]
        group = [s for s in summaries if s.environment == env]
        group.sort(key=lambda s: METHOD_ORDER.index(s.method))
        for s in group:
            ok = [r for r in s.runs
                  if r.error is None and r.validation]
            cells = [s.method, str(len(ok))]
            for column in REPORT_COLUMNS:
                vals = [r.validation[column] for r in ok]
                if vals:
                    arr = np.array(vals, dtype=float)
                    lo, hi = bootstrap_ci(arr)
                    cells += [_fmt(arr.mean()), _fmt(arr.std()),
                              _fmt(lo), _fmt(hi)]
                else:
                    cells += ["", "", "", ""]
            rows.append(",".join(cells))
            curve_path = out / f"curve_{env}_{s.method}.csv"
            lines = ["iteration,specificity_mean,specificity_std"]
            for i, (m, d) in enumerate(zip(s.curve_mean, s.curve_std)):
                lines.append(f"{i},{_fmt(m)},{_fmt(d)}")
            curve_path.write_text("\n".join(lines) + "\n")
            written.append(curve_path)
        table_path = out / f"table_{env}.csv"
        table_path.write_text("\n".join(rows) + "\n")
        written.append(table_path)
    return written
