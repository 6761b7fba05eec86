"""Grid-based Bayesian inference of the latent goal field.

The goal is modeled as a latent scalar field F over grid cells with a
Gaussian-kernel prior. Observing a ball state draws its cell with
probability softmax(F), so a trajectory's likelihood depends only on the
per-cell visit counts. Each iteration refits the MAP field with Newton's
method and a Laplace Gaussian around it; the posterior mean then becomes
the prior mean of the next iteration, which is what lets sparsely visited
regions stay remembered long after the visits stop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import logsumexp, softmax

from .board import Trajectory
from .grids import GoalGrid

KERNEL_NUGGET = 1e-6
NEWTON_MAX_ITER = 50
NEWTON_GRAD_TOL = 1e-6
HESSIAN_JITTER = 1e-8
DEFAULT_LENGTHSCALE_FRACTION = 0.15  # of the full board width


def kernel(p, q, lengthscale: float) -> float:
    """Gaussian similarity of two points, 1 at zero distance."""
    if lengthscale <= 0:
        raise ValueError("lengthscale must be positive")
    dx = p[0] - q[0]
    dy = p[1] - q[1]
    return math.exp(-(dx * dx + dy * dy) / (2.0 * lengthscale * lengthscale))


def lengthscale_from_precision(precision: float) -> float:
    """Lengthscale equivalent to reading a precision k as exp(-k*d^2).

    Provided for the alternative parameterization where the kernel is
    written with a single precision factor instead of a bandwidth.
    """
    if precision <= 0:
        raise ValueError("precision must be positive")
    return 1.0 / math.sqrt(2.0 * precision)


def default_lengthscale(grid: GoalGrid) -> float:
    return DEFAULT_LENGTHSCALE_FRACTION * 2.0 * grid.half_width


@lru_cache(maxsize=8)
def _prior_matrices(grid: GoalGrid, lengthscale: float
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Kernel matrix K (with nugget) and its inverse Q, both read-only."""
    pts = grid.cell_centers
    sq = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    k = np.exp(-sq / (2.0 * lengthscale * lengthscale))
    nugget = KERNEL_NUGGET
    while True:
        try:
            chol = cho_factor(k + nugget * np.eye(grid.n_cells), lower=True)
            break
        except LinAlgError:
            nugget *= 10.0
            if nugget > 1e-2:
                raise
    k = k + nugget * np.eye(grid.n_cells)
    q = cho_solve(chol, np.eye(grid.n_cells))
    q = 0.5 * (q + q.T)
    k.setflags(write=False)
    q.setflags(write=False)
    return k, q


def kernel_matrix(grid: GoalGrid, lengthscale: float) -> np.ndarray:
    return _prior_matrices(grid, float(lengthscale))[0]


def prior_precision(grid: GoalGrid, lengthscale: float) -> np.ndarray:
    return _prior_matrices(grid, float(lengthscale))[1]


@dataclass(frozen=True, eq=False)
class GoalField:
    """Immutable posterior snapshot over a goal grid."""

    grid: GoalGrid
    mean: np.ndarray
    covariance_diag: np.ndarray
    prior_mean: np.ndarray
    kernel_lengthscale: float
    obs_noise: float = 1.0
    iteration_index: int = 0
    newton_converged: bool = True
    clamped_observations: int = 0

    def __post_init__(self) -> None:
        if self.obs_noise <= 0:
            raise ValueError("obs_noise must be positive")
        for name in ("mean", "covariance_diag", "prior_mean"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (self.grid.n_cells,):
                raise ValueError(f"{name} must have one value per cell")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.covariance_diag <= 0):
            raise ValueError("covariance_diag must be strictly positive")


def initial_field(grid: GoalGrid, lengthscale: float | None = None,
                  obs_noise: float = 1.0) -> GoalField:
    """Zero-mean prior field with the kernel's marginal variances."""
    ell = default_lengthscale(grid) if lengthscale is None else lengthscale
    if ell <= 0:
        raise ValueError("lengthscale must be positive")
    k = kernel_matrix(grid, ell)
    zeros = np.zeros(grid.n_cells)
    return GoalField(grid=grid, mean=zeros, covariance_diag=np.diag(k),
                     prior_mean=zeros, kernel_lengthscale=ell,
                     obs_noise=obs_noise)


def observation_counts(grid: GoalGrid, traj: Trajectory
                       ) -> tuple[np.ndarray, int]:
    """Per-cell visit counts of a trajectory's recorded states.

    Out-of-bounds states count toward the nearest edge cell; the second
    return value says how many needed that clamping.
    """
    if len(traj) == 0:
        raise ValueError("trajectory must contain at least one state")
    counts = np.zeros(grid.n_cells)
    clamped_n = 0
    for rec in traj.records:
        idx, clamped = grid.cell_index(rec.state.x, rec.state.y)
        counts[idx] += 1.0
        clamped_n += clamped
    return counts, clamped_n


def log_likelihood(field_values: np.ndarray, traj: Trajectory,
                   grid: GoalGrid) -> float:
    """Log-probability of the trajectory's cells under softmax(field)."""
    f = np.asarray(field_values, dtype=float)
    if f.shape != (grid.n_cells,) or not np.all(np.isfinite(f)):
        raise ValueError("field_values must be finite with one value "
                         "per cell")
    counts, _ = observation_counts(grid, traj)
    t = counts.sum()
    return float(counts @ f - t * logsumexp(f))


def _newton_map(counts: np.ndarray, t: float, prior_mean: np.ndarray,
                q: np.ndarray, w: float
                ) -> tuple[np.ndarray, np.ndarray, bool]:
    """MAP field and final curvature via damped Newton iterations."""

    def objective(f: np.ndarray) -> float:
        d = f - prior_mean
        return w * (counts @ f - t * logsumexp(f)) - 0.5 * d @ q @ d

    def curvature(p: np.ndarray) -> np.ndarray:
        return q + w * t * (np.diag(p) - np.outer(p, p))

    f = prior_mean.copy()
    converged = False
    for _ in range(NEWTON_MAX_ITER):
        p = softmax(f)
        grad = w * (counts - t * p) - q @ (f - prior_mean)
        if np.abs(grad).max() < NEWTON_GRAD_TOL:
            converged = True
            break
        a = curvature(p)
        jitter = 0.0
        while True:
            try:
                chol = cho_factor(a + jitter * np.eye(len(f)), lower=True)
                break
            except LinAlgError:
                jitter = HESSIAN_JITTER if jitter == 0.0 else jitter * 10.0
                if jitter > 1.0:
                    raise
        direction = cho_solve(chol, grad)
        base = objective(f)
        slope = grad @ direction
        alpha = 1.0
        for _ in range(30):
            candidate = f + alpha * direction
            if objective(candidate) >= base + 1e-4 * alpha * slope:
                f = candidate
                break
            alpha *= 0.5
        else:
            break  # no ascent possible; return best iterate
    return f, curvature(softmax(f)), converged


def update_posterior(field: GoalField, traj: Trajectory) -> GoalField:
    """Refit the MAP goal field after one more observed trajectory.

    The returned field's prior mean is the new posterior mean, so calling
    this once per iteration accumulates evidence across the whole history
    while only ever touching the latest trajectory.
    """
    grid = field.grid
    counts, clamped_n = observation_counts(grid, traj)
    t = counts.sum()
    q = prior_precision(grid, field.kernel_lengthscale)
    w = 1.0 / field.obs_noise

    f_map, a, converged = _newton_map(counts, t, field.prior_mean, q, w)

    jitter = 0.0
    while True:
        try:
            chol = cho_factor(a + jitter * np.eye(grid.n_cells), lower=True)
            break
        except LinAlgError:
            jitter = HESSIAN_JITTER if jitter == 0.0 else jitter * 10.0
            if jitter > 1.0:
                raise
    cov_diag = np.diag(cho_solve(chol, np.eye(grid.n_cells))).copy()

    return GoalField(
        grid=grid,
        mean=f_map,
        covariance_diag=cov_diag,
        prior_mean=f_map,
        kernel_lengthscale=field.kernel_lengthscale,
        obs_noise=field.obs_noise,
        iteration_index=field.iteration_index + 1,
        newton_converged=converged,
        clamped_observations=field.clamped_observations + clamped_n,
    )


def to_density(field: GoalField) -> np.ndarray:
    """Posterior goal probability per cell; always renormalized."""
    e = np.exp(field.mean - field.mean.max())
    return e / e.sum()
