"""Seeded Euler-Maruyama simulation of forward diffusions.

Paths are driven by counter-based (Philox) streams keyed on (seed, path index),
so path i is bit-reproducible regardless of how many paths are in the batch.
Batches store the Brownian increments that generated them; replaying the Euler
recursion from those increments reproduces the states exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

_X0_STREAM = 2**64 - 1  # reserved sub-key for the initial-condition sampler


class SimulationBlowupError(RuntimeError):
    def __init__(self, step: int, path: int):
        super().__init__(f"non-finite state at step {step}, path {path}")
        self.step = step
        self.path = path


@dataclass(frozen=True)
class GridSpec:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


@dataclass
class PathBatch:
    """states: (N+1, paths, d); increments: (N, paths, d)."""

    states: np.ndarray
    increments: np.ndarray
    grid: GridSpec
    seed: int

    @property
    def n_paths(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]


@dataclass(frozen=True)
class OUParams:
    kappa: np.ndarray
    theta: np.ndarray
    nu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        for name in ("kappa", "theta", "nu", "rho"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        if np.any(self.nu < 0):
            raise ValueError("vol-of-vol nu must be nonnegative")
        if np.any(np.abs(self.rho) >= 1):
            raise ValueError("correlations rho must lie in (-1, 1)")

    @property
    def dim(self) -> int:
        return self.kappa.size


def brownian_increments(grid: GridSpec, n_paths: int, dim: int, seed: int) -> np.ndarray:
    """(N, paths, dim) increments; path i depends only on (seed, i)."""
    sqdt = np.sqrt(grid.dt)
    out = np.empty((grid.n_steps, n_paths, dim))
    for i in range(n_paths):
        key = np.array([seed, i], dtype=np.uint64)
        rng = np.random.Generator(np.random.Philox(key=key))
        out[:, i, :] = sqdt * rng.standard_normal((grid.n_steps, dim))
    return out


def sample_box(bounds: np.ndarray, n_paths: int, seed: int) -> np.ndarray:
    """Uniform start points in a box; bounds is (d, 2) rows of (low, high)."""
    bounds = np.atleast_2d(np.asarray(bounds, dtype=np.float64))
    key = np.array([seed, _X0_STREAM], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    u = rng.uniform(size=(n_paths, bounds.shape[0]))
    return bounds[:, 0] + u * (bounds[:, 1] - bounds[:, 0])


def correlate_increments(db0: np.ndarray, rho: np.ndarray, dw: np.ndarray) -> np.ndarray:
    """Build increments correlated with db0: rho*db0 + sqrt(1-rho^2)*dw."""
    rho = np.asarray(rho, dtype=np.float64)
    return rho * db0 + np.sqrt(1.0 - rho**2) * dw


def _euler_step(x, t, dt, drift, diffusion, db):
    mu = 0.0 if drift is None else drift(t, x)
    sig = np.asarray(diffusion(t, x), dtype=np.float64)
    if sig.ndim == 2:  # one matrix for the whole batch
        noise = db @ sig.T
    else:
        noise = np.einsum("pij,pj->pi", sig, db)
    return x + mu * dt + noise


def simulate(
    drift: Callable[[float, np.ndarray], np.ndarray] | None,
    diffusion: Callable[[float, np.ndarray], np.ndarray],
    x0: np.ndarray | Callable[[int, int], np.ndarray],
    grid: GridSpec,
    n_paths: int,
    seed: int,
    dim: int | None = None,
) -> PathBatch:
    """Euler-Maruyama batch.

    ``diffusion(t, X)`` takes the full (paths, d) state block and returns
    either a (d, d) matrix or per-path (paths, d, d) matrices.  ``x0`` is an
    array broadcastable to (paths, d), or a callable (n_paths, seed) -> array.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    if callable(x0):
        start = np.asarray(x0(n_paths, seed), dtype=np.float64)
        if start.ndim == 1:
            start = start[:, None]
    else:
        start = np.atleast_1d(np.asarray(x0, dtype=np.float64))
        if start.ndim == 1:
            start = np.tile(start, (n_paths, 1))
    if start.shape[0] != n_paths:
        raise ValueError("x0 sample count does not match n_paths")
    d = start.shape[1]
    db = brownian_increments(grid, n_paths, d, seed)
    states = np.empty((grid.n_steps + 1, n_paths, d))
    states[0] = start
    times = grid.times
    for n in range(grid.n_steps):
        states[n + 1] = _euler_step(states[n], times[n], grid.dt, drift, diffusion, db[n])
        bad = ~np.isfinite(states[n + 1])
        if bad.any():
            path = int(np.argwhere(bad.any(axis=1))[0, 0])
            raise SimulationBlowupError(step=n + 1, path=path)
    return PathBatch(states=states, increments=db, grid=grid, seed=seed)


def replay(batch: PathBatch, drift, diffusion) -> np.ndarray:
    """Recompute states from stored increments; bit-equal to batch.states."""
    states = np.empty_like(batch.states)
    states[0] = batch.states[0]
    times = batch.grid.times
    for n in range(batch.grid.n_steps):
        states[n + 1] = _euler_step(
            states[n], times[n], batch.grid.dt, drift, diffusion, batch.increments[n]
        )
    return states


def filter_outliers(batch: PathBatch, quantile: float) -> tuple[PathBatch, np.ndarray]:
    """Drop paths whose max |X| exceeds the per-component quantile threshold."""
    if not 0.5 < quantile < 1.0:
        raise ValueError("quantile must lie in (0.5, 1)")
    per_path_max = np.max(np.abs(batch.states), axis=0)  # (paths, d)
    thresholds = np.quantile(per_path_max, quantile, axis=0)
    keep = np.all(per_path_max <= thresholds, axis=1)
    if not keep.any():  # degenerate batch; thresholds equal the common value
        keep = np.ones(batch.n_paths, dtype=bool)
    kept_idx = np.flatnonzero(keep)
    filtered = PathBatch(
        states=batch.states[:, keep, :],
        increments=batch.increments[:, keep, :],
        grid=batch.grid,
        seed=batch.seed,
    )
    return filtered, kept_idx


# -- Ornstein-Uhlenbeck helpers -------------------------------------------------

def ou_drift(params: OUParams):
    def drift(t, x):
        return params.kappa * (params.theta - x)

    return drift


def ou_diffusion(params: OUParams):
    matrix = np.diag(params.nu)

    def diffusion(t, x):
        return matrix

    return diffusion


def ou_mean(params: OUParams, y0: np.ndarray, t: float) -> np.ndarray:
    y0 = np.asarray(y0, dtype=np.float64)
    decay = np.exp(-params.kappa * t)
    return params.theta + (y0 - params.theta) * decay


def ou_variance(params: OUParams, t: float) -> np.ndarray:
    k = params.kappa
    out = np.where(
        k > 0,
        params.nu**2 * (1.0 - np.exp(-2.0 * k * t)) / np.where(k > 0, 2.0 * k, 1.0),
        params.nu**2 * t,
    )
    return out


def dump_paths_csv(batch: PathBatch, path: str | Path) -> None:
    """CSV with columns (path, step, t, x_0..x_{d-1})."""
    times = batch.grid.times
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "step", "t"] + [f"x_{c}" for c in range(batch.dim)])
        for p in range(batch.n_paths):
            for n in range(batch.grid.n_steps + 1):
                writer.writerow(
                    [p, n, repr(float(times[n]))]
                    + [repr(float(v)) for v in batch.states[n, p]]
                )
