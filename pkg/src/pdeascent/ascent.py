"""Gradient ascent over the diffusion coefficient.

Each iteration solves the semilinear problem under the current diffusion
iterate, evaluates the explicit maximum-increase direction field
``ell = d_sigma f - sigma^T D^2 v`` on a fresh uniform cloud, and moves the
free diffusion entries by ``-alpha_m * clip(ell)`` before refitting the
diffusion representation.  The empirical norm of ``ell`` is both the stopping
criterion and the per-iteration progress metric; a Feynman-Kac Monte-Carlo
estimate of the directional derivative is available as an independent check
that the chosen direction actually increases the value.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import bsde, nets, sde
from .problems import ConstantDiffusion, NetworkDiffusion, SigmaFitConfig


class DirectionFailureError(RuntimeError):
    """Non-finite direction values on the evaluation cloud."""


class RefitFailureError(RuntimeError):
    def __init__(self, residual: float, tolerance: float):
        super().__init__(
            f"diffusion refit residual {residual:.3g} above tolerance {tolerance:.3g}"
        )
        self.residual = residual


class InnerSolverError(RuntimeError):
    """Inner semilinear solve failed; carries the partial run report."""

    def __init__(self, message: str, report: "RunReport"):
        super().__init__(message)
        self.report = report


@dataclass
class AscentConfig:
    tolerance: float
    max_iterations: int
    solver: bsde.SolverConfig
    cloud_bounds: np.ndarray
    step_size: float = 0.5
    step_decay: float = 10.0
    clip_bound: float = 1.0
    norm_order: str = "1"  # "1" (empirical mean |ell|) or "inf"
    cloud_size: int = 4096
    refit_tolerance: float = 0.05
    warm_start: bool = True
    warm_epochs: int | None = None
    sigma_fit_steps: int = 400

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.step_size <= 0 or self.clip_bound <= 0:
            raise ValueError("step size and clip bound must be positive")
        if self.norm_order not in ("1", "inf"):
            raise ValueError("norm_order must be '1' or 'inf'")
        self.cloud_bounds = np.atleast_2d(np.asarray(self.cloud_bounds, dtype=np.float64))

    def step_at(self, m: int) -> float:
        return self.step_size / (1.0 + m / self.step_decay)

    def clip_at(self, m: int) -> float:
        return self.clip_bound


@dataclass
class DirectionSample:
    """The direction field evaluated on a cloud, plus its empirical norm."""

    ts: np.ndarray
    xs: np.ndarray
    ell: np.ndarray        # clip-free free-slot values, shape (B,)
    b_norm: float
    sigma_values: np.ndarray


@dataclass
class IterationRecord:
    m: int
    b_norm: float
    mse: float
    std: float
    loss: float
    seconds: float
    refit_residual: float


@dataclass
class RunReport:
    termination: str                      # converged | max_iterations | failed
    iterations: list[IterationRecord]
    final_sigma: object
    final_field: object
    seed: int
    error: str | None = None

    @property
    def b_history(self) -> list[float]:
        return [r.b_norm for r in self.iterations]

    @property
    def mse_history(self) -> list[float]:
        return [r.mse for r in self.iterations]


def sample_cloud(config: AscentConfig, horizon: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fresh uniform (t, x) cloud over [0, T] x the configured box."""
    key = np.array([seed, 0x636C6F75], dtype=np.uint64)  # cloud stream
    rng = np.random.Generator(np.random.Philox(key=key))
    ts = rng.uniform(0.0, horizon, size=config.cloud_size)
    lo, hi = config.cloud_bounds[:, 0], config.cloud_bounds[:, 1]
    xs = rng.uniform(size=(config.cloud_size, config.cloud_bounds.shape[0])) * (hi - lo) + lo
    return ts, xs


def compute_direction(problem, field, sigma_field, ts, xs, norm_order: str = "1") -> DirectionSample:
    """Direction field on the cloud and its empirical norm B_m."""
    ts = np.asarray(ts, dtype=np.float64)
    xs = np.atleast_2d(xs)
    v = field.value_batch(ts, xs)
    q = field.grad_batch(ts, xs)
    gamma = field.hessian_batch(ts, xs)
    sigma_values = sigma_field.free_value_batch(ts, xs)
    ell = problem.ell_free_batch(ts, xs, v, q, gamma, sigma_values)
    if not np.all(np.isfinite(ell)):
        raise DirectionFailureError(
            f"{int(np.sum(~np.isfinite(ell)))} non-finite direction values on the cloud"
        )
    b_norm = float(np.max(np.abs(ell))) if norm_order == "inf" else float(np.mean(np.abs(ell)))
    return DirectionSample(ts=ts, xs=xs, ell=ell, b_norm=b_norm, sigma_values=sigma_values)


def update_sigma(problem, sigma_field, direction: DirectionSample, alpha: float,
                 clip_bound: float, refit_tolerance: float | None = None, seed: int = 0):
    """Move the free entries along -alpha*clip(ell) and refit the representation."""
    clipped = np.clip(direction.ell, -clip_bound, clip_bound)
    if np.max(np.abs(alpha * clipped)) == 0.0:
        return sigma_field, 0.0
    targets = problem.project_free(direction.sigma_values - alpha * clipped)
    new_field, residual = sigma_field.refit(direction.ts, direction.xs, targets, seed=seed)
    # the gate guards against a bad network fit; the constant family projects
    # non-constant targets by design, so its residual is not a failure signal
    if refit_tolerance is not None and sigma_field.tag == "fitted" and residual > refit_tolerance:
        raise RefitFailureError(residual, refit_tolerance)
    return new_field, residual


class OracleInnerSolver:
    """Closed-form semilinear solves; only valid on constant diffusion iterates."""

    def __init__(self, problem):
        self.problem = problem

    def solve(self, problem, sigma_field, config: AscentConfig, seed: int, m: int, warm):
        if not isinstance(sigma_field, ConstantDiffusion):
            raise ValueError("the closed-form inner solver requires constant diffusion iterates")
        oracle = problem.semilinear_oracle(sigma_field.value)
        return oracle.field, None


class DeepInnerSolver:
    """Monte-Carlo deep solver with optional warm starting across iterations."""

    def solve(self, problem, sigma_field, config: AscentConfig, seed: int, m: int, warm):
        solver_cfg = config.solver
        if m > 0 and config.warm_start and config.warm_epochs:
            solver_cfg = replace(
                solver_cfg,
                value_train=replace(solver_cfg.value_train, epochs=config.warm_epochs),
                field_train=replace(solver_cfg.field_train, epochs=config.warm_epochs),
            )
        spec = bsde.make_semilinear_spec(problem, sigma_field, use_drift=solver_cfg.use_drift)
        estimate = bsde.train_semilinear(
            spec, solver_cfg, seed=seed + m,
            initial_networks=warm if config.warm_start else None,
        )
        return estimate, estimate.networks


def run_ascent(
    problem,
    sigma0,
    config: AscentConfig,
    seed: int,
    inner: str = "deep",
    mse_oracle=None,
    mse_points: tuple[np.ndarray, np.ndarray] | None = None,
    callback: Callable | None = None,
) -> RunReport:
    """Iterate solve -> direction -> update until B_m <= tolerance or m = M."""
    solver = OracleInnerSolver(problem) if inner == "oracle" else DeepInnerSolver()
    sigma_field = sigma0
    warm = None
    records: list[IterationRecord] = []
    report = RunReport(
        termination="max_iterations", iterations=records,
        final_sigma=sigma0, final_field=None, seed=seed,
    )
    field = None
    for m in range(config.max_iterations):
        t0 = time.perf_counter()
        try:
            field, warm = solver.solve(problem, sigma_field, config, seed, m, warm)
        except (bsde.TrainingFailureError, nets.NonFiniteValueError, sde.SimulationBlowupError) as exc:
            report.termination = "failed"
            report.error = f"inner solve failed at iteration {m}: {exc}"
            report.final_sigma = sigma_field
            report.final_field = field
            raise InnerSolverError(report.error, report) from exc
        ts, xs = sample_cloud(config, problem.horizon, seed=seed * 1000 + m)
        direction = compute_direction(problem, field, sigma_field, ts, xs, config.norm_order)
        mse = std = float("nan")
        if mse_oracle is not None and mse_points is not None:
            errs = (field.value_batch(*mse_points) - mse_oracle.value_batch(*mse_points)) ** 2
            mse, std = float(np.mean(errs)), float(np.std(errs))
        loss = field.final_loss if isinstance(field, bsde.FieldEstimate) else 0.0
        record = IterationRecord(
            m=m, b_norm=direction.b_norm, mse=mse, std=std, loss=loss,
            seconds=time.perf_counter() - t0, refit_residual=0.0,
        )
        records.append(record)
        report.final_sigma = sigma_field
        report.final_field = field
        if callback is not None:
            callback(m, field, sigma_field, direction, record)
        if direction.b_norm <= config.tolerance:
            report.termination = "converged"
            break
        if m == config.max_iterations - 1:
            break
        if inner == "deep" and sigma_field.tag == "closed-form":
            # deep iterates live in the fitted family: the update targets
            # sigma_m(t,x) - alpha*clip(ell(t,x)) are not constant in (t,x)
            sigma_field = NetworkDiffusion.fresh(
                problem, seed=seed + 13,
                fit=SigmaFitConfig(steps=config.sigma_fit_steps),
            )
        sigma_field, refit_residual = update_sigma(
            problem, sigma_field, direction,
            alpha=config.step_at(m), clip_bound=config.clip_at(m),
            refit_tolerance=config.refit_tolerance, seed=seed * 100 + m,
        )
        record.refit_residual = refit_residual
    return report


# ---------------------------------------------------------------------------
# Feynman-Kac directional-derivative verification
# ---------------------------------------------------------------------------

def fk_expected_integral(
    k_fn, source_fn, drift_fn, diffusion_fn,
    t: float, x: np.ndarray, horizon: float,
    n_steps: int, n_paths: int, seed: int,
) -> tuple[float, float]:
    """Monte-Carlo E[int_t^T exp(-int_t^s k) source(s, X_s) ds] from (t, x).

    All coefficient callables are batched: fn(ts, xs) with xs (B, d).
    Left-endpoint rule on a uniform grid over [t, T].
    """
    remaining = horizon - t
    if remaining <= 0:
        return 0.0, 0.0
    grid = sde.GridSpec(horizon=remaining, n_steps=n_steps)

    def drift(s, xs):
        return drift_fn(np.full(len(xs), t + s), xs)

    def diffusion(s, xs):
        return diffusion_fn(np.full(len(xs), t + s), xs)

    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    batch = sde.simulate(
        drift if drift_fn is not None else None,
        diffusion, np.tile(x, (n_paths, 1)), grid, n_paths, seed,
    )
    dt = grid.dt
    discount = np.ones(n_paths)
    integral = np.zeros(n_paths)
    for n in range(n_steps):
        s = t + grid.times[n]
        ts = np.full(n_paths, s)
        xs = batch.states[n]
        integral += discount * source_fn(ts, xs) * dt
        k_vals = k_fn(ts, xs) if k_fn is not None else 0.0
        discount = discount * np.exp(-np.asarray(k_vals) * dt)
    estimate = float(np.mean(integral))
    stderr = float(np.std(integral, ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    return estimate, stderr


def fk_directional_derivative(
    problem, field, sigma_field, varsigma_fn,
    t: float, x: np.ndarray, n_paths: int, seed: int, n_steps: int = 20,
) -> tuple[float, float]:
    """Estimate of the directional derivative of the semilinear value in sigma.

    ``varsigma_fn(ts, xs)`` gives the direction's free-slot values; the
    integrand is ``-ell * varsigma`` along paths of dX = mu dt + sigma dB with
    (k, mu, ell) from the linearization at the current field.
    """

    def coeffs(ts, xs):
        v = field.value_batch(ts, xs)
        q = field.grad_batch(ts, xs)
        gamma = field.hessian_batch(ts, xs)
        sfree = sigma_field.free_value_batch(ts, xs)
        return v, q, gamma, sfree

    def k_fn(ts, xs):
        v, q, gamma, sfree = coeffs(ts, xs)
        return problem.k_batch(ts, xs, v, q, sfree)

    def source_fn(ts, xs):
        v, q, gamma, sfree = coeffs(ts, xs)
        ell = problem.ell_free_batch(ts, xs, v, q, gamma, sfree)
        return -ell * varsigma_fn(ts, xs)

    def drift_fn(ts, xs):
        v, q, gamma, sfree = coeffs(ts, xs)
        return problem.mu_batch(ts, xs, v, q, sfree)

    def diffusion_fn(ts, xs):
        return sigma_field.matrix_batch(ts, xs)

    return fk_expected_integral(
        k_fn, source_fn, drift_fn, diffusion_fn,
        t, x, problem.horizon, n_steps, n_paths, seed,
    )


def negative_ell_direction(problem, field, sigma_field, alpha: float):
    """The theorem's ascent direction varsigma = -alpha * ell as a callable."""

    def varsigma(ts, xs):
        v = field.value_batch(ts, xs)
        q = field.grad_batch(ts, xs)
        gamma = field.hessian_batch(ts, xs)
        sfree = sigma_field.free_value_batch(ts, xs)
        return -alpha * problem.ell_free_batch(ts, xs, v, q, gamma, sfree)

    return varsigma
