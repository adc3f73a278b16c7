"""Deep Monte-Carlo solver for semilinear parabolic problems.

The discretized backward value is rolled forward along simulated paths; the
empirical terminal risk (plus, in the default "modified" variant, global-field
consistency penalties) is minimized over two networks: an initial-value net
V(x) and a field net U(t, x) whose input gradient plays the role of the
BSDE control.  The trained U is returned as a field estimate whose gradient
and Hessian are exact input-derivatives of the same network.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nets
from . import sde

LOSS_VARIANTS = ("modified", "plain")


class TrainingFailureError(RuntimeError):
    def __init__(self, message: str, loss_history: list[float]):
        super().__init__(message)
        self.loss_history = loss_history


class RolloutBlowupError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite rollout value at step {step}")
        self.step = step


@dataclass
class SemilinearSpec:
    """One semilinear problem instance handed to the solver."""

    dim: int
    diffusion: object  # matrix_batch(ts, xs) and free_value_batch(ts, xs)
    source: Callable   # (t, xs, y, z, sigma_free) -> (B, 1), array or tensor
    terminal: Callable[[np.ndarray], np.ndarray]
    drift: Callable[[float, np.ndarray], np.ndarray] | None = None


def make_semilinear_spec(problem, sigma_field, use_drift: bool = False) -> SemilinearSpec:
    """Wire a problem + diffusion iterate into a solvable semilinear spec.

    With ``use_drift`` the wealth coordinate gains the candidate optimal drift
    sigma00*Lambda (sign of the utility gradient taken positive) and the
    volatility factors their mean reversion; the rollout adds the
    Girsanov-consistent mu.z correction to the source automatically.
    """
    drift = None
    if use_drift:
        def drift(t, xs):
            xs = np.atleast_2d(xs)
            ts = np.full(len(xs), t)
            out = np.zeros_like(xs)
            out[:, 0] = sigma_field.free_value_batch(ts, xs) * np.array(
                [problem.lambda_total(x) for x in xs]
            )
            if xs.shape[1] > 1 and hasattr(problem, "kappa"):
                kappa, theta = np.asarray(problem.kappa), np.asarray(problem.theta)
                out[:, 1:] = kappa * (theta - xs[:, 1:])
            return out

    return SemilinearSpec(
        dim=problem.dim,
        diffusion=sigma_field,
        source=problem.source_term,
        terminal=problem.terminal_batch,
        drift=drift,
    )


@dataclass
class SolverConfig:
    grid: sde.GridSpec
    sample_size: int
    batch_size: int
    x0_bounds: np.ndarray
    value_train: nets.TrainConfig
    field_train: nets.TrainConfig
    loss_variant: str = "modified"
    outlier_quantile: float = 0.98
    hidden_width: int | None = None
    hidden_layers: int = 3
    use_drift: bool = False

    def __post_init__(self):
        if not 1 <= self.batch_size <= self.sample_size:
            raise ValueError("need sample_size >= batch_size >= 1")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        self.x0_bounds = np.atleast_2d(np.asarray(self.x0_bounds, dtype=np.float64))

    def width(self, dim: int) -> int:
        return self.hidden_width or nets.default_hidden_width(dim)


@dataclass
class NetworkBundle:
    """The two trainable nets: initial value and global field (or control)."""

    variant: str
    v0: nets.Network      # V(x), scalar
    field: nets.Network   # modified: U(t,x) scalar; plain: Z(t,x) -> R^d


def make_networks(spec: SemilinearSpec, config: SolverConfig, seed: int) -> NetworkBundle:
    d = spec.dim
    w = config.width(d)
    hidden = [w] * config.hidden_layers
    v0 = nets.init_network([d] + hidden + [1], seed=seed * 2 + 1)
    out_dim = 1 if config.loss_variant == "modified" else d
    field = nets.init_network([d + 1] + hidden + [out_dim], seed=seed * 2 + 2)
    return NetworkBundle(variant=config.loss_variant, v0=v0, field=field)


# ---------------------------------------------------------------------------
# rollout and loss
# ---------------------------------------------------------------------------

def _sum_rows(x):
    if isinstance(x, ad.Tensor):
        return ad.gsum(x, axis=1, keepdims=True)
    return np.sum(x, axis=1, keepdims=True)


def _path_constants(spec: SemilinearSpec, states: np.ndarray, increments: np.ndarray,
                    times: np.ndarray):
    """sigma-dependent constants along paths: s.dB products, free values, drift."""
    n_steps = increments.shape[0]
    s_db = np.empty_like(increments)
    sigma_free = np.empty(increments.shape[:2])
    mu = None if spec.drift is None else np.empty_like(increments)
    for n in range(n_steps):
        ts = np.full(states.shape[1], times[n])
        mats = spec.diffusion.matrix_batch(ts, states[n])
        s_db[n] = np.einsum("pij,pj->pi", mats, increments[n])
        sigma_free[n] = spec.diffusion.free_value_batch(ts, states[n])
        if mu is not None:
            mu[n] = spec.drift(times[n], states[n])
    return s_db, sigma_free, mu


def _rollout(spec, y0, z_at, states, s_db, sigma_free, mu, times, dt):
    """Shared forward recursion; works on numpy arrays and tensors."""
    n_steps = s_db.shape[0]
    ys = [y0]
    y = y0
    for n in range(n_steps):
        z = z_at(n)
        f_val = spec.source(times[n], states[n], y, z, sigma_free[n])
        if mu is not None:
            f_val = f_val + _sum_rows(z * mu[n])
        y = y + f_val * dt + _sum_rows(z * s_db[n])
        y_values = y.value if isinstance(y, ad.Tensor) else y
        if not np.all(np.isfinite(y_values)):
            raise RolloutBlowupError(step=n + 1)
        ys.append(y)
    return ys


def rollout_Y(spec: SemilinearSpec, networks: NetworkBundle, batch: sde.PathBatch) -> np.ndarray:
    """Rolled-forward value table, shape (N+1, paths)."""
    times = batch.grid.times
    s_db, sigma_free, mu = _path_constants(spec, batch.states, batch.increments, times)
    y0 = nets.forward_batch(networks.v0, batch.states[0])[:, None]

    def z_at(n):
        tx = np.column_stack([np.full(batch.n_paths, times[n]), batch.states[n]])
        if networks.variant == "modified":
            return nets.grad_input_batch(networks.field, tx)[:, 1:]
        return nets.forward_multi_batch(networks.field, tx)

    ys = _rollout(spec, y0, z_at, batch.states, s_db, sigma_free, mu, times, batch.grid.dt)
    return np.concatenate([y[:, 0][None, :] for y in ys], axis=0)


def _loss_tensor(spec, networks: NetworkBundle, batch: sde.PathBatch,
                 params_v, params_u, path_constants=None):
    """Empirical risk as a tape node; one stacked network call per net."""
    times = batch.grid.times
    n_steps = batch.grid.n_steps
    n_paths = batch.n_paths
    if path_constants is None:
        path_constants = _path_constants(spec, batch.states, batch.increments, times)
    s_db, sigma_free, mu = path_constants

    y0 = nets.forward_tape(params_v, ad.wrap(batch.states[0]), networks.v0.activation)
    terminal = spec.terminal(batch.states[n_steps])[:, None]

    if networks.variant == "modified":
        stacked = np.concatenate(
            [np.column_stack([np.full(n_paths, times[n]), batch.states[n]])
             for n in range(n_steps + 1)]
        )
        leaf = ad.variable(stacked)
        u_all = nets.forward_tape(params_u, leaf, networks.field.activation)
        (du_all,) = ad.grad(ad.gsum(u_all), [leaf])

        def z_at(n):
            return du_all[n * n_paths:(n + 1) * n_paths, 1:]

        def u_at(n):
            return u_all[n * n_paths:(n + 1) * n_paths, :]
    else:
        stacked = np.concatenate(
            [np.column_stack([np.full(n_paths, times[n]), batch.states[n]])
             for n in range(n_steps)]
        )
        z_all = nets.forward_tape(params_u, ad.wrap(stacked), networks.field.activation)

        def z_at(n):
            return z_all[n * n_paths:(n + 1) * n_paths, :]

        u_at = None

    ys = _rollout(spec, y0, z_at, batch.states, s_db, sigma_free, mu, times, batch.grid.dt)
    term_err = ys[-1] - terminal
    loss = ad.gmean(term_err * term_err)
    if networks.variant == "modified":
        dt = batch.grid.dt
        for n in range(n_steps + 1):
            diff = ys[n] - u_at(n)
            loss = loss + ad.gmean(diff * diff) * dt
        tie = y0 - u_at(0)
        loss = loss + ad.gmean(tie * tie)
    return loss, ys, y0


def empirical_loss(spec: SemilinearSpec, networks: NetworkBundle, batch: sde.PathBatch) -> float:
    params_v = nets.tensor_params(networks.v0, tracked=False)
    params_u = nets.tensor_params(networks.field, tracked=False)
    loss, _, _ = _loss_tensor(spec, networks, batch, params_v, params_u)
    return loss.item()


# ---------------------------------------------------------------------------
# field estimate
# ---------------------------------------------------------------------------

class FieldEstimate:
    """Callable approximation of the solution and its spatial derivatives.

    Under the modified variant, gradient and Hessian are the input-derivatives
    of the value network itself.  Under the plain variant only the t=0 value
    (initial net) is defined; the gradient comes from the control net and the
    Hessian is its input Jacobian.
    """

    def __init__(self, networks: NetworkBundle, grid: sde.GridSpec,
                 loss_history: list[float], epoch_losses: list[float],
                 seconds: float = 0.0):
        self.networks = networks
        self.variant = networks.variant
        self.grid = grid
        self.loss_history = loss_history
        self.epoch_losses = epoch_losses
        self.seconds = seconds

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1] if self.loss_history else float("nan")

    def _tx(self, ts, xs):
        return np.column_stack([np.asarray(ts, dtype=np.float64), np.atleast_2d(xs)])

    def value_batch(self, ts, xs) -> np.ndarray:
        if self.variant == "plain":
            ts = np.asarray(ts, dtype=np.float64)
            if np.any(ts != 0.0):
                raise ValueError("plain-variant field only defines values at t=0")
            return nets.forward_batch(self.networks.v0, np.atleast_2d(xs))
        return nets.forward_batch(self.networks.field, self._tx(ts, xs))

    def grad_batch(self, ts, xs) -> np.ndarray:
        if self.variant == "plain":
            return nets.forward_multi_batch(self.networks.field, self._tx(ts, xs))
        return nets.grad_input_batch(self.networks.field, self._tx(ts, xs))[:, 1:]

    def hessian_batch(self, ts, xs) -> np.ndarray:
        if self.variant == "plain":
            jac = nets.jacobian_input_batch(self.networks.field, self._tx(ts, xs))
            return jac[:, :, 1:]
        return nets.hessian_input_batch(self.networks.field, self._tx(ts, xs))[:, 1:, 1:]

    def value(self, t, x) -> float:
        return float(self.value_batch(np.array([t]), np.atleast_2d(x))[0])

    def grad(self, t, x) -> np.ndarray:
        return self.grad_batch(np.array([t]), np.atleast_2d(x))[0]

    def hessian(self, t, x) -> np.ndarray:
        return self.hessian_batch(np.array([t]), np.atleast_2d(x))[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def simulate_training_paths(spec: SemilinearSpec, config: SolverConfig, seed: int) -> sde.PathBatch:
    def x0(n_paths, s):
        return sde.sample_box(config.x0_bounds, n_paths, s)

    def diffusion(t, x):
        return spec.diffusion.matrix_batch(np.full(len(x), t), x)

    batch = sde.simulate(spec.drift, diffusion, x0, config.grid, config.sample_size, seed)
    filtered, _ = sde.filter_outliers(batch, config.outlier_quantile)
    return filtered


def train_semilinear(
    spec: SemilinearSpec,
    config: SolverConfig,
    seed: int,
    initial_networks: NetworkBundle | None = None,
) -> FieldEstimate:
    """Minimize the empirical risk; reproducible for a fixed (spec, config, seed)."""
    t_start = time.perf_counter()
    batch = simulate_training_paths(spec, config, seed)
    networks = initial_networks or make_networks(spec, config, seed)
    if initial_networks is not None and initial_networks.variant != config.loss_variant:
        raise ValueError("warm-start networks use a different loss variant")

    times = batch.grid.times
    constants = _path_constants(spec, batch.states, batch.increments, times)
    s_db_all, sigma_free_all, mu_all = constants

    cfg_v, cfg_u = config.value_train, config.field_train
    state_v = nets.init_optimizer_state(networks.v0, cfg_v)
    state_u = nets.init_optimizer_state(networks.field, cfg_u)
    shuffle_rng = np.random.Generator(np.random.Philox(key=[seed, 7]))

    loss_history: list[float] = []
    epoch_losses: list[float] = []
    n_batches = max(batch.n_paths // config.batch_size, 1)
    for epoch in range(cfg_u.epochs):
        perm = shuffle_rng.permutation(batch.n_paths)
        epoch_sum = 0.0
        for b in range(n_batches):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            sub = sde.PathBatch(
                states=batch.states[:, idx, :],
                increments=batch.increments[:, idx, :],
                grid=batch.grid,
                seed=batch.seed,
            )
            sub_constants = (
                s_db_all[:, idx, :],
                sigma_free_all[:, idx],
                None if mu_all is None else mu_all[:, idx, :],
            )
            params_v = nets.tensor_params(networks.v0, tracked=True)
            params_u = nets.tensor_params(networks.field, tracked=True)
            loss, _, _ = _loss_tensor(spec, networks, sub, params_v, params_u, sub_constants)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingFailureError(
                    f"loss diverged at epoch {epoch}", loss_history
                )
            grad_v, grad_u = nets.param_gradients(loss, params_v, params_u)
            _, state_v = nets.train_step(networks.v0, grad_v, cfg_v, state_v)
            _, state_u = nets.train_step(networks.field, grad_u, cfg_u, state_u)
            loss_history.append(loss_value)
            epoch_sum += loss_value
        epoch_losses.append(epoch_sum / n_batches)
    return FieldEstimate(
        networks=networks,
        grid=config.grid,
        loss_history=loss_history,
        epoch_losses=epoch_losses,
        seconds=time.perf_counter() - t_start,
    )
