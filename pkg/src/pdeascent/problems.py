"""Problem definitions: nonlinearities, convex conjugates, domains, and oracles.

State layout convention: ``x[0]`` is wealth ``w``; for stochastic-volatility
problems ``x[1:]`` are the volatility factors ``y``.  The operator ``h`` takes
``(t, x, p, q, gamma)`` with ``p`` the value, ``q`` the spatial gradient and
``gamma`` the Hessian, and returns ``+inf`` outside its domain.  ``f`` is the
convex conjugate of ``h`` over the Hessian argument, parameterized by the
diffusion matrix ``sigma``; its domain fixes all but the free entries of
``sigma``, and ascent moves only the free ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nets

INF = math.inf


class DomainError(ValueError):
    """A diffusion matrix outside the conjugate's domain."""


class NoOracleError(LookupError):
    """The problem has no closed-form solution wired in."""


class NonFiniteFieldError(FloatingPointError):
    """Field derivatives came back non-finite."""


class RiccatiBlowupError(RuntimeError):
    def __init__(self, blow_time: float):
        super().__init__(f"coefficient ODEs blew up at tau={blow_time:.6g}")
        self.blow_time = blow_time


def _sum_rows(x):
    if isinstance(x, ad.Tensor):
        return ad.gsum(x, axis=1, keepdims=True)
    return np.sum(x, axis=1, keepdims=True)


@dataclass(frozen=True)
class LinearCoeffs:
    """Coefficients of the linear PDE solved by the directional derivative."""

    k: float
    mu: np.ndarray
    ell: np.ndarray


# ---------------------------------------------------------------------------
# diffusion fields
# ---------------------------------------------------------------------------

class ConstantDiffusion:
    """Closed-form representation: one free value everywhere."""

    tag = "closed-form"

    def __init__(self, problem, value: float):
        self.problem = problem
        self.value = float(problem.project_free(value))

    def free_value_batch(self, ts: np.ndarray, xs: np.ndarray) -> np.ndarray:
        return np.full(len(np.atleast_1d(ts)), self.value)

    def free_value(self, t: float, x: np.ndarray) -> float:
        return self.value

    def matrix(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.problem.assemble_sigma(self.value)

    def matrix_batch(self, ts: np.ndarray, xs: np.ndarray) -> np.ndarray:
        base = self.problem.assemble_sigma(self.value)
        return np.broadcast_to(base, (len(np.atleast_1d(ts)),) + base.shape).copy()

    def refit(self, ts, xs, targets, seed=0):
        """Least-squares fit within the constant family: the projected mean."""
        new_value = float(np.mean(targets))
        new = ConstantDiffusion(self.problem, new_value)
        residual = float(np.sqrt(np.mean((targets - new.value) ** 2)))
        return new, residual


@dataclass(frozen=True)
class SigmaFitConfig:
    hidden_width: int = 16
    hidden_layers: int = 3
    steps: int = 400
    learning_rate: float = 0.02
    optimizer: str = "adam"


class NetworkDiffusion:
    """Fitted representation: a small net maps (t, x) to the free value."""

    tag = "fitted"

    def __init__(self, problem, net: nets.Network, fit: SigmaFitConfig | None = None):
        self.problem = problem
        self.net = net
        self.fit = fit or SigmaFitConfig()

    @classmethod
    def fresh(cls, problem, seed: int, fit: SigmaFitConfig | None = None) -> "NetworkDiffusion":
        fit = fit or SigmaFitConfig()
        widths = [problem.dim + 1] + [fit.hidden_width] * fit.hidden_layers + [1]
        return cls(problem, nets.init_network(widths, seed=seed), fit)

    def free_value_batch(self, ts: np.ndarray, xs: np.ndarray) -> np.ndarray:
        inputs = np.column_stack([np.asarray(ts, dtype=np.float64), np.atleast_2d(xs)])
        raw = nets.forward_batch(self.net, inputs)
        return self.problem.project_free(raw)

    def free_value(self, t: float, x: np.ndarray) -> float:
        return float(self.free_value_batch(np.array([t]), np.atleast_2d(x))[0])

    def matrix(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.problem.assemble_sigma(self.free_value(t, x))

    def matrix_batch(self, ts: np.ndarray, xs: np.ndarray) -> np.ndarray:
        vals = self.free_value_batch(ts, xs)
        return self.problem.assemble_sigma_batch(vals)

    def refit(self, ts, xs, targets, seed=0):
        """Fit a copy of the net to the target free values; returns RMS residual."""
        inputs = np.column_stack([np.asarray(ts, dtype=np.float64), np.atleast_2d(xs)])
        targets = np.asarray(targets, dtype=np.float64)
        net = self.net.copy()
        cfg = nets.TrainConfig(
            learning_rate=self.fit.learning_rate,
            epochs=1,
            batch_size=len(targets),
            optimizer=self.fit.optimizer,
        )
        state = nets.init_optimizer_state(net, cfg)
        for _ in range(self.fit.steps):
            params = nets.tensor_params(net, tracked=True)
            out = nets.forward_tape(params, ad.wrap(inputs), net.activation)
            err = out[:, 0] - targets
            loss = ad.gmean(err * err)
            grad = nets.param_gradient(loss, params)
            _, state = nets.train_step(net, grad, cfg, state)
        new = NetworkDiffusion(self.problem, net, self.fit)
        fitted = new.free_value_batch(ts, xs)
        residual = float(np.sqrt(np.mean((fitted - self.problem.project_free(targets)) ** 2)))
        return new, residual


# ---------------------------------------------------------------------------
# closed-form oracles
# ---------------------------------------------------------------------------

class AnalyticField:
    """Field interface (value/grad/hessian and batches) over closed forms."""

    def __init__(self, dim, value_batch, grad_batch, hessian_batch, dt_batch=None):
        self.dim = dim
        self._value = value_batch
        self._grad = grad_batch
        self._hess = hessian_batch
        self._dt = dt_batch

    def value_batch(self, ts, xs):
        return self._value(np.asarray(ts, dtype=np.float64), np.atleast_2d(xs))

    def grad_batch(self, ts, xs):
        return self._grad(np.asarray(ts, dtype=np.float64), np.atleast_2d(xs))

    def hessian_batch(self, ts, xs):
        return self._hess(np.asarray(ts, dtype=np.float64), np.atleast_2d(xs))

    def dt_batch(self, ts, xs):
        if self._dt is None:
            raise NoOracleError("time derivative not available")
        return self._dt(np.asarray(ts, dtype=np.float64), np.atleast_2d(xs))

    def value(self, t, x):
        return float(self.value_batch(np.array([t]), np.atleast_2d(x))[0])

    def grad(self, t, x):
        return self.grad_batch(np.array([t]), np.atleast_2d(x))[0]

    def hessian(self, t, x):
        return self.hessian_batch(np.array([t]), np.atleast_2d(x))[0]

    def dt(self, t, x):
        return float(self.dt_batch(np.array([t]), np.atleast_2d(x))[0])


@dataclass
class ClosedFormOracle:
    """Exact solution of a problem: the field plus the optimal diffusion."""

    field: AnalyticField
    sigma_star: ConstantDiffusion | None = None
    sigma_star_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def value_batch(self, ts, xs):
        return self.field.value_batch(ts, xs)

    def grad_batch(self, ts, xs):
        return self.field.grad_batch(ts, xs)

    def hessian_batch(self, ts, xs):
        return self.field.hessian_batch(ts, xs)

    def dt_batch(self, ts, xs):
        return self.field.dt_batch(ts, xs)

    def value(self, t, x):
        return self.field.value(t, x)

    def grad(self, t, x):
        return self.field.grad(t, x)

    def hessian(self, t, x):
        return self.field.hessian(t, x)

    def dt(self, t, x):
        return self.field.dt(t, x)


# ---------------------------------------------------------------------------
# Merton problem (single wealth coordinate)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MertonProblem:
    """Exponential-utility Merton problem with constant risk premium.

    ``h(q, gamma) = -lam^2 q^2 / (2 gamma)`` for ``gamma < 0`` (+inf otherwise);
    its conjugate is ``f = -|lam q sigma|`` with the whole line as domain.
    """

    lam: float = 0.5
    eta: float = 1.0
    horizon: float = 1.0

    dim = 1
    name = "merton"

    @property
    def free_mask(self) -> np.ndarray:
        return np.array([[True]])

    def lambda_total(self, x) -> float:
        return abs(self.lam)

    def h(self, t, x, p, q, gamma) -> float:
        q0 = float(np.atleast_1d(q)[0])
        g00 = float(np.atleast_2d(gamma)[0, 0])
        if g00 >= 0:
            return INF
        return -(self.lam**2) * q0**2 / (2.0 * g00)

    def in_domain_h(self, t, x, p, q, gamma) -> bool:
        return float(np.atleast_2d(gamma)[0, 0]) < 0

    def in_domain_f(self, sigma) -> bool:
        sigma = np.atleast_2d(sigma)
        return sigma.shape == (1, 1) and bool(np.isfinite(sigma).all())

    def f(self, t, x, p, q, sigma) -> float:
        if not self.in_domain_f(sigma):
            raise DomainError(f"sigma {sigma!r} outside the conjugate domain")
        q0 = float(np.atleast_1d(q)[0])
        s00 = float(np.atleast_2d(sigma)[0, 0])
        return -abs(self.lam * q0 * s00)

    def df_dp(self, t, x, p, q, sigma) -> float:
        return 0.0

    def df_dq(self, t, x, p, q, sigma) -> np.ndarray:
        s00 = float(np.atleast_2d(sigma)[0, 0])
        q0 = float(np.atleast_1d(q)[0])
        return np.array([-abs(self.lam * s00) * _sign_plus(q0)])

    def df_dsigma(self, t, x, p, q, sigma) -> np.ndarray:
        # right derivative at sigma=0 on the projected (nonnegative) domain
        s00 = float(np.atleast_2d(sigma)[0, 0])
        q0 = float(np.atleast_1d(q)[0])
        return np.array([[-abs(self.lam * q0) * _sign_plus(s00)]])

    def terminal(self, x) -> float:
        return 1.0 - math.exp(-self.eta * float(np.atleast_1d(x)[0]))

    def terminal_batch(self, xs: np.ndarray) -> np.ndarray:
        return 1.0 - np.exp(-self.eta * np.atleast_2d(xs)[:, 0])

    def project_free(self, value):
        return np.abs(value)

    def assemble_sigma(self, free_value: float) -> np.ndarray:
        return np.array([[float(free_value)]])

    def assemble_sigma_batch(self, free_values: np.ndarray) -> np.ndarray:
        return np.asarray(free_values, dtype=np.float64)[:, None, None]

    def project_sigma(self, sigma_raw) -> np.ndarray:
        return np.array([[abs(float(np.atleast_2d(sigma_raw)[0, 0]))]])

    def source_term(self, t, xs, y, z, sigma_free):
        """Conjugate as a source along paths; works on arrays and tensors."""
        s = np.asarray(sigma_free, dtype=np.float64).reshape(-1, 1)
        return abs(z[:, 0:1]) * (-abs(self.lam) * np.abs(s))

    # batched linearization pieces (free sigma entry only)
    def k_batch(self, ts, xs, v, q, sigma_free):
        return np.zeros(len(np.atleast_1d(ts)))

    def mu_batch(self, ts, xs, v, q, sigma_free):
        return (np.abs(self.lam) * sigma_free * np.sign(q[:, 0]))[:, None]

    def ell_free_batch(self, ts, xs, v, q, gamma, sigma_free):
        return -np.abs(self.lam) * np.abs(q[:, 0]) - sigma_free * gamma[:, 0, 0]

    def semilinear_oracle(self, sigma_value: float) -> ClosedFormOracle:
        """Exact solution of the fixed-sigma semilinear problem."""
        lam, eta, T = abs(self.lam), self.eta, self.horizon
        s = abs(float(sigma_value))
        alpha = 0.5 * s**2 * eta**2 - lam * s * eta

        def envelope(ts, xs):
            return np.exp(-eta * xs[:, 0] + alpha * (T - ts))

        def value(ts, xs):
            return 1.0 - envelope(ts, xs)

        def grad(ts, xs):
            return (eta * envelope(ts, xs))[:, None]

        def hessian(ts, xs):
            return (-(eta**2) * envelope(ts, xs))[:, None, None]

        def dt(ts, xs):
            return alpha * envelope(ts, xs)

        return ClosedFormOracle(
            field=AnalyticField(1, value, grad, hessian, dt),
            sigma_star=ConstantDiffusion(self, s),
        )

    def oracle(self) -> ClosedFormOracle:
        """Solution of the fully nonlinear problem; sigma* = |lam|/eta."""
        out = self.semilinear_oracle(abs(self.lam) / self.eta)
        out.sigma_star_fn = lambda ts, xs: np.full(len(ts), abs(self.lam) / self.eta)
        return out


def _sign_plus(v):
    return np.where(np.asarray(v) < 0, -1.0, 1.0)


# ---------------------------------------------------------------------------
# stochastic-volatility problem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StochVolProblem:
    """Utility maximization under OU stochastic volatility.

    ``premium`` selects the per-asset risk premium: "linear" gives
    ``lam_i(y) = lam_i * y`` (the experiment), "constant" gives
    ``lam_i(y) = lam_i`` (the Merton reduction).
    """

    lam: tuple
    eta: float
    kappa: tuple
    theta: tuple
    nu: tuple
    rho: tuple
    horizon: float = 1.0
    premium: str = "linear"

    name = "stochvol"

    def __post_init__(self):
        for name in ("lam", "kappa", "theta", "nu", "rho"):
            object.__setattr__(self, name, tuple(float(v) for v in np.atleast_1d(getattr(self, name))))
        if self.premium not in ("linear", "constant"):
            raise ValueError("premium must be 'linear' or 'constant'")
        if len({len(self.lam), len(self.kappa), len(self.theta), len(self.nu), len(self.rho)}) != 1:
            raise ValueError("parameter vectors must share one length")
        if any(abs(r) >= 1 for r in self.rho):
            raise ValueError("rho components must lie in (-1, 1)")

    @property
    def n_assets(self) -> int:
        return len(self.lam)

    @property
    def dim(self) -> int:
        return self.n_assets + 1

    @property
    def no_leverage(self) -> bool:
        return all(r == 0.0 for r in self.rho)

    @property
    def free_mask(self) -> np.ndarray:
        mask = np.zeros((self.dim, self.dim), dtype=bool)
        mask[0, 0] = True
        return mask

    def premium_values(self, y: np.ndarray) -> np.ndarray:
        lam = np.asarray(self.lam)
        y = np.atleast_2d(y)
        return lam * y if self.premium == "linear" else np.broadcast_to(lam, y.shape)

    def lambda_total_batch(self, xs: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(xs)[:, 1:]
        return np.sqrt(np.sum(self.premium_values(y) ** 2, axis=1))

    def lambda_total(self, x) -> float:
        return float(self.lambda_total_batch(np.atleast_2d(x))[0])

    def h(self, t, x, p, q, gamma) -> float:
        """Full spatial operator: OU generator plus the HJB nonlinearity."""
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        q = np.atleast_1d(np.asarray(q, dtype=np.float64))
        gamma = np.atleast_2d(np.asarray(gamma, dtype=np.float64))
        g00 = gamma[0, 0]
        if g00 >= 0:
            return INF
        y = x[1:]
        kappa, theta, nu, rho = map(np.asarray, (self.kappa, self.theta, self.nu, self.rho))
        lam_y = self.premium_values(y[None, :])[0]
        ou = float(np.sum(kappa * (theta - y) * q[1:]) + 0.5 * np.sum(nu**2 * np.diag(gamma)[1:]))
        quad = float(np.sum((lam_y * q[0] + rho * nu * gamma[0, 1:]) ** 2))
        return ou - 0.5 * quad / g00

    def in_domain_h(self, t, x, p, q, gamma) -> bool:
        return float(np.atleast_2d(gamma)[0, 0]) < 0

    def in_domain_f(self, sigma) -> bool:
        sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
        if sigma.shape != (self.dim, self.dim) or not np.isfinite(sigma).all():
            return False
        nu, rho = np.asarray(self.nu), np.asarray(self.rho)
        tol = 1e-9
        expected = np.zeros_like(sigma)
        expected[0, 0] = sigma[0, 0]
        expected[0, 1:] = sigma[0, 1:]
        for i in range(1, self.dim):
            expected[i, i] = sigma[i, i]
        if not np.allclose(sigma, expected, atol=tol):
            return False
        s0 = sigma[0, 1:]
        sii = np.diag(sigma)[1:]
        if np.any(np.abs(s0) > np.abs(rho) * nu + tol):
            return False
        if not np.allclose(s0**2 + sii**2, nu**2, atol=1e-8):
            return False
        return bool(np.all(sii >= -tol))

    def f(self, t, x, p, q, sigma) -> float:
        if not self.in_domain_f(sigma):
            raise DomainError("sigma outside the conjugate domain")
        sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        q = np.atleast_1d(np.asarray(q, dtype=np.float64))
        y = x[1:]
        q0, s00 = q[0], sigma[0, 0]
        kappa, theta, nu, rho = map(np.asarray, (self.kappa, self.theta, self.nu, self.rho))
        lam_y = self.premium_values(y[None, :])[0]
        drift_part = -float(np.sum(kappa * (theta - y) * q[1:]))
        uncorr = rho == 0.0
        lam0 = math.sqrt(float(np.sum(np.where(uncorr, lam_y**2, 0.0))))
        value = drift_part - abs(s00) * abs(q0) * lam0
        if not self.no_leverage:
            corr = ~uncorr
            value -= float(
                abs(s00) * q0 * np.sum(
                    np.where(corr, sigma[0, 1:] * lam_y / np.where(corr, rho * nu, 1.0), 0.0)
                )
            )
        return value

    def df_dp(self, t, x, p, q, sigma) -> float:
        return 0.0

    def df_dq(self, t, x, p, q, sigma) -> np.ndarray:
        sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        q = np.atleast_1d(np.asarray(q, dtype=np.float64))
        y = x[1:]
        kappa, theta, nu, rho = map(np.asarray, (self.kappa, self.theta, self.nu, self.rho))
        lam_y = self.premium_values(y[None, :])[0]
        uncorr = rho == 0.0
        lam0 = math.sqrt(float(np.sum(np.where(uncorr, lam_y**2, 0.0))))
        out = np.empty(self.dim)
        out[0] = -abs(sigma[0, 0]) * lam0 * _sign_plus(q[0])
        if not self.no_leverage:
            out[0] -= abs(sigma[0, 0]) * float(
                np.sum(np.where(~uncorr, sigma[0, 1:] * lam_y / np.where(~uncorr, rho * nu, 1.0), 0.0))
            )
        out[1:] = -kappa * (theta - y)
        return out

    def df_dsigma(self, t, x, p, q, sigma) -> np.ndarray:
        sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        q = np.atleast_1d(np.asarray(q, dtype=np.float64))
        y = x[1:]
        nu, rho = np.asarray(self.nu), np.asarray(self.rho)
        lam_y = self.premium_values(y[None, :])[0]
        uncorr = rho == 0.0
        lam0 = math.sqrt(float(np.sum(np.where(uncorr, lam_y**2, 0.0))))
        out = np.zeros((self.dim, self.dim))
        out[0, 0] = -abs(q[0]) * lam0 * _sign_plus(sigma[0, 0])
        if not self.no_leverage:
            corr = ~uncorr
            ratios = np.where(corr, lam_y / np.where(corr, rho * nu, 1.0), 0.0)
            out[0, 0] -= q[0] * float(np.sum(sigma[0, 1:] * ratios)) * _sign_plus(sigma[0, 0])
            out[0, 1:] = -abs(sigma[0, 0]) * q[0] * ratios
        return out

    def terminal(self, x) -> float:
        return 1.0 - math.exp(-self.eta * float(np.atleast_1d(x)[0]))

    def terminal_batch(self, xs: np.ndarray) -> np.ndarray:
        return 1.0 - np.exp(-self.eta * np.atleast_2d(xs)[:, 0])

    def project_free(self, value):
        return np.abs(value)

    def assemble_sigma(self, free_value: float) -> np.ndarray:
        out = np.diag(np.concatenate([[float(free_value)], np.asarray(self.nu)]))
        return out

    def assemble_sigma_batch(self, free_values: np.ndarray) -> np.ndarray:
        base = self.assemble_sigma(0.0)
        out = np.broadcast_to(base, (len(free_values),) + base.shape).copy()
        out[:, 0, 0] = free_values
        return out

    def project_sigma(self, sigma_raw) -> np.ndarray:
        sigma_raw = np.atleast_2d(np.asarray(sigma_raw, dtype=np.float64))
        nu, rho = np.asarray(self.nu), np.asarray(self.rho)
        out = np.zeros((self.dim, self.dim))
        out[0, 0] = abs(sigma_raw[0, 0])
        if self.no_leverage:
            out[np.arange(1, self.dim), np.arange(1, self.dim)] = nu
            return out
        s0 = np.clip(sigma_raw[0, 1:], -np.abs(rho) * nu, np.abs(rho) * nu)
        out[0, 1:] = s0
        out[np.arange(1, self.dim), np.arange(1, self.dim)] = np.sqrt(
            np.maximum(nu**2 - s0**2, 0.0)
        )
        return out

    def source_term(self, t, xs, y, z, sigma_free):
        if not self.no_leverage:
            raise NotImplementedError("training source only provided for rho = 0")
        xs = np.atleast_2d(xs)
        s = np.asarray(sigma_free, dtype=np.float64).reshape(-1, 1)
        lam_col = self.lambda_total_batch(xs)[:, None]
        kappa, theta = np.asarray(self.kappa), np.asarray(self.theta)
        drift_coeff = np.zeros_like(xs)
        drift_coeff[:, 1:] = -kappa * (theta - xs[:, 1:])
        return _sum_rows(z * drift_coeff) + abs(z[:, 0:1]) * (-np.abs(s) * lam_col)

    def k_batch(self, ts, xs, v, q, sigma_free):
        return np.zeros(len(np.atleast_1d(ts)))

    def mu_batch(self, ts, xs, v, q, sigma_free):
        xs = np.atleast_2d(xs)
        out = np.empty_like(xs)
        out[:, 0] = self.lambda_total_batch(xs) * sigma_free * np.sign(q[:, 0])
        out[:, 1:] = np.asarray(self.kappa) * (np.asarray(self.theta) - xs[:, 1:])
        return out

    def ell_free_batch(self, ts, xs, v, q, gamma, sigma_free):
        lam = self.lambda_total_batch(np.atleast_2d(xs))
        return -lam * np.abs(q[:, 0]) - sigma_free * gamma[:, 0, 0]

    def riccati_rhs(self, phi: np.ndarray, psi: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        lam = np.asarray(self.lam)
        kappa, theta, nu = map(np.asarray, (self.kappa, self.theta, self.nu))
        lam_sq_quad = lam**2 if self.premium == "linear" else np.zeros_like(lam)
        lam_sq_const = np.zeros_like(lam) if self.premium == "linear" else lam**2
        dphi = 0.5 * lam_sq_quad - 2.0 * kappa * phi - 2.0 * nu**2 * phi**2
        dpsi = 2.0 * kappa * theta * phi - (kappa + 2.0 * nu**2 * phi) * psi
        dchi = 0.5 * lam_sq_const + kappa * theta * psi + nu**2 * phi - 0.5 * nu**2 * psi**2
        return dphi, dpsi, dchi

    def oracle(self) -> ClosedFormOracle:
        if not self.no_leverage:
            raise NoOracleError("closed form only wired for the no-leverage case")
        tables = solve_riccati(self, self.horizon)
        eta, T = self.eta, self.horizon
        d = self.n_assets

        def pieces(ts, xs):
            xs = np.atleast_2d(xs)
            taus = T - np.asarray(ts, dtype=np.float64)
            phi, psi, chi = tables.interpolate(taus)  # each (B, d)
            y = xs[:, 1:]
            exponent = eta * xs[:, 0] + np.sum(phi * y**2 + psi * y + chi, axis=1)
            env = np.exp(-exponent)
            slope = 2.0 * phi * y + psi  # dPhi/dy_i, (B, d)
            return phi, psi, chi, y, env, slope

        def value(ts, xs):
            return 1.0 - pieces(ts, xs)[4]

        def grad(ts, xs):
            phi, psi, chi, y, env, slope = pieces(ts, xs)
            out = np.empty((len(env), d + 1))
            out[:, 0] = eta * env
            out[:, 1:] = slope * env[:, None]
            return out

        def hessian(ts, xs):
            phi, psi, chi, y, env, slope = pieces(ts, xs)
            B = len(env)
            out = np.empty((B, d + 1, d + 1))
            out[:, 0, 0] = -(eta**2) * env
            out[:, 0, 1:] = -eta * slope * env[:, None]
            out[:, 1:, 0] = out[:, 0, 1:]
            cross = -slope[:, :, None] * slope[:, None, :] * env[:, None, None]
            idx = np.arange(d)
            cross[:, idx, idx] = (2.0 * phi - slope**2) * env[:, None]
            out[:, 1:, 1:] = cross
            return out

        def dt(ts, xs):
            xs = np.atleast_2d(xs)
            taus = T - np.asarray(ts, dtype=np.float64)
            dphi, dpsi, dchi = tables.interpolate_derivative(taus)
            _, _, _, y, env, _ = pieces(ts, xs)
            return -env * np.sum(dphi * y**2 + dpsi * y + dchi, axis=1)

        def sigma_star_fn(ts, xs):
            return self.lambda_total_batch(np.atleast_2d(xs)) / eta

        return ClosedFormOracle(
            field=AnalyticField(self.dim, value, grad, hessian, dt),
            sigma_star=None,
            sigma_star_fn=sigma_star_fn,
        )


# ---------------------------------------------------------------------------
# heat-equation check problem (zero source, fixed isotropic diffusion)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HeatProblem:
    """|x|^2 terminal data under dX = s dB; F == 0, h is the linear operator."""

    sigma_value: float = 0.5
    dim: int = 1
    horizon: float = 1.0

    name = "heat"

    @property
    def free_mask(self) -> np.ndarray:
        return np.zeros((self.dim, self.dim), dtype=bool)

    def lambda_total(self, x) -> float:
        return 0.0

    def h(self, t, x, p, q, gamma) -> float:
        return 0.5 * self.sigma_value**2 * float(np.trace(np.atleast_2d(gamma)))

    def in_domain_h(self, t, x, p, q, gamma) -> bool:
        return True

    def in_domain_f(self, sigma) -> bool:
        sigma = np.atleast_2d(sigma)
        return sigma.shape == (self.dim, self.dim) and np.allclose(
            sigma, self.sigma_value * np.eye(self.dim), atol=1e-9
        )

    def f(self, t, x, p, q, sigma) -> float:
        if not self.in_domain_f(sigma):
            raise DomainError("heat problem admits only its fixed isotropic sigma")
        return 0.0

    def df_dp(self, t, x, p, q, sigma) -> float:
        return 0.0

    def df_dq(self, t, x, p, q, sigma) -> np.ndarray:
        return np.zeros(self.dim)

    def df_dsigma(self, t, x, p, q, sigma) -> np.ndarray:
        return np.zeros((self.dim, self.dim))

    def terminal(self, x) -> float:
        return float(np.sum(np.atleast_1d(x) ** 2))

    def terminal_batch(self, xs: np.ndarray) -> np.ndarray:
        return np.sum(np.atleast_2d(xs) ** 2, axis=1)

    def project_free(self, value):
        return np.full_like(np.asarray(value, dtype=np.float64), self.sigma_value)

    def assemble_sigma(self, free_value: float = 0.0) -> np.ndarray:
        return self.sigma_value * np.eye(self.dim)

    def assemble_sigma_batch(self, free_values: np.ndarray) -> np.ndarray:
        base = self.assemble_sigma()
        return np.broadcast_to(base, (len(free_values),) + base.shape).copy()

    def project_sigma(self, sigma_raw) -> np.ndarray:
        return self.assemble_sigma()

    def source_term(self, t, xs, y, z, sigma_free):
        return ad.Tensor(np.zeros((len(np.atleast_2d(xs)), 1))) if isinstance(z, ad.Tensor) else np.zeros((len(np.atleast_2d(xs)), 1))

    def k_batch(self, ts, xs, v, q, sigma_free):
        return np.zeros(len(np.atleast_1d(ts)))

    def mu_batch(self, ts, xs, v, q, sigma_free):
        return np.zeros_like(np.atleast_2d(xs))

    def ell_free_batch(self, ts, xs, v, q, gamma, sigma_free):
        return np.zeros(len(np.atleast_1d(ts)))

    def oracle(self) -> ClosedFormOracle:
        s, d, T = self.sigma_value, self.dim, self.horizon

        def value(ts, xs):
            return np.sum(np.atleast_2d(xs) ** 2, axis=1) + d * s**2 * (T - ts)

        def grad(ts, xs):
            return 2.0 * np.atleast_2d(xs)

        def hessian(ts, xs):
            return np.broadcast_to(2.0 * np.eye(d), (len(ts), d, d)).copy()

        def dt(ts, xs):
            return np.full(len(ts), -d * s**2)

        return ClosedFormOracle(
            field=AnalyticField(d, value, grad, hessian, dt),
            sigma_star=ConstantDiffusion(self, s),
        )


# ---------------------------------------------------------------------------
# Riccati integration for the stochastic-volatility closed form
# ---------------------------------------------------------------------------

@dataclass
class RiccatiTables:
    """Dense RK4 nodes with ODE-slope Hermite interpolation."""

    taus: np.ndarray          # (M+1,)
    phi: np.ndarray           # (M+1, d)
    psi: np.ndarray
    chi: np.ndarray
    dphi: np.ndarray
    dpsi: np.ndarray
    dchi: np.ndarray

    def _locate(self, tau: np.ndarray):
        tau = np.clip(np.asarray(tau, dtype=np.float64), 0.0, self.taus[-1])
        h = self.taus[1] - self.taus[0]
        idx = np.clip((tau / h).astype(int), 0, len(self.taus) - 2)
        s = (tau - self.taus[idx]) / h
        return idx, s, h

    def _hermite(self, a, da, idx, s, h):
        y0, y1 = a[idx], a[idx + 1]
        d0, d1 = da[idx] * h, da[idx + 1] * h
        s = s[:, None]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return h00 * y0 + h10 * d0 + h01 * y1 + h11 * d1

    def interpolate(self, tau: np.ndarray):
        idx, s, h = self._locate(tau)
        return (
            self._hermite(self.phi, self.dphi, idx, s, h),
            self._hermite(self.psi, self.dpsi, idx, s, h),
            self._hermite(self.chi, self.dchi, idx, s, h),
        )

    def interpolate_derivative(self, tau: np.ndarray):
        idx, s, h = self._locate(tau)
        ds = 1.0 / h

        def deriv(a, da):
            y0, y1 = a[idx], a[idx + 1]
            d0, d1 = da[idx] * h, da[idx + 1] * h
            ss = s[:, None]
            g = (
                (6 * ss**2 - 6 * ss) * y0
                + (3 * ss**2 - 4 * ss + 1) * d0
                + (-6 * ss**2 + 6 * ss) * y1
                + (3 * ss**2 - 2 * ss) * d1
            )
            return g * ds

        return (
            deriv(self.phi, self.dphi),
            deriv(self.psi, self.dpsi),
            deriv(self.chi, self.dchi),
        )


def solve_riccati(problem: StochVolProblem, tau_max: float, n_steps: int = 2000) -> RiccatiTables:
    """Classical RK4 on the coefficient ODEs, terminal data zero at tau=0."""
    d = problem.n_assets
    h = tau_max / n_steps
    taus = np.linspace(0.0, tau_max, n_steps + 1)
    phi = np.zeros((n_steps + 1, d))
    psi = np.zeros((n_steps + 1, d))
    chi = np.zeros((n_steps + 1, d))

    def rhs(state):
        p, s = state[0], state[1]
        return np.stack(problem.riccati_rhs(p, s))

    state = np.zeros((3, d))
    slopes = [rhs(state)]
    for n in range(n_steps):
        k1 = rhs(state)
        k2 = rhs(state + 0.5 * h * k1)
        k3 = rhs(state + 0.5 * h * k2)
        k4 = rhs(state + h * k3)
        state = state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(state)) or np.max(np.abs(state)) > 1e8:
            raise RiccatiBlowupError(blow_time=taus[n + 1])
        phi[n + 1], psi[n + 1], chi[n + 1] = state
        slopes.append(rhs(state))
    slopes = np.array(slopes)  # (M+1, 3, d)
    return RiccatiTables(
        taus=taus,
        phi=phi, psi=psi, chi=chi,
        dphi=slopes[:, 0], dpsi=slopes[:, 1], dchi=slopes[:, 2],
    )


def riccati_solve(problem: StochVolProblem, taus: np.ndarray) -> dict[str, np.ndarray]:
    """Coefficient tables phi_i, psi_i, chi_i evaluated on a requested tau grid."""
    taus = np.atleast_1d(np.asarray(taus, dtype=np.float64))
    if np.any(taus < 0):
        raise ValueError("tau values must be nonnegative")
    tables = solve_riccati(problem, max(float(np.max(taus)), 1e-12))
    phi, psi, chi = tables.interpolate(taus)
    return {"tau": taus, "phi": phi, "psi": psi, "chi": chi}


# ---------------------------------------------------------------------------
# module-level operation surface
# ---------------------------------------------------------------------------

def eval_h(problem, t, x, p, q, gamma) -> float:
    return problem.h(t, x, p, q, gamma)


def eval_f(problem, t, x, p, q, sigma) -> float:
    return problem.f(t, x, p, q, sigma)


def project_domain(problem, sigma_raw, t=0.0, x=None) -> np.ndarray:
    return problem.project_sigma(sigma_raw)


def oracle(problem) -> ClosedFormOracle:
    getter = getattr(problem, "oracle", None)
    if getter is None:
        raise NoOracleError(f"no closed form for problem {problem!r}")
    return getter()


def linearization_coeffs(problem, field, sigma_field, t, x) -> LinearCoeffs:
    """Coefficients (k, mu, ell) of the directional-derivative PDE at (t, x)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    v = field.value(t, x)
    q = np.asarray(field.grad(t, x), dtype=np.float64)
    gamma = np.atleast_2d(np.asarray(field.hessian(t, x), dtype=np.float64))
    sigma = sigma_field.matrix(t, x) if hasattr(sigma_field, "matrix") else np.atleast_2d(sigma_field)
    pieces = [v, q, gamma, sigma]
    if not all(np.all(np.isfinite(np.asarray(piece))) for piece in pieces):
        raise NonFiniteFieldError(f"non-finite field data at (t={t}, x={x})")
    k = problem.df_dp(t, x, v, q, sigma)
    mu = -problem.df_dq(t, x, v, q, sigma)
    ell_full = problem.df_dsigma(t, x, v, q, sigma) - sigma.T @ gamma
    ell = np.where(problem.free_mask, ell_full, 0.0)
    if not (np.isfinite(k) and np.all(np.isfinite(mu)) and np.all(np.isfinite(ell))):
        raise NonFiniteFieldError(f"non-finite linearization at (t={t}, x={x})")
    return LinearCoeffs(k=float(k), mu=mu, ell=ell)
