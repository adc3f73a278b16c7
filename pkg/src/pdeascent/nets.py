"""Small feed-forward approximators with input derivatives and first-order optimizers.

Networks map a real vector to a scalar.  Hidden layers use a smooth,
twice-differentiable activation so that second input-derivatives (consumed by
the ascent direction field) exist everywhere.  Input gradients and Hessians
come from the tape in :mod:`pdeascent.autodiff`; parameter gradients of losses
that contain input gradients are obtained by differentiating through the tape
a second time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

CHECKPOINT_FORMAT = "pdeascent-mlp-v1"

# activation name -> (numpy fn, tape fn); all entries must be C^2
_ACTIVATIONS = {
    "tanh": (np.tanh, ad.tanh),
    "square": (np.square, ad.square),
}


class InputShapeError(ValueError):
    """Input vector length does not match the network's input width."""


class NonFiniteValueError(FloatingPointError):
    """A gradient or parameter update produced non-finite values."""


def default_hidden_width(state_dim: int) -> int:
    # stand-in for the unspecified "dependent of the dimension" rule
    return max(16, 4 * (state_dim + 2))


@dataclass
class Network:
    """Fully-connected scalar-output network; weights are (fan_in, fan_out)."""

    widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count inconsistent with widths")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[i], self.widths[i + 1]) or b.shape != (self.widths[i + 1],):
                raise ValueError(f"layer {i} has shape {w.shape}, expected "
                                 f"{(self.widths[i], self.widths[i + 1])}")

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    def copy(self) -> "Network":
        return Network(
            widths=list(self.widths),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
        )


def init_network(widths: list[int], seed: int, activation: str = "tanh") -> Network:
    """Seeded init: uniform weights scaled by 1/sqrt(fan_in), zero biases."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Network(widths=list(widths), weights=weights, biases=biases, activation=activation)


def forward_multi_batch(net: Network, x: np.ndarray) -> np.ndarray:
    """Evaluate on (batch, input_dim); returns (batch, output_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise InputShapeError(
            f"input of shape {x.shape} incompatible with network input width {net.input_dim}"
        )
    act = _ACTIVATIONS[net.activation][0]
    a = x
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        a = act(a @ w + b)
    return a @ net.weights[-1] + net.biases[-1]


def forward_batch(net: Network, x: np.ndarray) -> np.ndarray:
    """Evaluate a scalar-output network on (batch, input_dim); returns (batch,)."""
    if net.widths[-1] != 1:
        raise InputShapeError("forward_batch requires a scalar-output network")
    return forward_multi_batch(net, x)[:, 0]


def forward(net: Network, x) -> float:
    """Scalar evaluation at a single input vector."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return float(forward_batch(net, x[None, :])[0])


def tensor_params(net: Network, tracked: bool = True) -> list[tuple[ad.Tensor, ad.Tensor]]:
    return [
        (ad.Tensor(w, tracked=tracked), ad.Tensor(b, tracked=tracked))
        for w, b in zip(net.weights, net.biases)
    ]


def forward_tape(
    params: list[tuple[ad.Tensor, ad.Tensor]], x: ad.Tensor, activation: str = "tanh"
) -> ad.Tensor:
    """Tape evaluation; ``x`` is (batch, input_dim), result (batch, 1)."""
    act = _ACTIVATIONS[activation][1]
    a = x
    for w, b in params[:-1]:
        a = act(a @ w + b)
    w, b = params[-1]
    return a @ w + b


def grad_input_batch(net: Network, x: np.ndarray) -> np.ndarray:
    """Per-sample input gradients, shape (batch, input_dim)."""
    if net.widths[-1] != 1:
        raise InputShapeError("grad_input requires a scalar-output network")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise InputShapeError(
            f"input of shape {x.shape} incompatible with network input width {net.input_dim}"
        )
    leaf = ad.variable(x)
    out = forward_tape(tensor_params(net, tracked=False), leaf, net.activation)
    (g,) = ad.grad(ad.gsum(out), [leaf])
    return g.value


def grad_input(net: Network, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return grad_input_batch(net, x[None, :])[0]


def hessian_input_batch(net: Network, x: np.ndarray) -> np.ndarray:
    """Per-sample input Hessians, shape (batch, input_dim, input_dim)."""
    if net.widths[-1] != 1:
        raise InputShapeError("hessian_input requires a scalar-output network")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise InputShapeError(
            f"input of shape {x.shape} incompatible with network input width {net.input_dim}"
        )
    leaf = ad.variable(x)
    out = forward_tape(tensor_params(net, tracked=False), leaf, net.activation)
    (g,) = ad.grad(ad.gsum(out), [leaf])  # (batch, in), still on the tape
    rows = []
    for j in range(net.input_dim):
        (hj,) = ad.grad(ad.gsum(g[:, j]), [leaf])
        rows.append(hj.value)
    return np.stack(rows, axis=1)  # rows[j][b] = d/dx (dy/dx_j)


def hessian_input(net: Network, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return hessian_input_batch(net, x[None, :])[0]


def jacobian_input_batch(net: Network, x: np.ndarray) -> np.ndarray:
    """Input Jacobian of a vector-output network, shape (batch, out, in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise InputShapeError(
            f"input of shape {x.shape} incompatible with network input width {net.input_dim}"
        )
    leaf = ad.variable(x)
    out = forward_tape(tensor_params(net, tracked=False), leaf, net.activation)
    rows = []
    for k in range(net.widths[-1]):
        (g,) = ad.grad(ad.gsum(out[:, k]), [leaf])
        rows.append(g.value)
    return np.stack(rows, axis=1)


# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    optimizer: str = "adam"  # "adam" | "sgd"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class ParamGradient:
    """Gradient of a scalar loss, shape-congruent with a Network's parameters."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def check_against(self, net: Network) -> None:
        ok = len(self.weights) == len(net.weights) and all(
            gw.shape == w.shape and gb.shape == b.shape
            for gw, gb, w, b in zip(self.weights, self.biases, net.weights, net.biases)
        )
        if not ok:
            raise ValueError("gradient shapes do not match network parameters")


def param_gradient(loss: ad.Tensor, params: list[tuple[ad.Tensor, ad.Tensor]]) -> ParamGradient:
    flat = [t for pair in params for t in pair]
    gs = ad.grad(loss, flat)
    values = [g.value for g in gs]
    return ParamGradient(weights=values[0::2], biases=values[1::2])


def param_gradients(loss: ad.Tensor, *param_lists) -> tuple[ParamGradient, ...]:
    """Gradients for several networks in one reverse sweep."""
    flat = [t for params in param_lists for pair in params for t in pair]
    gs = ad.grad(loss, flat)
    out, pos = [], 0
    for params in param_lists:
        n = 2 * len(params)
        values = [g.value for g in gs[pos:pos + n]]
        out.append(ParamGradient(weights=values[0::2], biases=values[1::2]))
        pos += n
    return tuple(out)


@dataclass
class AdamState:
    step: int = 0
    m_w: list[np.ndarray] = field(default_factory=list)
    v_w: list[np.ndarray] = field(default_factory=list)
    m_b: list[np.ndarray] = field(default_factory=list)
    v_b: list[np.ndarray] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer_state(net: Network, config: TrainConfig) -> AdamState | None:
    if config.optimizer == "sgd":
        return None
    return AdamState(
        m_w=[np.zeros_like(w) for w in net.weights],
        v_w=[np.zeros_like(w) for w in net.weights],
        m_b=[np.zeros_like(b) for b in net.biases],
        v_b=[np.zeros_like(b) for b in net.biases],
    )


def train_step(
    net: Network,
    grad: ParamGradient,
    config: TrainConfig,
    state: AdamState | None = None,
) -> tuple[Network, AdamState | None]:
    """One optimizer update (in place); returns the network and new state."""
    grad.check_against(net)
    for g in grad.weights + grad.biases:
        if not np.all(np.isfinite(g)):
            raise NonFiniteValueError("non-finite parameter gradient")
    lr = config.learning_rate
    if config.optimizer == "sgd":
        for w, gw in zip(net.weights, grad.weights):
            w -= lr * gw
        for b, gb in zip(net.biases, grad.biases):
            b -= lr * gb
        return net, state
    if state is None:
        state = init_optimizer_state(net, config)
    state.step += 1
    t = state.step
    scale = lr * np.sqrt(1.0 - state.beta2**t) / (1.0 - state.beta1**t)
    for arrs, grads, ms, vs in (
        (net.weights, grad.weights, state.m_w, state.v_w),
        (net.biases, grad.biases, state.m_b, state.v_b),
    ):
        for a, g, m, v in zip(arrs, grads, ms, vs):
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            a -= scale * m / (np.sqrt(v) + state.eps)
    return net, state


# -- persistence ----------------------------------------------------------------

def save_network(net: Network, path: str | Path) -> None:
    record = {
        "format": CHECKPOINT_FORMAT,
        "widths": list(net.widths),
        "activation": net.activation,
        "layers": [
            {"weights": w.tolist(), "bias": b.tolist()}
            for w, b in zip(net.weights, net.biases)
        ],
    }
    Path(path).write_text(json.dumps(record))


def load_network(path: str | Path) -> Network:
    record = json.loads(Path(path).read_text())
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {record.get('format')!r}")
    return Network(
        widths=list(record["widths"]),
        weights=[np.asarray(layer["weights"], dtype=np.float64) for layer in record["layers"]],
        biases=[np.asarray(layer["bias"], dtype=np.float64) for layer in record["layers"]],
        activation=record["activation"],
    )
