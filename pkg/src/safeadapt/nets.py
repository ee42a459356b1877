"""Flat-parameter MLPs with hand-written backprop and a diagonal Gaussian policy head.

Everything downstream (policy optimization, critics, Fisher estimation) works on
flat parameter vectors so that gradient projection, EWC penalties, and checkpoint
round-trips are simple array operations. Networks are small fixed-topology MLPs
(tanh hidden layers, linear output), so reverse mode is written out per layer
instead of going through a general autodiff tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class NetsError(Exception):
    """Raised for dimension mismatches and non-finite numerics."""


@dataclass(frozen=True)
class LayoutEntry:
    """One named block of a flat parameter vector, shaped (rows, cols)."""

    name: str
    rows: int
    cols: int

    @property
    def size(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 array of learnable parameters plus its block layout.

    Treat ``values`` as read-only; updates create a new ParamVector via
    :meth:`with_values`.
    """

    values: np.ndarray
    layout: tuple[LayoutEntry, ...]

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        expected = sum(e.size for e in self.layout)
        if values.ndim != 1 or values.size != expected:
            raise NetsError(
                f"parameter vector has {values.size} values, layout expects {expected}"
            )

    @property
    def size(self) -> int:
        return int(self.values.size)

    def offset(self, name: str) -> int:
        off = 0
        for entry in self.layout:
            if entry.name == name:
                return off
            off += entry.size
        raise KeyError(name)

    def block(self, name: str) -> np.ndarray:
        """Return the named block as a (rows, cols) view into the flat array."""
        off = self.offset(name)
        for entry in self.layout:
            if entry.name == name:
                return self.values[off : off + entry.size].reshape(entry.rows, entry.cols)
        raise KeyError(name)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values=np.asarray(values, dtype=np.float64), layout=self.layout)

    def copy(self) -> "ParamVector":
        return self.with_values(self.values.copy())

    def unflatten(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        off = 0
        for entry in self.layout:
            out[entry.name] = self.values[off : off + entry.size].reshape(
                entry.rows, entry.cols
            ).copy()
            off += entry.size
        return out


def flatten(blocks: dict[str, np.ndarray], layout: tuple[LayoutEntry, ...]) -> ParamVector:
    parts = []
    for entry in layout:
        arr = np.asarray(blocks[entry.name], dtype=np.float64)
        if arr.shape != (entry.rows, entry.cols):
            raise NetsError(f"block {entry.name!r} has shape {arr.shape}, expected "
                            f"({entry.rows}, {entry.cols})")
        parts.append(arr.reshape(-1))
    return ParamVector(values=np.concatenate(parts), layout=layout)


@dataclass(frozen=True)
class MlpSpec:
    """Topology of a fully connected tanh network with linear output."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise NetsError(f"all layer dims must be >= 1, got {dims}")
        if self.activation != "tanh":
            raise NetsError(f"unsupported activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def layout(self) -> tuple[LayoutEntry, ...]:
        entries = []
        dims = self.dims
        for i in range(self.n_layers):
            entries.append(LayoutEntry(f"w{i}", dims[i], dims[i + 1]))
            entries.append(LayoutEntry(f"b{i}", 1, dims[i + 1]))
        return tuple(entries)

    def param_count(self) -> int:
        return sum(e.size for e in self.layout())


def mlp_init(spec: MlpSpec, seed: int) -> ParamVector:
    """Initialize weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    blocks: dict[str, np.ndarray] = {}
    dims = spec.dims
    for i in range(spec.n_layers):
        bound = 1.0 / math.sqrt(dims[i])
        blocks[f"w{i}"] = rng.uniform(-bound, bound, size=(dims[i], dims[i + 1]))
        blocks[f"b{i}"] = np.zeros((1, dims[i + 1]))
    return flatten(blocks, spec.layout())


def _layers(params: ParamVector, spec: MlpSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(params.block(f"w{i}"), params.block(f"b{i}")) for i in range(spec.n_layers)]


def mlp_forward(params: ParamVector, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a single input (d,) or a batch (n, d)."""
    y, _ = mlp_forward_cached(params, spec, x)
    if np.ndim(x) == 1:
        return y[0]
    return y


def mlp_forward_cached(
    params: ParamVector, spec: MlpSpec, x: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass returning (output (n, out), per-layer inputs for backprop)."""
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if h.shape[1] != spec.input_dim:
        raise NetsError(f"input has dim {h.shape[1]}, spec expects {spec.input_dim}")
    layers = _layers(params, spec)
    acts = [h]
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b[0])
        acts.append(h)
    w, b = layers[-1]
    y = h @ w + b[0]
    return y, acts


def mlp_backward(
    params: ParamVector,
    spec: MlpSpec,
    acts: list[np.ndarray],
    grad_out: np.ndarray,
) -> np.ndarray:
    """Backprop ``grad_out`` (n, out) through the cached forward pass.

    Returns the gradient as a flat array aligned with ``spec.layout()`` (summed
    over the batch; divide upstream for means).
    """
    layers = _layers(params, spec)
    grads: dict[str, np.ndarray] = {}
    delta = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    for i in range(spec.n_layers - 1, -1, -1):
        w, _ = layers[i]
        h_in = acts[i]
        grads[f"w{i}"] = h_in.T @ delta
        grads[f"b{i}"] = delta.sum(axis=0, keepdims=True)
        if i > 0:
            # tanh'(z) expressed through the cached activation: 1 - h^2
            delta = (delta @ w.T) * (1.0 - acts[i] ** 2)
    return flatten(grads, spec.layout()).values


def mlp_squared_grad_sums(
    params: ParamVector,
    spec: MlpSpec,
    acts: list[np.ndarray],
    grad_out: np.ndarray,
) -> np.ndarray:
    """Sum over the batch of element-wise squared per-sample parameter gradients.

    Uses the rank-one structure of per-sample layer gradients
    (outer(h_i, delta_i), so its square is outer(h_i^2, delta_i^2)) to avoid a
    per-sample loop. Flat array aligned with ``spec.layout()``.
    """
    layers = _layers(params, spec)
    sq: dict[str, np.ndarray] = {}
    delta = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    for i in range(spec.n_layers - 1, -1, -1):
        w, _ = layers[i]
        h_in = acts[i]
        sq[f"w{i}"] = (h_in**2).T @ (delta**2)
        sq[f"b{i}"] = (delta**2).sum(axis=0, keepdims=True)
        if i > 0:
            delta = (delta @ w.T) * (1.0 - acts[i] ** 2)
    return flatten(sq, spec.layout()).values


def gaussian_logprob(
    mean: np.ndarray, log_std: np.ndarray, action: np.ndarray
) -> np.ndarray | float:
    """Diagonal Gaussian log density, summed over action dimensions.

    ``mean``/``action`` may be (d,) or (n, d); ``log_std`` is (d,).
    """
    mean = np.asarray(mean, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    if mean.shape != action.shape:
        raise NetsError(f"mean shape {mean.shape} != action shape {action.shape}")
    z = (action - mean) * np.exp(-log_std)
    lp = -0.5 * (z**2).sum(axis=-1) - log_std.sum() - 0.5 * log_std.shape[-1] * LOG_2PI
    if mean.ndim == 1:
        return float(lp)
    return lp


def gaussian_sample(
    mean: np.ndarray, log_std: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draw a = mean + exp(log_std) * z with z standard normal from ``rng``."""
    mean = np.asarray(mean, dtype=np.float64)
    z = rng.standard_normal(mean.shape)
    return mean + np.exp(np.asarray(log_std, dtype=np.float64)) * z


# Combined layout of a Gaussian policy: mean-net blocks followed by log_std.
LOG_STD_BLOCK = "log_std"


def policy_layout(spec: MlpSpec) -> tuple[LayoutEntry, ...]:
    return spec.layout() + (LayoutEntry(LOG_STD_BLOCK, 1, spec.output_dim),)


@dataclass(frozen=True)
class GaussianPolicy:
    """Diagonal Gaussian policy: MLP mean plus state-independent learnable log_std."""

    spec: MlpSpec
    params: ParamVector
    log_std: np.ndarray

    def __post_init__(self) -> None:
        log_std = np.asarray(self.log_std, dtype=np.float64)
        object.__setattr__(self, "log_std", log_std)
        if log_std.shape != (self.spec.output_dim,):
            raise NetsError(f"log_std shape {log_std.shape}, expected "
                            f"({self.spec.output_dim},)")
        if not np.all(np.isfinite(log_std)):
            raise NetsError("log_std must be finite")

    @property
    def action_dim(self) -> int:
        return self.spec.output_dim

    def mean(self, obs: np.ndarray) -> np.ndarray:
        return mlp_forward(self.params, self.spec, obs)

    def act(self, obs: np.ndarray, rng: np.random.Generator | None) -> tuple[np.ndarray, float]:
        """Sample an action (or return the mean when ``rng`` is None) with its log-prob."""
        mu = self.mean(obs)
        if rng is None:
            action = mu
        else:
            action = gaussian_sample(mu, self.log_std, rng)
        return action, float(gaussian_logprob(mu, self.log_std, action))

    def logprob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        mu = mlp_forward(self.params, self.spec, obs)
        return np.asarray(gaussian_logprob(mu, self.log_std, actions))

    def flat(self) -> ParamVector:
        """All learnable parameters (mean net then log_std) as one ParamVector."""
        values = np.concatenate([self.params.values, self.log_std])
        return ParamVector(values=values, layout=policy_layout(self.spec))

    def with_flat(self, flat: ParamVector | np.ndarray) -> "GaussianPolicy":
        values = flat.values if isinstance(flat, ParamVector) else np.asarray(flat)
        n_net = self.spec.param_count()
        if values.size != n_net + self.spec.output_dim:
            raise NetsError(f"flat policy vector has {values.size} values, expected "
                            f"{n_net + self.spec.output_dim}")
        return replace(
            self,
            params=ParamVector(values=values[:n_net].copy(), layout=self.spec.layout()),
            log_std=values[n_net:].copy(),
        )


def policy_init(spec: MlpSpec, seed: int, log_std_init: float = math.log(0.5)) -> GaussianPolicy:
    return GaussianPolicy(
        spec=spec,
        params=mlp_init(spec, seed),
        log_std=np.full(spec.output_dim, log_std_init),
    )


class ScalarObjective(Protocol):
    """A scalar function of a ParamVector that knows its analytic gradient."""

    def value(self, params: ParamVector) -> float: ...

    def gradient(self, params: ParamVector) -> ParamVector: ...


def grad_scalar(objective: ScalarObjective, params: ParamVector) -> ParamVector:
    """Analytic gradient of ``objective`` at ``params`` with a finiteness check."""
    grad = objective.gradient(params)
    if not np.all(np.isfinite(grad.values)):
        off = 0
        for entry in grad.layout:
            block = grad.values[off : off + entry.size]
            if not np.all(np.isfinite(block)):
                raise NetsError(f"non-finite gradient in layer {entry.name!r}")
            off += entry.size
        raise NetsError("non-finite gradient")
    return grad


@dataclass(frozen=True)
class MseObjective:
    """Mean squared error of an MLP against fixed targets, over all outputs."""

    spec: MlpSpec
    inputs: np.ndarray
    targets: np.ndarray

    def value(self, params: ParamVector) -> float:
        pred = mlp_forward(params, self.spec, self.inputs)
        return float(np.mean((pred - self.targets) ** 2))

    def gradient(self, params: ParamVector) -> ParamVector:
        pred, acts = mlp_forward_cached(params, self.spec, self.inputs)
        dout = 2.0 * (pred - np.atleast_2d(self.targets)) / pred.size
        return ParamVector(
            values=mlp_backward(params, self.spec, acts, dout), layout=self.spec.layout()
        )


@dataclass(frozen=True)
class PolicyLogProbObjective:
    """Mean Gaussian log-likelihood of fixed (obs, action) pairs.

    Operates on the combined policy layout (mean net + log_std); used for
    gradient checks and as the per-sample kernel of Fisher estimation.
    """

    spec: MlpSpec
    observations: np.ndarray
    actions: np.ndarray

    def _split(self, params: ParamVector) -> tuple[ParamVector, np.ndarray]:
        n_net = self.spec.param_count()
        net = ParamVector(values=params.values[:n_net], layout=self.spec.layout())
        return net, params.values[n_net:]

    def value(self, params: ParamVector) -> float:
        net, log_std = self._split(params)
        mu = mlp_forward(net, self.spec, self.observations)
        return float(np.mean(gaussian_logprob(mu, log_std, self.actions)))

    def gradient(self, params: ParamVector) -> ParamVector:
        net, log_std = self._split(params)
        mu, acts = mlp_forward_cached(net, self.spec, self.observations)
        a = np.atleast_2d(self.actions)
        n = mu.shape[0]
        inv_var = np.exp(-2.0 * log_std)
        # d logp / d mu = (a - mu)/sigma^2 ; d logp / d log_std = z^2 - 1
        dmu = (a - mu) * inv_var / n
        z2 = ((a - mu) ** 2) * inv_var
        dlog_std = (z2 - 1.0).sum(axis=0) / n
        net_grad = mlp_backward(net, self.spec, acts, dmu)
        return ParamVector(
            values=np.concatenate([net_grad, dlog_std]), layout=policy_layout(self.spec)
        )
