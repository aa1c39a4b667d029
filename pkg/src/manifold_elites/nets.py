"""Minimal dense MLP engine.

Flat parameter layout is fixed as: layer-major, weights before biases, weight
matrices row-major with shape (n_in, n_out). This layout is the serialization
contract used by archive and model persistence.

All arithmetic is float64. Functions are pure: identical inputs give
bit-identical outputs, and nothing here mutates its arguments.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace
from typing import BinaryIO, Sequence

import numpy as np

from .errors import ConfigurationError, TrainingError

ACTIVATIONS = ("linear", "tanh", "elu")
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}
_CODE_ACT = {i: name for name, i in _ACT_CODE.items()}


def _act_forward(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "elu":
        out = a.copy()
        neg = a <= 0.0
        out[neg] = np.expm1(a[neg])
        return out
    return a


def _act_deriv(name: str, a: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Derivative of the activation, given pre-activation a and output y."""
    if name == "tanh":
        return 1.0 - y * y
    if name == "elu":
        d = np.ones_like(a)
        neg = a <= 0.0
        d[neg] = y[neg] + 1.0  # exp(a) for a <= 0
        return d
    return np.ones_like(a)


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of one dense network: sizes plus per-transform activations."""

    layer_sizes: tuple[int, ...]
    hidden_activations: tuple[str, ...]
    output_activation: str = "linear"

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        hidden = tuple(self.hidden_activations)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "hidden_activations", hidden)
        if len(sizes) < 2:
            raise ConfigurationError("an MLP needs at least 2 layers")
        if any(n <= 0 for n in sizes):
            raise ConfigurationError(f"layer sizes must be positive: {sizes}")
        if len(hidden) != len(sizes) - 2:
            raise ConfigurationError(
                f"expected {len(sizes) - 2} hidden activations, got {len(hidden)}")
        for name in hidden + (self.output_activation,):
            if name not in _ACT_CODE:
                raise ConfigurationError(f"unknown activation {name!r}")

    @property
    def activations(self) -> tuple[str, ...]:
        """One activation per affine transform (hidden tags then output tag)."""
        return self.hidden_activations + (self.output_activation,)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def param_count(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_sizes, self.layer_sizes[1:]))

    def layer_shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.layer_sizes, self.layer_sizes[1:]))


def mlp(layer_sizes: Sequence[int], hidden: str = "tanh",
        output: str = "linear") -> MlpSpec:
    """Convenience constructor with one activation tag for every hidden layer."""
    sizes = tuple(layer_sizes)
    return MlpSpec(sizes, (hidden,) * (len(sizes) - 2), output)


@dataclass
class ParamVector:
    """A flat float64 parameter vector tied to the MlpSpec that interprets it."""

    values: np.ndarray
    spec: MlpSpec

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ConfigurationError("parameter vector must be 1-D")
        if v.shape[0] != self.spec.param_count:
            raise ConfigurationError(
                f"parameter vector has length {v.shape[0]}, "
                f"spec expects {self.spec.param_count}")
        self.values = v

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.spec)


def _values_of(params, spec: MlpSpec) -> np.ndarray:
    if isinstance(params, ParamVector):
        if params.spec.layer_sizes != spec.layer_sizes:
            raise ConfigurationError(
                f"parameters built for {params.spec.layer_sizes} used with "
                f"{spec.layer_sizes}")
        return params.values
    v = np.asarray(params, dtype=np.float64)
    if v.shape != (spec.param_count,):
        raise ConfigurationError(
            f"parameter vector has shape {v.shape}, spec expects ({spec.param_count},)")
    return v


def split_params(spec: MlpSpec, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of (W, b) per layer in the canonical flat layout."""
    layers = []
    off = 0
    for n_in, n_out in spec.layer_shapes():
        w = values[off:off + n_in * n_out].reshape(n_in, n_out)
        off += n_in * n_out
        b = values[off:off + n_out]
        off += n_out
        layers.append((w, b))
    return layers


def flatten_params(spec: MlpSpec, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    parts = []
    for w, b in layers:
        parts.append(np.asarray(w, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    values = np.concatenate(parts)
    if values.shape[0] != spec.param_count:
        raise ConfigurationError("layer shapes do not match spec")
    return values


# ---------------------------------------------------------------------------
# forward / backward


def mlp_forward_batch(spec: MlpSpec, params, x: np.ndarray) -> np.ndarray:
    """Forward pass for a batch of rows (B, input_dim) -> (B, output_dim)."""
    values = _values_of(params, spec)
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != spec.input_dim:
        raise ConfigurationError(
            f"batch input has shape {h.shape}, expected (B, {spec.input_dim})")
    for (w, b), act in zip(split_params(spec, values), spec.activations):
        h = _act_forward(act, h @ w + b)
    return h


def mlp_forward(spec: MlpSpec, params, x: np.ndarray) -> np.ndarray:
    """Forward pass for a single input vector."""
    xv = np.asarray(x, dtype=np.float64)
    if xv.shape != (spec.input_dim,):
        raise ConfigurationError(
            f"input has shape {xv.shape}, expected ({spec.input_dim},)")
    return mlp_forward_batch(spec, params, xv[None, :])[0]


def mlp_backward_batch(spec: MlpSpec, params, x: np.ndarray,
                       output_grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode gradients for a batch.

    Returns (param_grad, input_grad) where param_grad is summed over the batch
    and input_grad has one row per sample.
    """
    values = _values_of(params, spec)
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != spec.input_dim:
        raise ConfigurationError(
            f"batch input has shape {h.shape}, expected (B, {spec.input_dim})")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != (h.shape[0], spec.output_dim):
        raise ConfigurationError(
            f"output grad has shape {g.shape}, expected ({h.shape[0]}, {spec.output_dim})")

    layers = split_params(spec, values)
    inputs, preacts, outs = [], [], []
    for (w, b), act in zip(layers, spec.activations):
        inputs.append(h)
        a = h @ w + b
        h = _act_forward(act, a)
        preacts.append(a)
        outs.append(h)

    w_grads: list[np.ndarray] = [None] * len(layers)
    b_grads: list[np.ndarray] = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        act = spec.activations[i]
        g_pre = g * _act_deriv(act, preacts[i], outs[i])
        w_grads[i] = inputs[i].T @ g_pre
        b_grads[i] = g_pre.sum(axis=0)
        g = g_pre @ layers[i][0].T

    param_grad = flatten_params(spec, list(zip(w_grads, b_grads)))
    return param_grad, g


def mlp_backward(spec: MlpSpec, params, x: np.ndarray,
                 output_grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of the network outputs contracted with output_grad."""
    xv = np.asarray(x, dtype=np.float64)
    gv = np.asarray(output_grad, dtype=np.float64)
    if xv.shape != (spec.input_dim,):
        raise ConfigurationError(
            f"input has shape {xv.shape}, expected ({spec.input_dim},)")
    if gv.shape != (spec.output_dim,):
        raise ConfigurationError(
            f"output grad has shape {gv.shape}, expected ({spec.output_dim},)")
    pgrad, igrad = mlp_backward_batch(spec, params, xv[None, :], gv[None, :])
    return pgrad, igrad[0]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Bias-corrected Adam state over one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, n: int, lr: float = 1e-5, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), t=0, lr=lr,
                   beta1=beta1, beta2=beta2, epsilon=epsilon)

    def reset_moments(self) -> "AdamState":
        return replace(self, m=np.zeros_like(self.m), v=np.zeros_like(self.v), t=0)


def adam_step(state: AdamState, params, grads: np.ndarray):
    """One Adam update. Returns (updated params, updated state)."""
    wrap = isinstance(params, ParamVector)
    values = params.values if wrap else np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != values.shape:
        raise ConfigurationError(
            f"gradient shape {g.shape} does not match parameters {values.shape}")
    finite = np.isfinite(g)
    if not finite.all():
        idx = int(np.flatnonzero(~finite)[0])
        raise TrainingError(f"non-finite gradient at index {idx}")

    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_values = values - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = replace(state, m=m, v=v, t=t)
    if wrap:
        return ParamVector(new_values, params.spec), new_state
    return new_values, new_state


# ---------------------------------------------------------------------------
# Jacobians


@dataclass
class JacobianMatrix:
    """Jacobian of a decoder at a latent base point: entries[p, m] = d out_p / d z_m."""

    entries: np.ndarray
    base_point: np.ndarray


def decoder_jacobian(spec: MlpSpec, params, z: np.ndarray) -> JacobianMatrix:
    """Exact Jacobian via forward-mode accumulation, one tangent per latent dim.

    Forward mode is the cheap direction here: the latent dimension is far
    smaller than the output dimension.
    """
    values = _values_of(params, spec)
    zv = np.asarray(z, dtype=np.float64)
    if zv.shape != (spec.input_dim,):
        raise ConfigurationError(
            f"latent point has shape {zv.shape}, expected ({spec.input_dim},)")
    x = zv
    tang = np.eye(spec.input_dim)  # (M, width)
    for (w, b), act in zip(split_params(spec, values), spec.activations):
        a = x @ w + b
        tang = tang @ w
        y = _act_forward(act, a)
        tang = tang * _act_deriv(act, a, y)
        x = y
    return JacobianMatrix(entries=np.ascontiguousarray(tang.T), base_point=zv.copy())


def finite_diff_jacobian(spec: MlpSpec, params, z: np.ndarray,
                         h: float = 1e-4) -> JacobianMatrix:
    """Central-difference Jacobian estimate; test oracle for decoder_jacobian."""
    if h <= 0:
        raise ConfigurationError("finite-difference step must be positive")
    values = _values_of(params, spec)
    zv = np.asarray(z, dtype=np.float64)
    cols = []
    for i in range(spec.input_dim):
        zp = zv.copy()
        zm = zv.copy()
        zp[i] += h
        zm[i] -= h
        fp = mlp_forward(spec, values, zp)
        fm = mlp_forward(spec, values, zm)
        cols.append((fp - fm) / (2.0 * h))
    return JacobianMatrix(entries=np.stack(cols, axis=1), base_point=zv.copy())


# ---------------------------------------------------------------------------
# serialization: little-endian f64, length-prefixed, preceded by a spec
# descriptor (layer sizes + activation codes)


def write_spec_descriptor(stream: BinaryIO, spec: MlpSpec) -> None:
    sizes = spec.layer_sizes
    stream.write(struct.pack("<I", len(sizes)))
    stream.write(struct.pack(f"<{len(sizes)}I", *sizes))
    codes = [_ACT_CODE[a] for a in spec.activations]
    stream.write(struct.pack(f"<{len(codes)}B", *codes))


def read_spec_descriptor(stream: BinaryIO) -> MlpSpec:
    (n_layers,) = struct.unpack("<I", stream.read(4))
    sizes = struct.unpack(f"<{n_layers}I", stream.read(4 * n_layers))
    codes = struct.unpack(f"<{n_layers - 1}B", stream.read(n_layers - 1))
    acts = [_CODE_ACT[c] for c in codes]
    return MlpSpec(tuple(sizes), tuple(acts[:-1]), acts[-1])


def write_params(stream: BinaryIO, pv: ParamVector) -> None:
    write_spec_descriptor(stream, pv.spec)
    stream.write(struct.pack("<Q", pv.values.shape[0]))
    stream.write(pv.values.astype("<f8", copy=False).tobytes())


def read_params(stream: BinaryIO) -> ParamVector:
    spec = read_spec_descriptor(stream)
    (n,) = struct.unpack("<Q", stream.read(8))
    if n != spec.param_count:
        raise ConfigurationError(
            f"serialized length {n} does not match spec parameter count "
            f"{spec.param_count}")
    values = np.frombuffer(stream.read(8 * n), dtype="<f8").astype(np.float64)
    return ParamVector(values, spec)


def serialize_params(pv: ParamVector) -> bytes:
    buf = io.BytesIO()
    write_params(buf, pv)
    return buf.getvalue()


def deserialize_params(data: bytes) -> ParamVector:
    return read_params(io.BytesIO(data))
