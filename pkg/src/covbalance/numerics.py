"""Low-level numerics: seeded RNG streams, small feed-forward networks with
hand-rolled reverse-mode gradients (dense and valid 2-D convolution layers),
the Adam update rule, and a central-difference gradient checker.

Everything here is 64-bit and deterministic given an RngStream. Values are
immutable once constructed; operations return fresh objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

EXP_CLAMP = 30.0
ACTIVATIONS = ("relu", "identity", "exp", "sigmoid")


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RngStream:
    """Addressable random stream: (seed, stream) pins the whole sequence.

    Backed by the counter-based Philox generator keyed through a
    SeedSequence, so distinct (seed, stream) pairs give independent
    streams by construction and replications can be parallelized without
    sharing state. ``child(i, j, ...)`` derives hierarchical substreams.
    """

    seed: int
    stream: int = 0
    path: tuple[int, ...] = ()

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,) + self.path)
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *index: int) -> "RngStream":
        return RngStream(self.seed, self.stream, self.path + index)


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenseSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"


@dataclass(frozen=True)
class ConvSpec:
    """Valid (no padding), stride-1 square convolution.

    ``in_shape`` is (height, width, channels); the weight matrix is stored
    in im2col layout, shape (kernel*kernel*channels, out_channels) with row
    order (ki, kj, channel).
    """

    in_shape: tuple[int, int, int]
    kernel: int
    out_channels: int
    activation: str = "relu"

    @property
    def out_shape(self) -> tuple[int, int, int]:
        h, w, _ = self.in_shape
        k = self.kernel
        return (h - k + 1, w - k + 1, self.out_channels)


LayerSpec = DenseSpec | ConvSpec
Architecture = tuple[LayerSpec, ...]


def _validate_arch(arch: Architecture) -> None:
    if not arch:
        raise ValueError("architecture must have at least one layer")
    for spec in arch:
        if spec.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {spec.activation!r}")
        if isinstance(spec, ConvSpec):
            h, w, _ = spec.in_shape
            if spec.kernel > min(h, w):
                raise ValueError("kernel larger than input")
    for a, b in zip(arch, arch[1:]):
        out = _flat_dim(a.out_shape if isinstance(a, ConvSpec) else None) \
            if isinstance(a, ConvSpec) else a.out_dim
        if isinstance(b, ConvSpec):
            if out != _flat_dim(b.in_shape):
                raise ValueError("incompatible consecutive layer dimensions")
        elif out != b.in_dim:
            raise ValueError("incompatible consecutive layer dimensions")
    last = arch[-1]
    if isinstance(last, ConvSpec) or last.out_dim != 1:
        raise ValueError("final layer must be dense with a single output")


def _flat_dim(shape: tuple[int, int, int]) -> int:
    return shape[0] * shape[1] * shape[2]


def arch_input_dim(arch: Architecture) -> int:
    first = arch[0]
    return _flat_dim(first.in_shape) if isinstance(first, ConvSpec) else first.in_dim


def mlp(in_dim: int, hidden: tuple[int, ...] = (2, 2, 2, 2),
        output_activation: str = "identity") -> Architecture:
    """Fully connected architecture with rectifier hidden layers."""
    layers: list[LayerSpec] = []
    prev = in_dim
    for h in hidden:
        layers.append(DenseSpec(prev, h, "relu"))
        prev = h
    layers.append(DenseSpec(prev, 1, output_activation))
    arch = tuple(layers)
    _validate_arch(arch)
    return arch


def cnn(in_shape: tuple[int, int, int],
        conv: tuple[tuple[int, int], ...] = ((5, 8), (5, 16)),
        dense: tuple[int, ...] = (128,),
        output_activation: str = "identity") -> Architecture:
    """Convolutional architecture: valid 2-D convs, then dense layers.

    ``conv`` is a sequence of (kernel, out_channels) pairs.
    """
    layers: list[LayerSpec] = []
    shape = in_shape
    for kernel, channels in conv:
        spec = ConvSpec(shape, kernel, channels, "relu")
        layers.append(spec)
        shape = spec.out_shape
    prev = _flat_dim(shape)
    for h in dense:
        layers.append(DenseSpec(prev, h, "relu"))
        prev = h
    layers.append(DenseSpec(prev, 1, output_activation))
    arch = tuple(layers)
    _validate_arch(arch)
    return arch


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class NetworkParams:
    """Ordered (weight, bias) pairs for each layer of ``arch``."""

    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, [w.copy() for w in self.weights],
                             [b.copy() for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def with_arrays(self, arrays: list[np.ndarray]) -> "NetworkParams":
        k = len(self.weights)
        return NetworkParams(self.arch, list(arrays[:k]), list(arrays[k:]))

    def weight_sum_squares(self) -> float:
        """Degree-2 regularizer over weight matrices; biases excluded."""
        return float(sum(np.sum(w * w) for w in self.weights))

    def validate_finite(self) -> None:
        for a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise NumericError("non-finite network parameters")


def _layer_dims(spec: LayerSpec) -> tuple[int, int]:
    if isinstance(spec, ConvSpec):
        k = spec.kernel
        return k * k * spec.in_shape[2], spec.out_channels
    return spec.in_dim, spec.out_dim


def init_params(arch: Architecture, rng: RngStream, weight_scale: float = 1.0,
                bias_scale: float = 0.0) -> NetworkParams:
    """Scaled-Gaussian fan-in initialization.

    Rectifier layers get std weight_scale * sqrt(2/fan_in), all others
    weight_scale * sqrt(1/fan_in). Biases start at zero unless a
    ``bias_scale`` is given (uniform in [-bias_scale, bias_scale]; nonzero
    biases keep narrow rectifier stacks from collapsing to constants).
    """
    _validate_arch(arch)
    gen = rng.generator()
    weights, biases = [], []
    for spec in arch:
        fan_in, fan_out = _layer_dims(spec)
        scale = weight_scale * math.sqrt(
            (2.0 if spec.activation == "relu" else 1.0) / fan_in)
        weights.append(gen.normal(0.0, scale, size=(fan_in, fan_out)))
        if bias_scale > 0:
            biases.append(gen.uniform(-bias_scale, bias_scale, size=fan_out))
        else:
            biases.append(np.zeros(fan_out))
    return NetworkParams(arch, weights, biases)


def zeros_like_params(params: NetworkParams) -> NetworkParams:
    return NetworkParams(params.arch,
                         [np.zeros_like(w) for w in params.weights],
                         [np.zeros_like(b) for b in params.biases])


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def _act(z: np.ndarray, name: str) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "identity":
        return z
    if name == "exp":
        return np.exp(np.clip(z, -EXP_CLAMP, EXP_CLAMP))
    if name == "sigmoid":
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(z: np.ndarray, a: np.ndarray, name: str) -> np.ndarray:
    # subgradient at the rectifier kink is 0, and 0 outside the exp clamp
    if name == "relu":
        return (z > 0).astype(float)
    if name == "identity":
        return np.ones_like(z)
    if name == "exp":
        return a * ((z > -EXP_CLAMP) & (z < EXP_CLAMP))
    if name == "sigmoid":
        return a * (1.0 - a)
    raise ValueError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, h, w, c) -> (B, oh, ow, k*k*c) patches, row order (ki, kj, c)."""
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    # win: (B, oh, ow, c, k, k) -> (B, oh, ow, k, k, c)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    b, oh, ow = win.shape[:3]
    return np.ascontiguousarray(win).reshape(b, oh, ow, -1)


def _forward(params: NetworkParams, x: np.ndarray, want_cache: bool):
    n = x.shape[0]
    a = x
    caches = [] if want_cache else None
    for spec, w, b in zip(params.arch, params.weights, params.biases):
        if isinstance(spec, ConvSpec):
            if a.ndim == 2:
                a = a.reshape(n, *spec.in_shape)
            cols = _im2col(a, spec.kernel)
            z = cols @ w + b
        else:
            if a.ndim != 2:
                a = a.reshape(n, -1)
            if a.shape[1] != spec.in_dim:
                raise ValueError(
                    f"dimension mismatch: layer expects {spec.in_dim}, got {a.shape[1]}")
            cols = None
            z = a @ w + b
        out = _act(z, spec.activation)
        if want_cache:
            caches.append((a, cols, z, out))
        a = out
    return a[..., 0], caches


def net_forward_batch(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Scalar network output for each row of ``x``; shape (n,)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected a 2-D batch of inputs")
    if x.shape[1] != arch_input_dim(params.arch):
        raise ValueError(
            f"dimension mismatch: net expects {arch_input_dim(params.arch)}, "
            f"got {x.shape[1]}")
    out, _ = _forward(params, x, want_cache=False)
    return out


def net_forward(params: NetworkParams, x: np.ndarray) -> float:
    """Scalar output for a single input vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a 1-D input vector")
    return float(net_forward_batch(params, x[None, :])[0])


def net_gradient_batch(params: NetworkParams, x: np.ndarray,
                       upstream: np.ndarray) -> NetworkParams:
    """Gradient of sum_i upstream_i * f(x_i) with respect to the parameters.

    Exact reverse-mode differentiation through the cached forward pass;
    returns a NetworkParams-shaped gradient.
    """
    x = np.asarray(x, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    if x.ndim != 2 or upstream.shape != (x.shape[0],):
        raise ValueError("batch/upstream shape mismatch")
    _, caches = _forward(params, x, want_cache=True)
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    da = upstream[:, None]
    for idx in range(len(params.arch) - 1, -1, -1):
        spec = params.arch[idx]
        a_in, cols, z, a_out = caches[idx]
        if da.shape != z.shape:
            da = da.reshape(z.shape)
        dz = da * _act_grad(z, a_out, spec.activation)
        w = params.weights[idx]
        if isinstance(spec, ConvSpec):
            k = spec.kernel
            b_n, oh, ow, _ = dz.shape
            dz_flat = dz.reshape(-1, spec.out_channels)
            grads_w[idx] = cols.reshape(-1, cols.shape[-1]).T @ dz_flat
            grads_b[idx] = dz_flat.sum(axis=0)
            if idx > 0:
                dcols = (dz_flat @ w.T).reshape(b_n, oh, ow, k, k, spec.in_shape[2])
                dx = np.zeros((b_n, *spec.in_shape))
                for di in range(k):
                    for dj in range(k):
                        dx[:, di:di + oh, dj:dj + ow, :] += dcols[:, :, :, di, dj, :]
                da = dx
        else:
            grads_w[idx] = a_in.T @ dz
            grads_b[idx] = dz.sum(axis=0)
            if idx > 0:
                da = dz @ w.T
    return NetworkParams(params.arch, grads_w, grads_b)


def net_gradient(params: NetworkParams, x: np.ndarray, upstream: float) -> NetworkParams:
    """Gradient of upstream * f(x) for a single input vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a 1-D input vector")
    return net_gradient_batch(params, x[None, :], np.array([upstream], dtype=float))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]


def adam_init(params: NetworkParams | list[np.ndarray]) -> AdamState:
    arrays = params.arrays() if isinstance(params, NetworkParams) else params
    return AdamState(0, [np.zeros_like(a) for a in arrays],
                     [np.zeros_like(a) for a in arrays])


def adam_step(params, grads, state: AdamState, learning_rate: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update; returns (new params, new state).

    ``params``/``grads`` are either NetworkParams or plain lists of arrays.
    """
    wrapped = isinstance(params, NetworkParams)
    p_arrays = params.arrays() if wrapped else list(params)
    g_arrays = grads.arrays() if isinstance(grads, NetworkParams) else list(grads)
    if len(p_arrays) != len(g_arrays) or any(
            p.shape != g.shape for p, g in zip(p_arrays, g_arrays)):
        raise ValueError("parameter/gradient shape mismatch")
    t = state.step + 1
    new_m, new_v, new_p = [], [], []
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        p = p - learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m.append(m)
        new_v.append(v)
        new_p.append(p)
    new_state = AdamState(t, new_m, new_v)
    if wrapped:
        return params.with_arrays(new_p), new_state
    return new_p, new_state


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

@dataclass
class FdReport:
    max_rel_error: float
    checked: int
    tolerance: float
    worst: tuple[int, int] = (-1, -1)  # (array index, flat coordinate)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_difference_check(loss_and_grad, params, step: float = 1e-4,
                            tolerance: float = 1e-5,
                            max_coords: int | None = None,
                            rng: RngStream | None = None) -> FdReport:
    """Compare an analytic gradient against central differences.

    ``loss_and_grad(params) -> (value, grads)`` where grads mirrors the
    structure of ``params`` (NetworkParams or list of arrays). The relative
    error per coordinate is |a - n| / (|a| + |n| + 1e-3). With
    ``max_coords`` set, a random subset of coordinates is checked.
    """
    wrapped = isinstance(params, NetworkParams)
    base = params.copy() if wrapped else [np.array(a, dtype=float) for a in params]
    arrays = base.arrays() if wrapped else base
    value, grads = loss_and_grad(base)
    if not np.isfinite(value):
        raise NumericError("non-finite loss at the evaluation point")
    g_arrays = grads.arrays() if isinstance(grads, NetworkParams) else list(grads)

    coords = [(i, j) for i, a in enumerate(arrays) for j in range(a.size)]
    if max_coords is not None and len(coords) > max_coords:
        gen = (rng or RngStream(0)).generator()
        picks = gen.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(p)] for p in picks]

    worst = (-1, -1)
    max_err = 0.0
    for i, j in coords:
        flat = arrays[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up, _ = loss_and_grad(base)
        flat[j] = orig - step
        down, _ = loss_and_grad(base)
        flat[j] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("non-finite loss during finite differencing")
        numeric = (up - down) / (2.0 * step)
        analytic = g_arrays[i].reshape(-1)[j]
        err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-3)
        if err > max_err:
            max_err = err
            worst = (i, j)
    return FdReport(max_err, len(coords), tolerance, worst)
