"""Dense feed-forward network with hand-written reverse mode, Adam, and checkpoints.

All arrays are float64. Weight matrices are stored ``(fan_out, fan_in)`` in
row-major order so a layer computes ``W @ x + b``. Inputs may be a single
vector ``(input_dim,)`` or a batch ``(n, input_dim)``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError, FormatError
from .rng import make_rng

ACTIVATIONS = ("tanh", "softplus")


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_dim: int
    hidden_dims: tuple[int, ...] = (256, 256, 256)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        if any(not isinstance(d, (int, np.integer)) or d < 1 for d in dims):
            raise ConfigError(f"all network dims must be positive integers, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            output_dim=int(d["output_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            activation=str(d["activation"]),
        )


@dataclass
class FieldParams:
    """Weights and biases of a network described by ``spec``."""

    spec: NetworkSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        shapes = self.spec.layer_dims
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise DimensionError(f"expected {len(shapes)} layers, got {len(self.weights)}")
        for i, (out, inp) in enumerate(shapes):
            if self.weights[i].shape != (out, inp) or self.biases[i].shape != (out,):
                raise DimensionError(
                    f"layer {i}: expected W{(out, inp)} b{(out,)}, "
                    f"got W{self.weights[i].shape} b{self.biases[i].shape}"
                )

    @property
    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> list[np.ndarray]:
        """Arrays in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, spec: NetworkSpec, flat: np.ndarray) -> "FieldParams":
        flat = np.asarray(flat, dtype=np.float64)
        weights, biases, pos = [], [], 0
        for out, inp in spec.layer_dims:
            weights.append(flat[pos : pos + out * inp].reshape(out, inp).copy())
            pos += out * inp
            biases.append(flat[pos : pos + out].copy())
            pos += out
        if pos != flat.size:
            raise DimensionError(f"flat vector has {flat.size} entries, spec needs {pos}")
        return cls(spec, weights, biases)

    def copy(self) -> "FieldParams":
        return FieldParams(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "FieldParams":
        return FieldParams(self.spec, [np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def equals(self, other: "FieldParams") -> bool:
        """Bit-exact equality of spec and every array."""
        return self.spec == other.spec and all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.arrays(), other.arrays())
        )


def init_network(spec: NetworkSpec, seed: int) -> FieldParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = make_rng(seed, "init")
    weights, biases = [], []
    for out, inp in spec.layer_dims:
        bound = 1.0 / np.sqrt(inp)
        weights.append(rng.uniform(-bound, bound, size=(out, inp)))
        biases.append(np.zeros(out))
    return FieldParams(spec, weights, biases)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return np.logaddexp(0.0, z)


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - h * h
    # d/dz softplus(z) = sigmoid(z)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ForwardCache:
    params: FieldParams
    single: bool
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activation of hidden layers


def forward(params: FieldParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.ndim != 2 or h.shape[1] != params.spec.input_dim:
        raise DimensionError(f"input shape {x.shape} does not match input_dim={params.spec.input_dim}")
    if not np.all(np.isfinite(h)):
        raise DimensionError("non-finite network input")
    cache = ForwardCache(params, single)
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ w.T + b
        if i < n_layers - 1:
            cache.pre.append(z)
            h = _act(params.spec.activation, z)
        else:
            h = z
    return (h[0] if single else h), cache


def apply(params: FieldParams, x: np.ndarray) -> np.ndarray:
    """Forward pass without keeping a cache."""
    return forward(params, x)[0]


def backward(params: FieldParams, cache: ForwardCache, output_grad: np.ndarray) -> tuple[FieldParams, np.ndarray]:
    """Gradients of ``sum(output * output_grad)`` w.r.t. params and input.

    For a batched forward the parameter gradient is summed over the batch.
    """
    if cache.params is not params or len(cache.inputs) != len(params.weights):
        raise DimensionError("cache was produced by a different network")
    g = np.asarray(output_grad, dtype=np.float64)
    g = g[None, :] if cache.single else g
    if g.shape != (cache.inputs[0].shape[0], params.spec.output_dim):
        raise DimensionError(f"output_grad shape {np.shape(output_grad)} does not match forward output")
    n_layers = len(params.weights)
    w_grads: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    b_grads: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in range(n_layers - 1, -1, -1):
        w_grads[i] = g.T @ cache.inputs[i]
        b_grads[i] = g.sum(axis=0)
        g = g @ params.weights[i]
        if i > 0:
            z = cache.pre[i - 1]
            g = g * _act_grad(params.spec.activation, z, cache.inputs[i])
    input_grad = g[0] if cache.single else g
    return FieldParams(params.spec, w_grads, b_grads), input_grad


def finite_difference_grad(
    params: FieldParams | np.ndarray,
    loss: Callable[[FieldParams | np.ndarray], float],
    h: float = 1e-4,
) -> FieldParams | np.ndarray:
    """Central-difference gradient of ``loss`` at ``params``, one entry at a time."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    is_net = isinstance(params, FieldParams)
    base = params.flat() if is_net else np.array(params, dtype=np.float64)
    shape = base.shape
    flat = base.ravel().copy()

    def rebuild(v):
        return FieldParams.from_flat(params.spec, v) if is_net else v.reshape(shape)

    grad = np.empty_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(loss(rebuild(flat)))
        flat[i] = old - h
        down = float(loss(rebuild(flat)))
        flat[i] = old
        if not (np.isfinite(up) and np.isfinite(down)):
            raise DivergenceError(f"non-finite loss at perturbed entry {i}")
        grad[i] = (up - down) / (2.0 * h)
    return FieldParams.from_flat(params.spec, grad) if is_net else grad.reshape(shape)


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Largest ``|a-b| / max(|a|, |b|, floor)`` over entries."""
    a, b = np.ravel(a), np.ravel(b)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


# --- Adam -------------------------------------------------------------------


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0
    hyper: AdamHyper = AdamHyper()

    @classmethod
    def for_params(cls, params: FieldParams | Sequence[np.ndarray], hyper: AdamHyper | None = None):
        arrays = params.arrays() if isinstance(params, FieldParams) else list(params)
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0, hyper or AdamHyper())


def adam_step(params, grads, state: OptimizerState):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    ``params``/``grads`` are both FieldParams or both lists of arrays.
    Non-finite gradients leave everything untouched and raise DivergenceError.
    """
    is_net = isinstance(params, FieldParams)
    p_arrays = params.arrays() if is_net else [np.asarray(p, dtype=np.float64) for p in params]
    g_arrays = grads.arrays() if isinstance(grads, FieldParams) else [np.asarray(g, dtype=np.float64) for g in grads]
    if len(p_arrays) != len(g_arrays) or len(p_arrays) != len(state.m):
        raise DimensionError("params, grads and optimizer state disagree in length")
    for p, g, m in zip(p_arrays, g_arrays, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
    if not all(np.all(np.isfinite(g)) for g in g_arrays):
        raise DivergenceError("non-finite gradient; step rejected")

    hp = state.hyper
    t = state.step_count + 1
    corr1 = 1.0 - hp.beta1**t
    corr2 = 1.0 - hp.beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m = hp.beta1 * m + (1.0 - hp.beta1) * g
        v = hp.beta2 * v + (1.0 - hp.beta2) * g * g
        new_p.append(p - hp.lr * (m / corr1) / (np.sqrt(v / corr2) + hp.eps))
        new_m.append(m)
        new_v.append(v)
    out_state = OptimizerState(new_m, new_v, t, hp)
    if is_net:
        n = len(params.weights)
        return FieldParams(params.spec, new_p[0::2][:n], new_p[1::2][:n]), out_state
    return new_p, out_state


# --- checkpoints ------------------------------------------------------------

MAGIC = b"GECOCKPT"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<8sII")  # magic, version, header length


def save_checkpoint(params: FieldParams, spec: NetworkSpec | None = None, metadata: dict | None = None) -> bytes:
    """Serialize to ``MAGIC | version | header_len | JSON header | float64 LE arrays``."""
    spec = spec or params.spec
    if spec != params.spec:
        raise DimensionError("spec does not describe these params")
    header = json.dumps(
        {
            "spec": spec.to_dict(),
            "shapes": [list(a.shape) for a in params.arrays()],
            "metadata": metadata or {},
        },
        sort_keys=True,
    ).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    return _HEAD.pack(MAGIC, FORMAT_VERSION, len(header)) + header + body


def load_checkpoint(data: bytes) -> tuple[FieldParams, NetworkSpec, dict]:
    if len(data) < _HEAD.size:
        raise FormatError("checkpoint truncated before header")
    magic, version, hlen = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = _HEAD.size
    if len(data) < start + hlen:
        raise FormatError("checkpoint truncated inside header")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
        spec = NetworkSpec.from_dict(header["spec"])
        shapes = [tuple(s) for s in header["shapes"]]
        metadata = header.get("metadata", {})
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}") from exc
    expected = []
    for out, inp in spec.layer_dims:
        expected += [(out, inp), (out,)]
    if shapes != expected:
        raise FormatError(f"array shapes {shapes} do not match spec {expected}")
    n_values = sum(int(np.prod(s)) for s in shapes)
    body = data[start + hlen :]
    if len(body) != 8 * n_values:
        raise FormatError(f"checkpoint body has {len(body)} bytes, expected {8 * n_values}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return FieldParams.from_flat(spec, flat), spec, metadata


def checkpoint_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
