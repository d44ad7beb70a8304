"""Minimal differentiable MLP engine.

Dense feed-forward networks with Leaky-ReLU hidden units and a sigmoid or
linear head, reverse-mode gradients over a small fixed op set, and SGD with
momentum. Everything is numpy float64 on a single thread; the op set is
deliberately tiny because the objectives built on top of it are small,
static graphs (a few dozen array nodes), not general programs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_SIG_EPS = 1e-12  # keeps sigmoid outputs inside the open interval in float64


class ShapeError(ValueError):
    """Input shape incompatible with the declared architecture."""


class TapeStateError(RuntimeError):
    """Tape used before a forward pass populated it."""


# ---------------------------------------------------------------------------
# Architecture description and the flat parameter layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    """Shape of a dense network: input -> hidden_dims (Leaky-ReLU) -> output."""

    input_dim: int
    hidden_dims: tuple[int, ...] = (32, 16)
    output_dim: int = 1
    output_activation: str = "sigmoid"  # "sigmoid" or "linear"
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if len(self.hidden_dims) == 0 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden_dims must be a non-empty tuple of ints >= 1")
        if self.output_activation not in ("sigmoid", "linear"):
            raise ValueError(f"unknown output_activation {self.output_activation!r}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1


def layer_shapes(spec: MlpSpec) -> list[tuple[tuple[int, int], int]]:
    """[(W shape, b length)] per layer; weights act as x @ W + b."""
    dims = spec.layer_dims
    return [((dims[i], dims[i + 1]), dims[i + 1]) for i in range(spec.n_layers)]


def param_count(spec: MlpSpec) -> int:
    return sum(fi * fo + fo for (fi, fo), _ in layer_shapes(spec))


def param_slices(spec: MlpSpec):
    """Deterministic flat layout: per layer, W row-major then b.

    Yields (name, offset, shape) with names "w0", "b0", "w1", ...
    """
    out = []
    off = 0
    for layer, ((fi, fo), nb) in enumerate(layer_shapes(spec)):
        out.append((f"w{layer}", off, (fi, fo)))
        off += fi * fo
        out.append((f"b{layer}", off, (nb,)))
        off += nb
    return out

def flat_index(spec: MlpSpec, layer: int, kind: str, i: int, j: int = 0) -> int:
    """Map (layer, 'w', row, col) or (layer, 'b', i) to the flat position."""
    slices = {name: (off, shape) for name, off, shape in param_slices(spec)}
    if kind == "w":
        off, (fi, fo) = slices[f"w{layer}"]
        if not (0 <= i < fi and 0 <= j < fo):
            raise IndexError("weight index out of range")
        return off + i * fo + j
    if kind == "b":
        off, (nb,) = slices[f"b{layer}"]
        if not 0 <= i < nb:
            raise IndexError("bias index out of range")
        return off + i
    raise ValueError("kind must be 'w' or 'b'")


def unflatten(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Flat vector -> [(W, b)] views, in layout order."""
    params = np.asarray(params, dtype=float)
    if params.shape != (param_count(spec),):
        raise ShapeError(
            f"parameter vector has length {params.shape}, expected ({param_count(spec)},)")
    mats = {}
    for name, off, shape in param_slices(spec):
        mats[name] = params[off:off + int(np.prod(shape))].reshape(shape)
    return [(mats[f"w{l}"], mats[f"b{l}"]) for l in range(spec.n_layers)]


def flatten(spec: MlpSpec, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """[(W, b)] -> flat vector; inverse of unflatten."""
    flat = np.empty(param_count(spec))
    for layer, (W, b) in enumerate(layers):
        for name, arr in ((f"w{layer}", np.asarray(W)), (f"b{layer}", np.asarray(b))):
            off, shape = next((o, s) for n, o, s in param_slices(spec) if n == name)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            flat[off:off + arr.size] = arr.ravel()
    return flat


def init_params(spec: MlpSpec, seed: int) -> np.ndarray:
    """i.i.d. standard-normal parameter vector from a seeded generator."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal(param_count(spec))


def init_params_scaled(spec: MlpSpec, seed: int) -> np.ndarray:
    """Fan-in-scaled init: W ~ N(0, 2/fan_in) per hidden layer, N(0, 1/fan_in)
    for the head, zero biases. Keeps pre-activations O(1) where the plain
    N(0,1) draw saturates a sigmoid head."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(param_count(spec))
    n_layers = spec.n_layers
    for layer in range(n_layers):
        for name, off, shape in param_slices(spec):
            if name != f"w{layer}":
                continue
            fi, fo = shape
            gain = 1.0 if layer == n_layers - 1 else 2.0
            w = rng.standard_normal((fi, fo)) * np.sqrt(gain / fi)
            flat[off:off + fi * fo] = w.ravel()
    return flat


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------

class Tensor:
    """Graph node: a float64 array plus backward bookkeeping."""

    __slots__ = ("value", "grad", "_parents", "_bw", "const")

    def __init__(self, value, parents=(), bw: Callable | None = None, const: bool = False):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self._parents = parents
        self._bw = bw
        self.const = const

    @property
    def shape(self):
        return self.value.shape


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.const:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SIG_EPS, 1.0 - _SIG_EPS)


class NumpyOps:
    """Value-only backend; mirrors TapeOps so network math is written once."""

    @staticmethod
    def constant(x):
        return np.asarray(x, dtype=float)

    @staticmethod
    def matmul(a, b):
        return a @ b

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def sub(a, b):
        return a - b

    @staticmethod
    def scale(a, s: float):
        return a * s

    @staticmethod
    def leaky_relu(a, slope: float):
        return np.where(a >= 0.0, a, slope * a)

    @staticmethod
    def sigmoid(a):
        return _stable_sigmoid(np.asarray(a, dtype=float))


class TapeOps:
    """Graph-building backend: every op returns a Tensor wired for backward."""

    @staticmethod
    def constant(x):
        return Tensor(x, const=True)

    @staticmethod
    def matmul(a: Tensor, b: Tensor) -> Tensor:
        out = Tensor(a.value @ b.value, parents=(a, b))

        def bw():
            g = out.grad
            if not a.const:
                _acc(a, g @ b.value.T)
            if not b.const:
                _acc(b, a.value.T @ g)

        out._bw = bw
        return out

    @staticmethod
    def add(a: Tensor, b: Tensor) -> Tensor:
        out = Tensor(a.value + b.value, parents=(a, b))

        def bw():
            _acc(a, _unbroadcast(out.grad, a.value.shape))
            _acc(b, _unbroadcast(out.grad, b.value.shape))

        out._bw = bw
        return out

    @staticmethod
    def sub(a: Tensor, b: Tensor) -> Tensor:
        out = Tensor(a.value - b.value, parents=(a, b))

        def bw():
            _acc(a, _unbroadcast(out.grad, a.value.shape))
            _acc(b, _unbroadcast(-out.grad, b.value.shape))

        out._bw = bw
        return out

    @staticmethod
    def mul(a: Tensor, b: Tensor) -> Tensor:
        out = Tensor(a.value * b.value, parents=(a, b))

        def bw():
            _acc(a, _unbroadcast(out.grad * b.value, a.value.shape))
            _acc(b, _unbroadcast(out.grad * a.value, b.value.shape))

        out._bw = bw
        return out

    @staticmethod
    def div(a: Tensor, b: Tensor) -> Tensor:
        out = Tensor(a.value / b.value, parents=(a, b))

        def bw():
            _acc(a, _unbroadcast(out.grad / b.value, a.value.shape))
            _acc(b, _unbroadcast(-out.grad * a.value / (b.value * b.value), b.value.shape))

        out._bw = bw
        return out

    @staticmethod
    def scale(a: Tensor, s: float) -> Tensor:
        out = Tensor(a.value * s, parents=(a,))

        def bw():
            _acc(a, out.grad * s)

        out._bw = bw
        return out

    @staticmethod
    def leaky_relu(a: Tensor, slope: float) -> Tensor:
        mask = a.value >= 0.0
        out = Tensor(np.where(mask, a.value, slope * a.value), parents=(a,))

        def bw():
            _acc(a, out.grad * np.where(mask, 1.0, slope))

        out._bw = bw
        return out

    @staticmethod
    def sigmoid(a: Tensor) -> Tensor:
        s = _stable_sigmoid(a.value)
        out = Tensor(s, parents=(a,))

        def bw():
            _acc(a, out.grad * s * (1.0 - s))

        out._bw = bw
        return out

    @staticmethod
    def sqrt(a: Tensor) -> Tensor:
        v = np.sqrt(a.value)
        out = Tensor(v, parents=(a,))

        def bw():
            _acc(a, out.grad * 0.5 / v)

        out._bw = bw
        return out

    @staticmethod
    def gather(a: Tensor, idx: np.ndarray) -> Tensor:
        """Index a 1-D tensor with an arbitrary integer array; scatter-add back."""
        idx = np.asarray(idx, dtype=np.intp)
        out = Tensor(a.value[idx], parents=(a,))

        def bw():
            if a.const:
                return
            ga = np.zeros_like(a.value)
            np.add.at(ga, idx, out.grad)
            _acc(a, ga)

        out._bw = bw
        return out

    @staticmethod
    def reshape(a: Tensor, shape) -> Tensor:
        out = Tensor(a.value.reshape(shape), parents=(a,))

        def bw():
            _acc(a, out.grad.reshape(a.value.shape))

        out._bw = bw
        return out

    @staticmethod
    def mean(a: Tensor) -> Tensor:
        out = Tensor(a.value.mean(), parents=(a,))

        def bw():
            _acc(a, np.full_like(a.value, float(out.grad) / a.value.size))

        out._bw = bw
        return out

    @staticmethod
    def segment_mean(a: Tensor, bounds: np.ndarray) -> Tensor:
        """Per-segment mean of a 1-D tensor; bounds is (S+1,) offsets."""
        bounds = np.asarray(bounds, dtype=np.intp)
        counts = np.diff(bounds).astype(float)
        sums = np.add.reduceat(a.value, bounds[:-1])
        out = Tensor(sums / counts, parents=(a,))

        def bw():
            _acc(a, np.repeat(out.grad / counts, np.diff(bounds)))

        out._bw = bw
        return out

    @staticmethod
    def segment_var(a: Tensor, bounds: np.ndarray) -> Tensor:
        """Per-segment population variance of a 1-D tensor."""
        bounds = np.asarray(bounds, dtype=np.intp)
        reps = np.diff(bounds)
        counts = reps.astype(float)
        mu = np.add.reduceat(a.value, bounds[:-1]) / counts
        centered = a.value - np.repeat(mu, reps)
        out = Tensor(np.add.reduceat(centered * centered, bounds[:-1]) / counts,
                     parents=(a,))

        def bw():
            _acc(a, 2.0 * centered * np.repeat(out.grad / counts, reps))

        out._bw = bw
        return out


def mlp_apply(ops, x, weights, spec: MlpSpec):
    """Forward pass written once over either backend.

    x: (batch, input_dim) array or Tensor; weights: [(W, b)] of the same kind.
    """
    h = x
    for W, b in weights[:-1]:
        h = ops.leaky_relu(ops.add(ops.matmul(h, W), b), spec.leaky_slope)
    W, b = weights[-1]
    out = ops.add(ops.matmul(h, W), b)
    if spec.output_activation == "sigmoid":
        out = ops.sigmoid(out)
    return out


def mlp_forward_np(spec: MlpSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Plain-numpy batched forward: X (batch, input_dim) -> (batch, output_dim)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(f"input has shape {X.shape}, expected (*, {spec.input_dim})")
    return mlp_apply(NumpyOps, X, unflatten(spec, params), spec)


# ---------------------------------------------------------------------------
# GradientTape: ties a scalar/vector output back to a flat parameter vector
# ---------------------------------------------------------------------------

class GradientTape:
    """Records parameter leaves and the output node of one forward pass."""

    def __init__(self, n_params: int):
        self.n_params = n_params
        self._leaves: list[tuple[int, Tensor]] = []
        self.output: Tensor | None = None

    def add_leaf(self, offset: int, tensor: Tensor) -> None:
        self._leaves.append((offset, tensor))

    def attach_mlp(self, params: np.ndarray, spec: MlpSpec, offset: int = 0):
        """Create leaf tensors viewing the flat vector; returns [(W, b)]."""
        params = np.asarray(params, dtype=float)
        leaves = {}
        for name, off, shape in param_slices(spec):
            t = Tensor(params[offset + off: offset + off + int(np.prod(shape))]
                       .reshape(shape))
            self.add_leaf(offset + off, t)
            leaves[name] = t
        return [(leaves[f"w{l}"], leaves[f"b{l}"]) for l in range(spec.n_layers)]

    def gradient(self) -> np.ndarray:
        flat = np.zeros(self.n_params)
        for off, leaf in self._leaves:
            if leaf.grad is not None:
                flat[off:off + leaf.value.size] = leaf.grad.ravel()
        return flat


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(tape: GradientTape, upstream) -> np.ndarray:
    """Reverse traversal: d(upstream . output)/d(params), flat.

    upstream must broadcast against the tape's output (1.0 for scalars).
    """
    if tape.output is None:
        raise TapeStateError("backward called before a forward pass populated the tape")
    out = tape.output
    up = np.broadcast_to(np.asarray(upstream, dtype=float), out.value.shape)
    order = _toposort(out)
    for node in order:
        node.grad = None
    out.grad = np.array(up, dtype=float)
    for node in reversed(order):
        if node._bw is not None and node.grad is not None:
            node._bw()
    return tape.gradient()


def forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, GradientTape]:
    """Single-input forward pass; returns (y, tape) with y of shape (output_dim,)."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape != (spec.input_dim,):
        raise ShapeError(f"input has shape {x.shape}, expected ({spec.input_dim},)")
    tape = GradientTape(param_count(spec))
    weights = tape.attach_mlp(params, spec)
    xt = TapeOps.constant(x.reshape(1, -1))
    out = TapeOps.reshape(mlp_apply(TapeOps, xt, weights, spec), (spec.output_dim,))
    tape.output = out
    return out.value.copy(), tape


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def sgd_step(params: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float, nesterov: bool = False
             ) -> tuple[np.ndarray, np.ndarray]:
    """Momentum SGD: v <- momentum*v + grad; params <- params - lr*v.

    With nesterov=True, the step uses grad + momentum*v instead of v.
    """
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    velocity = np.asarray(velocity, dtype=float)
    if not (params.shape == grad.shape == velocity.shape):
        raise ShapeError("params, grad, and velocity must have equal shapes")
    v = momentum * velocity + grad
    step = grad + momentum * v if nesterov else v
    return params - lr * step, v


# ---------------------------------------------------------------------------
# Parameter file: one header line, then one float per line in layout order
# ---------------------------------------------------------------------------

def format_spec_header(spec: MlpSpec, name: str = "mlp") -> str:
    dims = " ".join(str(d) for d in spec.layer_dims)
    return f"{name} {dims} {spec.output_activation} {spec.leaky_slope:.17g}"


def parse_spec_header(line: str) -> MlpSpec:
    parts = line.split()
    if len(parts) < 5 or parts[0] != "mlp":
        raise ValueError(f"malformed architecture header: {line!r}")
    dims = [int(p) for p in parts[1:-2]]
    return MlpSpec(input_dim=dims[0], hidden_dims=tuple(dims[1:-1]),
                   output_dim=dims[-1], output_activation=parts[-2],
                   leaky_slope=float(parts[-1]))


def save_mlp_params(path, spec: MlpSpec, params: np.ndarray) -> None:
    params = np.asarray(params, dtype=float)
    if params.shape != (param_count(spec),):
        raise ShapeError("parameter vector length does not match the spec")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_spec_header(spec) + "\n")
        for v in params:
            fh.write(f"{v:.17g}\n")


def load_mlp_params(path) -> tuple[MlpSpec, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    spec = parse_spec_header(lines[0])
    params = np.array([float(v) for v in lines[1:]])
    if params.shape != (param_count(spec),):
        raise ShapeError("parameter file length does not match its header")
    return spec, params
