"""Minimal dense neural-network engine on top of numpy.

Tensors record the operation that produced them; ``backward`` walks that
record in reverse topological order and accumulates gradients into the
``Parameter`` leaves.  Only what the recommender needs is here: dense
layers, ReLU/softmax/softplus, embedding lookups (dense and mean-pooled),
dropout, a handful of elementwise ops and an Adam optimizer.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError, NumericalError, UsageError

DTYPE = np.float64
ACTIVATIONS = ("relu", "identity", "softmax", "softplus")
DROPOUT_MODES = ("train", "mc_inference", "off")


class Tensor:
    """A value in the computation graph."""

    __slots__ = ("data", "grad", "_parents", "_grad_fn", "_consumed")

    def __init__(self, data, parents: tuple = (), grad_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self._parents = parents
        self._grad_fn = grad_fn
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Trainable leaf tensor; ``grad`` always exists and matches ``data``."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "param"):
        super().__init__(np.array(data, dtype=DTYPE, copy=True))
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Wrap ``x`` (or detach a tensor) so no gradient flows through it."""
    if isinstance(x, Tensor):
        x = x.data
    return Tensor(np.array(x, dtype=DTYPE, copy=True))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _node(data, parents, grad_fn) -> Tensor:
    return Tensor(data, tuple(parents), grad_fn)


# --------------------------------------------------------------------------
# Elementwise and structural ops
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a: Tensor) -> Tensor:
    return _node(a.data**2, (a,), lambda g: (2.0 * a.data * g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


_relu_probe: list | None = None


@contextmanager
def relu_margin_probe():
    """Collect min |pre-activation| of every ReLU evaluated inside the block.

    Finite-difference checks use it to avoid points next to a kink.
    """
    global _relu_probe
    outer, _relu_probe = _relu_probe, []
    try:
        yield _relu_probe
    finally:
        _relu_probe = outer


def relu(a: Tensor) -> Tensor:
    if _relu_probe is not None and a.data.size:
        _relu_probe.append(float(np.min(np.abs(a.data))))
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _node(out, (a,), lambda g: (g * sig,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _node(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    tot = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(tot)).squeeze(axis)
    w = e / tot
    return _node(out, (a,), lambda g: (np.expand_dims(g, axis) * w,))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axis), (a,), grad_fn)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn)


def index(a: Tensor, key) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, key, g)
        return (full,)

    return _node(a.data[key], (a,), grad_fn)


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------

def dense_forward(x, weights: Tensor, bias: Tensor, activation: str = "identity") -> Tensor:
    """``activation(x @ W + b)`` for a vector or a batch of row vectors.

    Weights are stored as (in_dim, out_dim).
    """
    x = as_tensor(x)
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    if x.shape[-1] != weights.shape[0]:
        raise ConfigError(
            f"dense input has {x.shape[-1]} features, weights expect {weights.shape[0]}"
        )
    squeeze = x.data.ndim == 1
    if squeeze:
        x = Tensor(x.data[None, :], (x,), lambda g: (g[0],))
    out = add(matmul(x, weights), bias)
    if activation == "relu":
        out = relu(out)
    elif activation == "softmax":
        out = softmax(out)
    elif activation == "softplus":
        out = softplus(out)
    if squeeze:
        inner = out
        out = _node(inner.data[0], (inner,), lambda g: (g[None, :],))
    return out


def embedding_lookup(table: Tensor, index_: np.ndarray | int, feature: str = "feature") -> Tensor:
    """Gather rows of ``table``; gradient accumulates only into the rows used."""
    idx = np.asarray(index_)
    if idx.dtype.kind not in "iu":
        raise DataError(f"{feature}: categorical ids must be integers")
    n_rows = table.shape[0]
    bad = (idx < 0) | (idx >= n_rows)
    if np.any(bad):
        raise DataError(
            f"{feature}: index {int(idx[bad].flat[0])} out of range [0, {n_rows})"
        )
    rows = table.shape

    def grad_fn(g):
        full = np.zeros(rows, dtype=DTYPE)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, rows[1]))
        return (full,)

    return _node(table.data[idx], (table,), grad_fn)


def pooled_embedding(table: Tensor, pool: sp.csr_matrix) -> Tensor:
    """Weighted sum of table rows, one output row per row of ``pool``.

    With ``pool`` holding 1/len(tokens) per token occurrence this is mean
    pooling over a bag of token ids.
    """
    if pool.shape[1] != table.shape[0]:
        raise ConfigError(
            f"pooling matrix has {pool.shape[1]} columns, table has {table.shape[0]} rows"
        )
    return _node(pool @ table.data, (table,), lambda g: (np.asarray(pool.T @ g),))


@dataclass
class ForwardTrace:
    """Dropout masks drawn during one forward pass, in draw order.

    Passing a trace built with ``replay=True`` makes every dropout call reuse
    the recorded masks instead of sampling new ones.
    """

    masks: list = field(default_factory=list)
    replaying: bool = False
    _cursor: int = 0

    def replay(self) -> "ForwardTrace":
        return ForwardTrace(masks=list(self.masks), replaying=True)

    def mask(self, shape: tuple, draw: Callable[[], np.ndarray]) -> np.ndarray:
        if self.replaying:
            if self._cursor >= len(self.masks):
                raise UsageError("trace replay ran out of recorded dropout masks")
            m = self.masks[self._cursor]
            self._cursor += 1
            if m.shape != shape:
                raise UsageError(f"replayed mask shape {m.shape} != {shape}")
            return m
        m = draw()
        self.masks.append(m)
        return m


def dropout(
    x: Tensor,
    rate: float,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    trace: ForwardTrace | None = None,
) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in DROPOUT_MODES:
        raise ConfigError(f"unknown dropout mode {mode!r}")
    if mode == "off" or rate == 0.0:
        return x
    if rng is None and (trace is None or not trace.replaying):
        raise UsageError("stochastic dropout needs an explicit rng")

    def draw():
        return (rng.random(x.shape) >= rate) / (1.0 - rate)

    m = trace.mask(x.shape, draw) if trace is not None else draw()
    return _node(x.data * m, (x,), lambda g: (g * m,))


# --------------------------------------------------------------------------
# Backward pass
# --------------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss: Tensor) -> list[Parameter]:
    """Accumulate d(loss)/d(param) into every reachable Parameter's ``grad``.

    Returns the parameters that were reached.  A loss can be
    differentiated only once; run a new forward pass to differentiate again.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise UsageError("backward called twice on the same forward pass")
    if loss._grad_fn is None and not isinstance(loss, Parameter):
        raise UsageError("loss is not connected to any forward trace")
    loss._consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    reached = []
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            reached.append(node)
            continue
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return reached


# --------------------------------------------------------------------------
# Parameter containers and optimizer
# --------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


class Dense:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str):
        if in_dim < 1 or out_dim < 1:
            raise ConfigError(f"{name}: layer sizes must be positive")
        self.weight = Parameter(glorot_uniform(rng, in_dim, out_dim), f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim), f"{name}.bias")

    def __call__(self, x, activation="identity") -> Tensor:
        return dense_forward(x, self.weight, self.bias, activation)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class Embedding:
    def __init__(self, n_rows: int, dim: int, rng: np.random.Generator, name: str, std=0.05):
        if n_rows < 1 or dim < 1:
            raise ConfigError(f"{name}: embedding needs positive rows and dim")
        self.name = name
        self.table = Parameter(rng.normal(0.0, std, size=(n_rows, dim)), f"{name}.table")

    def __call__(self, idx) -> Tensor:
        return embedding_lookup(self.table, idx, self.name)

    def pooled(self, pool: sp.csr_matrix) -> Tensor:
        return pooled_embedding(self.table, pool)

    def parameters(self) -> list[Parameter]:
        return [self.table]


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Adaptive-moment optimizer over a fixed list of parameters."""

    def __init__(self, params: Iterable[Parameter], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        if lr < 0:
            raise ConfigError("learning rate must be non-negative")
        self.state = OptimizerState(
            lr=lr,
            beta1=betas[0],
            beta2=betas[1],
            eps=eps,
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                bad = np.argwhere(~np.isfinite(p.grad))[0]
                raise NumericalError(
                    f"non-finite gradient in {p.name} at index {tuple(int(i) for i in bad)}"
                )
        st = self.state
        st.step += 1
        if st.lr == 0.0:
            return
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for p, m, v in zip(self.params, st.m, st.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


# --------------------------------------------------------------------------
# Finite-difference checking
# --------------------------------------------------------------------------

def numerical_gradient(f: Callable[[], float], param: Parameter, h_rel: float = 1e-4) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``param``.

    The step for entry x is ``h_rel * max(1, |x|)``.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        x0 = flat[i]
        h = h_rel * max(1.0, abs(x0))
        flat[i] = x0 + h
        fp = f()
        flat[i] = x0 - h
        fm = f()
        flat[i] = x0
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(
    loss_fn: Callable[[], Tensor], params: Sequence[Parameter], h_rel: float = 1e-4
) -> float:
    """Largest relative error between backprop and central differences."""
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for p in params:
        num = numerical_gradient(lambda: float(loss_fn().data), p, h_rel)
        worst = max(worst, relative_error(p.grad, num))
    return worst
