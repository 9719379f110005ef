"""Small reverse-mode autodiff over float64 numpy arrays of rank <= 2.

Only the operators the message-passing networks and their losses need are
provided. Graph construction is eager; ``Tensor.backward`` walks the record in
reverse topological order.
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels

__all__ = [
    "Tensor",
    "tensor",
    "matmul",
    "relu",
    "gelu",
    "tanh_gelu",
    "abs_",
    "sum_",
    "mean",
    "gather",
    "segment_sum",
    "concat",
    "stencil",
    "Mlp",
    "Adam",
    "adam_step",
    "l1_penalty",
]


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 2:
            raise ValueError(f"rank must be <= 2, got shape {self.data.shape}")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _acc(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._acc(np.ones_like(self.data) if grad is None else grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    node.grad = None  # interior gradients are not kept

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        out_data = self.data + other.data

        def back(g):
            if self.requires_grad:
                self._acc(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._acc(_unbroadcast(g, other.data.shape))

        return _make(out_data, (self, other), back)

    __radd__ = __add__

    def __neg__(self):
        def back(g):
            self._acc(-g)

        return _make(-self.data, (self,), back)

    def __sub__(self, other):
        other = _as_tensor(other)
        out_data = self.data - other.data

        def back(g):
            if self.requires_grad:
                self._acc(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._acc(_unbroadcast(-g, other.data.shape))

        return _make(out_data, (self, other), back)

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        out_data = self.data * other.data

        def back(g):
            if self.requires_grad:
                self._acc(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._acc(_unbroadcast(g * self.data, other.data.shape))

        return _make(out_data, (self, other), back)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, cols):
        """Column selection ``x[:, j]`` / ``x[:, a:b]`` on rank-2 tensors."""
        idx = cols
        out_data = self.data[idx]

        def back(g):
            full = np.zeros_like(self.data)
            full[idx] = g
            self._acc(full)

        return _make(out_data, (self,), back)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, back):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, needs, parents if needs else (), back if needs else None)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def back(g):
        if a.requires_grad:
            a._acc(g @ b.data.T)
        if b.requires_grad:
            b._acc(a.data.T @ g)

    return _make(out, (a, b), back)


def relu(x):
    mask = x.data > 0

    def back(g):
        x._acc(g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def tanh_gelu(z):
    """GeLU, tanh approximation."""
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z ** 3)))


def gelu(x):
    z = x.data
    u = _GELU_C * (z + 0.044715 * z ** 3)
    t = np.tanh(u)
    out = 0.5 * z * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * z ** 2)
        x._acc(g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du))

    return _make(out, (x,), back)


def abs_(x):
    """|x| with derivative sign(x), defined as 0 at 0."""
    def back(g):
        x._acc(g * np.sign(x.data))

    return _make(np.abs(x.data), (x,), back)


def sum_(x, axis=None):
    out = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            x._acc(np.broadcast_to(g, x.data.shape))
        else:
            x._acc(np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _make(out, (x,), back)


def mean(x, axis=None):
    n = x.data.size if axis is None else x.data.shape[axis]
    return sum_(x, axis) * (1.0 / n)


def gather(x, index):
    """Rows ``x[index]``; gradient scatters back with :func:`kernels.segment_sum`."""
    index = np.asarray(index, dtype=np.int64)
    n = x.data.shape[0]

    def back(g):
        x._acc(kernels.segment_sum(g, index, n))

    return _make(x.data[index], (x,), back)


def segment_sum(x, segment_ids, n):
    """Sum rows of ``x`` into ``n`` segments (message aggregation)."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)

    def back(g):
        x._acc(g[segment_ids])

    return _make(kernels.segment_sum(x.data, segment_ids, n), (x,), back)


def concat(parts, axis=1):
    parts = [_as_tensor(p) for p in parts]
    datas = [p.data if p.data.ndim == 2 else p.data[:, None] for p in parts]
    out = np.concatenate(datas, axis=axis)
    widths = [d.shape[axis] for d in datas]
    bounds = np.cumsum([0] + widths)

    def back(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                piece = g[:, lo:hi] if axis == 1 else g[lo:hi]
                p._acc(piece.reshape(p.data.shape))

    return _make(out, tuple(parts), back)


def stencil(x, receivers, senders, weights, ghost):
    """Differentiable ``out[r] = sum_k w_k (x_{s_k} - x_r)`` on a 1-D node vector."""
    n = x.data.shape[0]
    receivers = np.asarray(receivers, dtype=np.int64)
    senders = np.asarray(senders, dtype=np.int64)
    out = kernels.stencil_sum(x.data, receivers, senders, weights, ghost, n)
    inner = senders >= 0

    def back(g):
        wg = weights * g[receivers]
        gx = -kernels.segment_sum(wg, receivers, n)
        gx += kernels.segment_sum(wg[inner], senders[inner], n)
        x._acc(gx)

    return _make(out, (x,), back)


# ------------------------------------------------------------------- networks

GATE_GAIN = math.sqrt(3.0)


class Mlp:
    """Plain (affine/ReLU) or gated MLP with ``m`` layers of width ``d``.

    A gated layer computes ``W_f (GeLU(W_l x + b_l) * (W_r x + b_r)) + b_f``.
    Weights are stored as ``(out, in)`` matrices and applied to row batches.
    """

    def __init__(self, n_in, n_out, m=2, d=32, variant="plain", rng=None, zero=False):
        if m < 1:
            raise ValueError("m must be >= 1")
        if variant not in ("plain", "gated"):
            raise ValueError(f"unknown MLP variant {variant!r}")
        self.n_in, self.n_out, self.m, self.d, self.variant = n_in, n_out, m, d, variant
        rng = np.random.default_rng(0) if rng is None else rng
        dims = [n_in] + [d] * (m - 1) + [n_out]
        self.layers: list[dict[str, Tensor]] = []

        def init(shape, fan_in, gain=1.0):
            if zero:
                return Tensor(np.zeros(shape), requires_grad=True)
            bound = gain / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        for a, b in zip(dims[:-1], dims[1:]):
            if variant == "plain":
                self.layers.append({"W": init((b, a), a), "b": init((b,), a)})
            else:
                # unit-variance gate inputs: with the default bound the
                # product shrinks the signal quadratically per layer
                self.layers.append({
                    "W_l": init((d, a), a, GATE_GAIN), "b_l": init((d,), a),
                    "W_r": init((d, a), a, GATE_GAIN), "b_r": init((d,), a),
                    "W_f": init((b, d), d), "b_f": init((b,), d),
                })

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer.values()]

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for k, t in layer.items():
                yield f"{i}.{k}", t

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.n_in:
            raise ValueError(f"expected input of width {self.n_in}, got shape {x.data.shape}")
        last = len(self.layers) - 1
        for i, p in enumerate(self.layers):
            if self.variant == "plain":
                x = matmul(x, _T(p["W"])) + p["b"]
                if i < last:
                    x = relu(x)
            else:
                left = gelu(matmul(x, _T(p["W_l"])) + p["b_l"])
                right = matmul(x, _T(p["W_r"])) + p["b_r"]
                x = matmul(left * right, _T(p["W_f"])) + p["b_f"]
        return x

    def forward_numpy(self, x: np.ndarray) -> np.ndarray:
        """Forward pass without recording, for probes and evaluation."""
        last = len(self.layers) - 1
        for i, p in enumerate(self.layers):
            if self.variant == "plain":
                x = x @ p["W"].data.T + p["b"].data
                if i < last:
                    x = np.maximum(x, 0.0)
            else:
                left = tanh_gelu(x @ p["W_l"].data.T + p["b_l"].data)
                right = x @ p["W_r"].data.T + p["b_r"].data
                x = (left * right) @ p["W_f"].data.T + p["b_f"].data
        return x

    def to_dict(self) -> dict:
        return {
            "n_in": self.n_in, "n_out": self.n_out, "m": self.m, "d": self.d,
            "variant": self.variant,
            "layers": [{k: t.data.tolist() for k, t in layer.items()} for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, doc) -> "Mlp":
        mlp = cls(doc["n_in"], doc["n_out"], doc["m"], doc["d"], doc["variant"], zero=True)
        for layer, saved in zip(mlp.layers, doc["layers"]):
            for k, t in layer.items():
                arr = np.array(saved[k], dtype=np.float64)
                if arr.shape != t.data.shape:
                    raise ValueError(f"parameter {k}: shape {arr.shape} != {t.data.shape}")
                t.data = arr
        return mlp


def _T(w: Tensor) -> Tensor:
    def back(g):
        w._acc(g.T)

    return _make(w.data.T, (w,), back)


# ----------------------------------------------------------------- optimizer

def l1_penalty(params, eta=1.0) -> Tensor:
    """``eta * sum |w|`` over every weight and bias."""
    total = None
    for p in params:
        term = sum_(abs_(p))
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total * eta


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        adam_step(self, self.params, grads)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self):
        return {"t": self.t, "lr": self.lr, "m": [a.tolist() for a in self.m],
                "v": [a.tolist() for a in self.v]}


def adam_step(state: Adam, params, grads):
    """One Adam update of ``params`` (in place) from ``grads``; returns ``params``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
