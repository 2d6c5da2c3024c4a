"""A small reverse-mode automatic differentiation engine over numpy arrays.

Each op builds a :class:`Tensor` that remembers its parents and a closure
that pushes the output gradient back to them. ``Tensor.backward`` walks the
graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "name")

    def __init__(self, data, parents=(), backward=None, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}{', ' + self.name if self.name else ''})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def _accumulate(self, g):
        # grads are never updated in place, so sharing arrays is safe
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None):
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

    return Tensor(a.data @ b.data, (a, b), backward)


def sigmoid(x) -> Tensor:
    x = _lift(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return Tensor(out, (x,), backward)


def tanh(x) -> Tensor:
    x = _lift(x)
    out = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - out * out))

    return Tensor(out, (x,), backward)


def relu(x) -> Tensor:
    x = _lift(x)
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return Tensor(x.data * mask, (x,), backward)


def getitem(x, key) -> Tensor:
    x = _lift(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g) if _fancy(key) else full.__setitem__(key, g)
        x._accumulate(full)

    return Tensor(x.data[key], (x,), backward)


def _fancy(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def reshape(x, shape) -> Tensor:
    x = _lift(x)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return Tensor(x.data.reshape(shape), (x,), backward)


def conv1d(x, w, b) -> Tensor:
    """Valid, stride-1 convolution. ``x`` is (batch, time, in), ``w`` is
    (kernel, in, out), ``b`` is (out,); result is (batch, time-kernel+1, out)."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    if x.data.ndim != 3 or w.data.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d shapes {x.shape} and {w.shape} do not align")
    k = w.shape[0]
    t_out = x.shape[1] - k + 1
    if t_out < 1:
        raise ShapeError(f"sequence of length {x.shape[1]} shorter than kernel {k}")
    out = np.broadcast_to(b.data, (x.shape[0], t_out, w.shape[2])).copy()
    for j in range(k):
        out += x.data[:, j:j + t_out, :] @ w.data[j]

    def backward(g):
        gx = np.zeros_like(x.data)
        gw = np.empty_like(w.data)
        flat_g = g.reshape(-1, g.shape[-1])
        for j in range(k):
            gx[:, j:j + t_out, :] += g @ w.data[j].T
            gw[j] = x.data[:, j:j + t_out, :].reshape(-1, x.shape[2]).T @ flat_g
        x._accumulate(gx)
        w._accumulate(gw)
        b._accumulate(flat_g.sum(axis=0))

    return Tensor(out, (x, w, b), backward)


def max_over_time(x) -> Tensor:
    """Global max pooling over axis 1 of a (batch, time, channels) tensor.
    The gradient goes to the first maximal position."""
    x = _lift(x)
    arg = np.argmax(x.data, axis=1)
    bi, ci = np.meshgrid(np.arange(x.shape[0]), np.arange(x.shape[2]), indexing="ij")

    def backward(g):
        full = np.zeros_like(x.data)
        full[bi, arg, ci] = g
        x._accumulate(full)

    return Tensor(x.data[bi, arg, ci], (x,), backward)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    x = _lift(x)
    if not training or rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        x._accumulate(g * mask)

    return Tensor(x.data * mask, (x,), backward)


def weighted_bce(p, y: np.ndarray, w: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Mean of ``-w * [y ln p + (1-y) ln(1-p)]`` with ``p`` clipped to [eps, 1-eps]."""
    p = _lift(p)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if p.data.shape != y.shape or y.shape != w.shape:
        raise ShapeError(f"bce shapes differ: p{p.shape} y{y.shape} w{w.shape}")
    n = y.size
    pc = np.clip(p.data, eps, 1.0 - eps)
    loss = -np.sum(w * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))) / n
    inside = (p.data > eps) & (p.data < 1.0 - eps)

    def backward(g):
        d = -w * (y / pc - (1.0 - y) / (1.0 - pc)) / n
        p._accumulate(g * d * inside)

    return Tensor(loss, (p,), backward)


def lstm_sequence(x, wx, wh, b) -> Tensor:
    """Run an LSTM over (batch, time, in) and return the final hidden state.

    Fused forward pass with a hand-written backpropagation-through-time
    rule; numerically equal to chaining the per-step cell.
    """
    x, wx, wh, b = _lift(x), _lift(wx), _lift(wh), _lift(b)
    if x.data.ndim != 3 or x.shape[2] != wx.shape[0] or wh.shape[1] != wx.shape[1]:
        raise ShapeError(f"lstm shapes x{x.shape} wx{wx.shape} wh{wh.shape} do not align")
    batch, steps, _ = x.shape
    n = wh.shape[0]
    xw = x.data @ wx.data + b.data
    h = np.zeros((batch, n))
    c = np.zeros((batch, n))
    cache = []
    for t in range(steps):
        z = xw[:, t, :] + h @ wh.data
        # input, forget, output gates share one sigmoid call
        s = 0.5 * (1.0 + np.tanh(0.5 * z[:, :3 * n]))
        g = np.tanh(z[:, 3 * n:])
        c_prev, h_prev = c, h
        c = s[:, n:2 * n] * c_prev + s[:, :n] * g
        tc = np.tanh(c)
        h = s[:, 2 * n:] * tc
        cache.append((s, g, c_prev, h_prev, tc))

    def backward(gh):
        gz = np.empty((batch, steps, 4 * n))
        gwh = np.zeros_like(wh.data)
        dh = gh
        dc = 0.0
        for t in range(steps - 1, -1, -1):
            s, g, c_prev, h_prev, tc = cache[t]
            i, f, o = s[:, :n], s[:, n:2 * n], s[:, 2 * n:]
            dct = dc + dh * o * (1.0 - tc * tc)
            dz = gz[:, t, :]
            dz[:, :n] = dct * g
            dz[:, n:2 * n] = dct * c_prev
            dz[:, 2 * n:3 * n] = dh * tc
            dz[:, :3 * n] *= s * (1.0 - s)
            dz[:, 3 * n:] = dct * i * (1.0 - g * g)
            gwh += h_prev.T @ dz
            dh = dz @ wh.data.T
            dc = dct * f
        flat = gz.reshape(-1, 4 * n)
        x._accumulate(gz @ wx.data.T)
        wx._accumulate(x.data.reshape(-1, x.shape[2]).T @ flat)
        wh._accumulate(gwh)
        b._accumulate(flat.sum(axis=0))

    return Tensor(h, (x, wx, wh, b), backward)
