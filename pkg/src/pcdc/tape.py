"""Reverse-mode automatic differentiation over float64 numpy arrays.

The codec trains a fixed set of dense kernels, so this stays deliberately
small: a Tensor wrapper records parents and a backward closure per op, and
backward() replays the graph in reverse topological order. Everything is
float64 and single-threaded per graph, which keeps runs bit-reproducible for
a given seed and platform.

Gradient support exists only for the ops the codec needs; adding an op means
writing its closed-form backward here and covering it with a finite
difference check in the tests.
"""

from __future__ import annotations

import threading

import numpy as np

_STATE = threading.local()


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


class no_grad:
    """Context manager that disables graph recording on this thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _STATE.enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Sum gradient over axes that were added or stretched by broadcasting.
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate gradients of this node into every reachable leaf."""
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, contrib in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or contrib is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# -- arithmetic --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(data, (a, b), backward)


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    data = 1.0 / a.data

    def backward(g):
        return (-g * data * data,)

    return _node(data, (a,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T (+ b) with w shaped (out, in); x may have leading axes."""
    x, w = as_tensor(x), as_tensor(w)
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    y2 = x2 @ w.data.T
    if b is not None:
        y2 = y2 + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.data.shape[0])
        gx = (g2 @ w.data).reshape(x.data.shape)
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(y2.reshape(lead + (w.data.shape[0],)), parents, backward)


# -- elementwise nonlinearities ----------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0

    def backward(g):
        return (g * mask,)

    return _node(a.data * mask, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # Split by sign to avoid overflow in exp.
    d = a.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _node(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g / a.data,)

    return _node(np.log(a.data), (a,), backward)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)

    def backward(g):
        return (g * sgn,)

    return _node(np.abs(a.data), (a,), backward)


def clip(a, lo=None, hi=None) -> Tensor:
    """Clamp; gradient passes only where the input was strictly inside."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi

    def backward(g):
        return (g * inside,)

    return _node(out, (a,), backward)


# -- reductions and shape ----------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _node(data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _node(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tuple(tensors), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        out = np.zeros_like(a.data)
        out[sl] = g
        return (out,)

    return _node(a.data[sl].copy(), (a,), backward)


def gather_rows(a, idx) -> Tensor:
    """a[idx] along axis 0; idx is an integer array of any shape."""
    a = as_tensor(a)
    idx = np.asarray(idx)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), backward)


def segment_mean(a, starts, counts) -> Tensor:
    """Mean over contiguous row segments of a 2D tensor.

    starts[i] is the first row of segment i, counts[i] its length; segments
    must tile axis 0 in order.
    """
    a = as_tensor(a)
    starts = np.asarray(starts, dtype=np.intp)
    counts = np.asarray(counts, dtype=np.float64)
    sums = np.add.reduceat(a.data, starts, axis=0)
    data = sums / counts[:, None]

    def backward(g):
        per_row = g / counts[:, None]
        return (np.repeat(per_row, counts.astype(np.intp), axis=0),)

    return _node(data, (a,), backward)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.data.shape[-1]

    def backward(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = (gg - m1 - xhat * m2) * inv
        axes = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _node(out, (x, gamma, beta), backward)


def laplace_box(y, mu, sigma, pmin: float) -> Tensor:
    """P(n - 1/2 < Y <= n + 1/2) for Laplace(mu, sigma), floored at pmin.

    y holds the (possibly noisy) symbol values. The floor keeps every symbol
    codable; gradient is zero where the floor is active.
    """
    y, mu, sigma = as_tensor(y), as_tensor(mu), as_tensor(sigma)
    delta = y.data - mu.data
    b = (delta + 0.5) / sigma.data
    a = (delta - 0.5) / sigma.data

    def cdf(u):
        return np.where(u < 0, 0.5 * np.exp(np.minimum(u, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(u, 0.0)))

    p_raw = cdf(b) - cdf(a)
    out = np.maximum(p_raw, pmin)
    live = p_raw > pmin
    dens_b = 0.5 * np.exp(-np.abs(b))
    dens_a = 0.5 * np.exp(-np.abs(a))

    def backward(g):
        gm = g * live
        d_delta = gm * (dens_b - dens_a) / sigma.data
        d_sigma = -gm * (dens_b * b - dens_a * a) / sigma.data
        return (
            _unbroadcast(d_delta, y.data.shape),
            _unbroadcast(-d_delta, mu.data.shape),
            _unbroadcast(d_sigma, sigma.data.shape),
        )

    return _node(out, (y, mu, sigma), backward)
