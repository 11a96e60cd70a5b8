"""Reverse-mode differentiation over float64 numpy arrays.

Everything trainable in the package runs on this: a small tape-free graph of
``Tensor`` nodes, a named parameter store, Adam, and a seeded random stream
whose output does not depend on numpy's distribution code.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
LEAKY_SLOPE = 0.01


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or Inf."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __truediv__ = lambda self, o: mul(self, 1.0 / o) if not isinstance(o, Tensor) else div(self, o)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- primitives -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _node(a.data - b.data, (a, b), backward, "sub")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _node(out, (a, b), backward, "div")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward, "concat")


def slice_last(x, start, stop):
    """``x[..., start:stop]``."""
    def backward(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _node(x.data[..., start:stop], (x,), backward, "slice")


def split(x, index):
    """Split the last axis at ``index``."""
    return slice_last(x, 0, index), slice_last(x, index, x.shape[-1])


def take(x, idx):
    """Gather along the last axis with a fixed index array."""
    idx = np.asarray(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (Ellipsis, idx), g)
        return (full,)

    return _node(x.data[..., idx], (x,), backward, "take")


def tanh(x):
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x):
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def softplus(x):
    out = np.logaddexp(0.0, x.data)
    return _node(out, (x,), lambda g: (g * np.exp(x.data - out),), "softplus")


def leaky_relu(x, slope=LEAKY_SLOPE):
    dmask = (x.data > 0) * (1.0 - slope) + slope
    return _node(np.maximum(x.data, slope * x.data), (x,),
                 lambda g: (g * dmask,), "leaky_relu")


def sum(x, axis=None):  # noqa: A001 - mirrors numpy
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def square(x):
    return mul(x, x)


def sqrt(x, eps=1e-12):
    return exp(mul(log(add(x, eps)), 0.5))


def sigmoid(x):
    return exp(neg(softplus(neg(x))))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order, seen = [], set()
    stack = [(loss, False)]
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

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- parameters and optimisation -------------------------------------------

class ParamStore:
    """Ordered, uniquely named trainable tensors.

    ``pack()`` moves every value and gradient into one contiguous buffer (the
    tensors keep views into it) so optimiser updates are single array ops.
    """

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.frozen = False
        self.flat_values = None
        self.flat_grads = None

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if self.flat_values is not None:
            raise RuntimeError("cannot add parameters to a packed store")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def n_values(self) -> int:
        return int(np.sum([t.data.size for t in self._params.values()]))

    def pack(self):
        if self.flat_values is not None:
            return
        n = self.n_values()
        values, grads = np.empty(n), np.zeros(n)
        offset = 0
        for t in self._params.values():
            size = t.data.size
            values[offset:offset + size] = t.data.reshape(-1)
            if t.grad is not None:
                grads[offset:offset + size] = t.grad.reshape(-1)
            t.data = values[offset:offset + size].reshape(t.data.shape)
            t.grad = grads[offset:offset + size].reshape(t.data.shape)
            offset += size
        self.flat_values, self.flat_grads = values, grads

    def zero_grad(self):
        if self.flat_grads is not None:
            self.flat_grads[...] = 0.0
            return
        for t in self._params.values():
            if t.grad is not None:
                t.grad[...] = 0.0

    def set(self, name, value):
        t = self._params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != t.data.shape:
            raise ValueError(f"shape mismatch for {name!r}: {value.shape} != {t.data.shape}")
        t.data[...] = value

    def freeze(self):
        """Detach from optimisation: no gradients, read-only values."""
        for t in self._params.values():
            t.requires_grad = False
            t.grad = None
            t.data.flags.writeable = False
        if self.flat_values is not None:
            self.flat_values.flags.writeable = False
            self.flat_grads = None
        self.frozen = True

    def snapshot(self) -> dict:
        return {k: t.data.copy() for k, t in self._params.items()}


@dataclass
class AdamState:
    """Adam moments live in flat buffers aligned with the packed store."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    s: np.ndarray | None = None

    def moments(self, store: ParamStore, name: str):
        """Per-parameter views ``(m, s)``."""
        offset = 0
        for key, p in store.items():
            size = p.data.size
            if key == name:
                sl = slice(offset, offset + size)
                return self.m[sl].reshape(p.shape), self.s[sl].reshape(p.shape)
            offset += size
        raise KeyError(name)


def adam_step(state: AdamState, store: ParamStore) -> None:
    if store.frozen:
        raise RuntimeError("store is frozen")
    store.pack()
    g = store.flat_grads
    if not np.isfinite(g).all():
        bad = next(n for n, p in store.items() if not np.isfinite(p.grad).all())
        raise NonFiniteError(f"non-finite gradient for parameter {bad!r}")
    if state.m is None:
        state.m = np.zeros_like(g)
        state.s = np.zeros_like(g)
    elif state.m.shape != g.shape:
        raise ValueError("optimizer state does not match the parameter store")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    m, s = state.m, state.s
    tmp = np.multiply(g, 1.0 - state.beta1)
    m *= state.beta1
    m += tmp
    np.multiply(g, g, out=tmp)
    tmp *= 1.0 - state.beta2
    s *= state.beta2
    s += tmp
    # tmp <- lr * (m / c1) / (sqrt(s / c2) + eps)
    np.multiply(s, 1.0 / c2, out=tmp)
    np.sqrt(tmp, out=tmp)
    tmp += state.eps
    np.divide(m, tmp, out=tmp)
    tmp *= state.lr / c1
    store.flat_values -= tmp
    g[...] = 0.0


def grad_check(f, store: ParamStore, step: float = 1e-5, names=None) -> dict:
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` takes no arguments and returns a scalar Tensor built from the
    values in ``store``.  The error for a parameter is
    ``|a - n| / max(|a|, |n|, 1e-8)`` with Euclidean norms over its entries.
    Returns ``{"per_param": {name: rel_err}, "max_rel_err": float}``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    store.zero_grad()
    loss = f()
    if not np.isfinite(loss.data):
        raise NonFiniteError("objective is non-finite at the base point")
    backward(loss)
    names = store.names() if names is None else list(names)
    per_param = {}
    with no_grad():
        for name in names:
            p = store[name]
            analytic = p.grad.copy()
            flat = p.data.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteError(f"objective non-finite while probing {name!r}[{i}]")
                numeric[i] = (fp - fm) / (2.0 * step)
            a = analytic.reshape(-1)
            # norms over the whole parameter: isolated near-zero entries would
            # otherwise measure only the finite-difference round-off
            denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-8)
            per_param[name] = float(np.linalg.norm(a - numeric) / denom) if a.size else 0.0
    store.zero_grad()
    return {"per_param": per_param, "max_rel_err": max(per_param.values(), default=0.0)}


# -- random numbers ---------------------------------------------------------

_U53 = 2.0 ** -53


class Rng:
    """Seeded stream of uniforms and normals.

    Raw 64-bit words come from PCG64; the conversion to doubles and the
    Box-Muller transform are done here so the stream depends only on the seed
    and the call sequence.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bits = np.random.PCG64(self.seed)
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        self.counter += n
        return self._bits.random_raw(n).astype(np.uint64)

    def uniform(self, shape=()) -> np.ndarray:
        """Doubles in [0, 1)."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _U53
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u1 = 1.0 - self.uniform(pairs)  # (0, 1]
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [0, high)."""
        return np.floor(self.uniform(shape) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = int(self.uniform() * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def fork(self) -> "Rng":
        """Independent child stream seeded from this one."""
        return Rng(int(self.raw(1)[0]))


def sample_standard_normal(rng: Rng, shape) -> Tensor:
    return Tensor(rng.normal(tuple(shape)))
