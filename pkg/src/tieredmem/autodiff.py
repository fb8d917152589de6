"""Minimal dense-tensor library with reverse-mode differentiation.

Tensors wrap numpy arrays (row-major). Every differentiable op records its
parents and a backward closure; ``Tensor.backward()`` topologically sorts the
recorded graph and runs the closures in exact reverse order. Forward results
are deterministic: there is no threading and no nondeterministic reduction.

Training runs in float32; gradient-check tests build float64 graphs (ops
preserve the input dtype).
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class DimensionError(ValueError):
    """Operand shapes violate an op's contract."""


class ContractError(ValueError):
    """An op precondition was violated (non-scalar loss, missing grad, ...)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float32) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph bookkeeping -------------------------------------------------

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        """Value-identical copy with no graph linkage."""
        return Tensor(self.data.copy())

    def item(self):
        return float(self.data)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        self must be a scalar on the recorded graph. Repeated calls without
        zeroing grads accumulate.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar, got shape {self.data.shape}")
        # iterative DFS: streamed graphs get deep
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __getitem__(self, idx):
        return index(self, idx)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _make(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def pow_scalar(a, p):
    a = _wrap(a)
    out_data = a.data ** p

    def bwd(g):
        if a.requires_grad:
            a._accum(g * p * a.data ** (p - 1))

    return _make(out_data, (a,), bwd)


def sigmoid(a):
    a = _wrap(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        if a.requires_grad:
            a._accum(g * s * (1.0 - s))

    return _make(s, (a,), bwd)


def gelu(a):
    """Exact GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    a = _wrap(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = (x * cdf).astype(x.dtype)

    def bwd(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
            a._accum(g * (cdf + x * pdf))

    return _make(out_data, (a,), bwd)


# -- shape / structure -----------------------------------------------------


def matmul(a, b):
    """Matrix product. Supports batched a with 2-D b, or equal batch dims."""
    a, b = _wrap(a), _wrap(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dims: {a.data.shape} vs {b.data.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                q, r = b.data.shape
                gb = a.data.reshape(-1, q).T @ g.reshape(-1, r)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(gb)

    return _make(out_data, (a, b), bwd)


def transpose(a):
    a = _wrap(a)
    out_data = np.swapaxes(a.data, -1, -2)

    def bwd(g):
        if a.requires_grad:
            a._accum(np.swapaxes(g, -1, -2))

    return _make(out_data, (a,), bwd)


def reshape(a, shape):
    a = _wrap(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    return _make(out_data, (a,), bwd)


def index(a, idx):
    a = _wrap(a)
    out_data = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a._accum(ga)

    return _make(out_data, (a,), bwd)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make(out_data, tuple(tensors), bwd)


def sum_all(a):
    a = _wrap(a)
    out_data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        if a.requires_grad:
            a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), bwd)


def mean_all(a):
    a = _wrap(a)
    n = a.data.size
    out_data = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def bwd(g):
        if a.requires_grad:
            a._accum(np.broadcast_to(g / n, a.data.shape).copy())

    return _make(out_data, (a,), bwd)


def mean_axis(a, axis, keepdims=False):
    a = _wrap(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.shape[axis]

    def bwd(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg / n, a.data.shape).copy())

    return _make(out_data, (a,), bwd)


# -- normalization / attention pieces --------------------------------------


def softmax_rows(a):
    """Row-stable softmax over the last axis (max-subtraction)."""
    a = _wrap(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            a._accum(y * (g - dot))

    return _make(y, (a,), bwd)


def layer_norm(a, gain, bias, eps=1e-5):
    """Per-row normalization over the last axis, then affine."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g):
        if gain.requires_grad:
            gain._accum(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias._accum(_unbroadcast(g, bias.data.shape))
        if a.requires_grad:
            gx = g * gain.data
            d = x.shape[-1]
            a._accum(inv * (gx - gx.mean(axis=-1, keepdims=True)
                            - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d))

    return _make(out_data, (a, gain, bias), bwd)


# -- 1-D convolution over the chunk axis -----------------------------------


def conv1d(x, w, b):
    """Same-padded 1-D convolution.

    x: (..., L, C_in); w: (k, C_in, C_out) with odd k; b: (C_out,).
    """
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    k, cin, cout = w.data.shape
    if x.data.shape[-1] != cin:
        raise DimensionError(f"conv1d channels: x {x.data.shape} vs w {w.data.shape}")
    L = x.data.shape[-2]
    pad = k // 2
    pad_spec = [(0, 0)] * (x.data.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, pad_spec)
    out_data = np.broadcast_to(b.data, x.data.shape[:-1] + (cout,)).copy()
    for dk in range(k):
        out_data += xp[..., dk:dk + L, :] @ w.data[dk]

    def bwd(g):
        if b.requires_grad:
            b._accum(g.reshape(-1, cout).sum(axis=0))
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for dk in range(k):
                seg = xp[..., dk:dk + L, :]
                gw[dk] = seg.reshape(-1, cin).T @ g.reshape(-1, cout)
            w._accum(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for dk in range(k):
                gxp[..., dk:dk + L, :] += g @ w.data[dk].T
            x._accum(gxp[..., pad:pad + L, :])

    return _make(out_data, (x, w, b), bwd)


def avg_pool_pairs(x):
    """Halve the length axis (-2) by averaging adjacent pairs."""
    x = _wrap(x)
    if x.data.shape[-2] % 2 != 0:
        raise DimensionError(f"avg_pool_pairs needs even length, got {x.data.shape}")
    out_data = 0.5 * (x.data[..., 0::2, :] + x.data[..., 1::2, :])

    def bwd(g):
        if x.requires_grad:
            x._accum(0.5 * np.repeat(g, 2, axis=-2))

    return _make(out_data, (x,), bwd)


def upsample_pairs(x):
    """Double the length axis (-2) by repeating each row."""
    x = _wrap(x)
    out_data = np.repeat(x.data, 2, axis=-2)

    def bwd(g):
        if x.requires_grad:
            x._accum(g[..., 0::2, :] + g[..., 1::2, :])

    return _make(out_data, (x,), bwd)


def mse(pred, target):
    """Mean squared error as a scalar Tensor."""
    return mean_all(pow_scalar(pred - _wrap(target), 2))


# -- optimizer -------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction. Grads are left untouched by step()."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError("Adam.step: parameter has no gradient")
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            p.data -= self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)


def adam_step(opt):
    """Free-function alias for Adam.step()."""
    opt.step()


def detach(x):
    return _wrap(x).detach()
