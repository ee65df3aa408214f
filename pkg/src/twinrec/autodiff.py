"""Dense tensors with reverse-mode automatic differentiation on numpy arrays.

Define-by-run: every operation records its parents and a backward closure,
and ``Tensor.backward()`` on a scalar loss walks the tape once in reverse
topological order. Storage defaults to float32; wrap model construction and
forward passes in ``use_dtype(np.float64)`` when checking gradients.

Only the operations the model actually needs are implemented: matmul,
elementwise arithmetic with numpy-style broadcasting, concat, row indexing,
slicing, softmax / log-softmax, SiLU, GeLU, sum, reshape and transpose.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

_DTYPE = np.float32


class NumericDomainError(ValueError):
    """Raised when an operation receives non-finite input."""


def current_dtype():
    return _DTYPE


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the storage dtype for newly created tensors."""
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = old


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- graph plumbing -------------------------------------------------

    @staticmethod
    def _result(data, parents):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._backward = None
        return out

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data.reshape(()))

    def backward(self):
        """Populate ``grad`` on every requires_grad tensor reachable from this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.data.shape}")
        topo = []
        seen = set()
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
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor._result(self.data + other.data, (self, other))
        if out.requires_grad:
            def bw():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(out.grad, other.data.shape))
            out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor._result(-self.data, (self,))
        if out.requires_grad:
            def bw():
                self._accum(-out.grad)
            out._backward = bw
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor._result(self.data * other.data, (self, other))
        if out.requires_grad:
            def bw():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad * other.data, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(out.grad * self.data, other.data.shape))
            out._backward = bw
        return out

    __rmul__ = __mul__

    def __matmul__(self, other):
        out = Tensor._result(self.data @ other.data, (self, other))
        if out.requires_grad:
            def bw():
                if self.requires_grad:
                    self._accum(out.grad @ other.data.T)
                if other.requires_grad:
                    other._accum(self.data.T @ out.grad)
            out._backward = bw
        return out

    def transpose(self):
        out = Tensor._result(self.data.T, (self,))
        if out.requires_grad:
            def bw():
                self._accum(out.grad.T)
            out._backward = bw
        return out

    def reshape(self, *shape):
        out = Tensor._result(self.data.reshape(*shape), (self,))
        if out.requires_grad:
            def bw():
                self._accum(out.grad.reshape(self.data.shape))
            out._backward = bw
        return out

    def sum(self, axis=None, keepdims=False):
        out = Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            def bw():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.data.shape))
            out._backward = bw
        return out

    def __getitem__(self, key):
        out = Tensor._result(self.data[key], (self,))
        if out.requires_grad:
            def bw():
                buf = np.zeros_like(self.data)
                buf[key] += out.grad
                self._accum(buf)
            out._backward = bw
        return out

    # -- nonlinearities -------------------------------------------------

    def silu(self):
        if not np.isfinite(self.data).all():
            raise NumericDomainError("silu: non-finite input")
        sig = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor._result(self.data * sig, (self,))
        if out.requires_grad:
            def bw():
                self._accum(out.grad * sig * (1.0 + self.data * (1.0 - sig)))
            out._backward = bw
        return out

    def gelu(self):
        """x * Phi(x) with the exact erf formulation."""
        if not np.isfinite(self.data).all():
            raise NumericDomainError("gelu: non-finite input")
        x = self.data
        cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
        out = Tensor._result(x * cdf, (self,))
        if out.requires_grad:
            pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
            def bw():
                self._accum(out.grad * (cdf + x * pdf))
            out._backward = bw
        return out

    def softmax(self, axis=-1, mask=None):
        """Numerically stabilised softmax; ``mask`` keeps True entries."""
        logits = self.data
        if mask is not None:
            m = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
            if not m.any(axis=axis).all():
                raise ValueError("softmax: all entries masked along an axis slice")
            logits = np.where(m, logits, -np.inf)
        shifted = logits - logits.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)
        out = Tensor._result(y, (self,))
        if out.requires_grad:
            def bw():
                g = out.grad
                self._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))
            out._backward = bw
        return out

    def log_softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        ls = shifted - lse
        out = Tensor._result(ls, (self,))
        if out.requires_grad:
            def bw():
                g = out.grad
                self._accum(g - np.exp(ls) * g.sum(axis=axis, keepdims=True))
            out._backward = bw
        return out

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape):
    return Tensor(np.zeros(shape))


def concat(tensors, axis=0):
    """Concatenate tensors; the backward pass splits gradients exactly."""
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])
        def bw():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * out.grad.ndim
                    idx[axis] = slice(lo, hi)
                    t._accum(out.grad[tuple(idx)])
        out._backward = bw
    return out


def index_rows(table, indices):
    """Select rows of a 2-D tensor; gradients scatter-add back into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor._result(table.data[idx], (table,))
    if out.requires_grad:
        def bw():
            buf = np.zeros_like(table.data)
            np.add.at(buf, idx, out.grad)
            table._accum(buf)
        out._backward = bw
    return out


def activation(kind, x):
    """Elementwise SiLU or GeLU by name."""
    if kind == "silu":
        return x.silu()
    if kind == "gelu":
        return x.gelu()
    raise ValueError(f"unknown activation {kind!r}")


def zero_grads(params):
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


def finite_diff_check(forward_fn, params, eps=1e-4, n_samples=5, seed=0):
    """Compare analytic gradients to central finite differences.

    ``forward_fn`` rebuilds the loss graph from the current parameter values
    on every call. For each parameter tensor a random coordinate sample is
    perturbed by +-eps and the relative error against the analytic gradient
    is reported. Purely informational; thresholds live in the tests.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    zero_grads(params)
    loss = forward_fn()
    loss.backward()
    analytic = {name: (np.array(p.grad, copy=True) if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    rng = np.random.default_rng(seed)
    report = {}
    for name, p in params.items():
        n = p.data.size
        coords = rng.choice(n, size=min(n_samples, n), replace=False)
        worst = 0.0
        for c in coords:
            orig = p.data.flat[c]
            p.data.flat[c] = orig + eps
            f_plus = forward_fn().item()
            p.data.flat[c] = orig - eps
            f_minus = forward_fn().item()
            p.data.flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name].flat[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, rel)
        report[name] = worst
    return report
