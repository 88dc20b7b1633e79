"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations in this module record the
inputs they consumed and a closure that maps the output gradient to input
gradients; :meth:`Tensor.backward` walks that record in reverse topological
order. Gradients accumulate into ``.grad`` of leaf tensors that were created
with ``requires_grad=True`` until :meth:`Tensor.zero_grad` is called.

Only the operations the model needs are provided. Fused kernels are used for
softmax, log-sum-exp, layer/batch normalization and cross-entropy so that
their gradients are both cheap and numerically stable.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, ParameterError, ShapeError

_state = threading.local()

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- autograd ------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is detached: no recorded operation leads to a parameter")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.dtype != parent.data.dtype:
                    # keep the backward pass in the parent's precision (a stray float64 scalar would
                    # otherwise promote every downstream gradient)
                    pg = pg.astype(parent.data.dtype)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def astype(self, dtype):
        return astype(self, dtype)


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


def _wrap(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _operand(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    # python scalars adopt the dtype of the tensor they meet
    if like is not None and np.isscalar(x):
        return Tensor(np.asarray(x, dtype=like.dtype))
    return as_tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    sa, sb = a.shape, b.shape
    return _wrap(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    sa, sb = a.shape, b.shape
    return _wrap(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _wrap(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _wrap(out, (a, b), back)


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    return _wrap(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _wrap(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _wrap(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _wrap(out, (x,), lambda g: (g * 0.5 / out,))


def astype(x: Tensor, dtype) -> Tensor:
    src = x.dtype
    return _wrap(x.data.astype(dtype), (x,), lambda g: (g.astype(src),))


# -- activations ----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _wrap(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF (no tanh shortcut)."""
    cdf = ndtr(x.data)
    out = x.data * cdf

    def back(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _wrap(out, (x,), back)


def pointwise(x: Tensor, f: str) -> Tensor:
    if f == "gelu":
        return gelu(x)
    if f == "relu":
        return relu(x)
    raise ParameterError(f"unknown pointwise function {f!r}")


def dropout(x: Tensor, rate: float, rng, train: bool) -> Tensor:
    """Inverted dropout: kept activations scaled by ``1/(1-rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an rng stream")
    keep = (rng.generator.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _wrap(x.data * keep, (x,), lambda g: (g * keep,))


# -- shape manipulation ---------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _wrap(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _wrap(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _wrap(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _wrap(x.data[idx], (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _wrap(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


# -- reductions -------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if g.ndim else g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, sorted(axes))
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    return _wrap(np.sum(x.data, axis=axis, keepdims=keepdims), (x,),
                 lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)),))


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    shape = x.shape
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([shape[a] for a in axes]))
    scale = x.dtype.type(1.0 / n)
    return _wrap(np.mean(x.data, axis=axis, keepdims=keepdims), (x,),
                 lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)) * scale,))


def tmax(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    if x.size == 0:
        raise ShapeError("max of an empty tensor")
    if axis is None:
        flat = reshape(x, (-1,))
        return tmax(flat, 0, keepdims=False)
    axis = axis % x.ndim
    arg = np.argmax(x.data, axis=axis)
    arg_k = np.expand_dims(arg, axis)
    out = np.take_along_axis(x.data, arg_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def back(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, arg_k, gk, axis=axis)
        return (full,)

    return _wrap(out, (x,), back)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} x {b.shape}") from exc

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _wrap(out, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the trailing axis, folding leading axes into one GEMM."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0) if bias.requires_grad else None

    return _wrap(out, parents, back)


# -- fused normalizations and losses ---------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    if x.size == 0 or x.ndim == 0:
        raise ShapeError(f"softmax needs a non-empty last dimension, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _wrap(out, (x,), back)


def logsumexp_lastdim(x: Tensor) -> Tensor:
    if x.size == 0 or x.ndim == 0:
        raise ShapeError(f"logsumexp needs a non-empty last dimension, got shape {x.shape}")
    m = x.data.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]

    def back(g):
        return (g[..., None] * (e / s),)

    return _wrap(out, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match trailing dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def back(g):
        red = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        return gx, gg, gb

    return _wrap(out.astype(x.dtype, copy=False), (x, gamma, beta), back)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, train: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Batch normalization over axis 0 of a ``[B, C]`` input.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance, as is conventional).
    """
    if x.ndim != 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm expects [B, {gamma.shape[0]}], got {x.shape}")
    if not train:
        rstd = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * rstd
        out = xhat * gamma.data + beta.data

        def back_eval(g):
            return (g * gamma.data * rstd if x.requires_grad else None,
                    (g * xhat).sum(axis=0) if gamma.requires_grad else None,
                    g.sum(axis=0) if beta.requires_grad else None)

        return _wrap(out.astype(x.dtype, copy=False), (x, gamma, beta), back_eval)

    n = x.shape[0]
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    unbiased = var * (n / (n - 1)) if n > 1 else var
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def back(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
        return (gx,
                (g * xhat).sum(axis=0) if gamma.requires_grad else None,
                g.sum(axis=0) if beta.requires_grad else None)

    return _wrap(out.astype(x.dtype, copy=False), (x, gamma, beta), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``[B, C]`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects [B, C] logits and [B] labels, got {logits.shape}, {labels.shape}")
    n, c = logits.shape
    if n == 0:
        raise ShapeError("cross_entropy of an empty batch")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = np.mean(np.log(s[:, 0]) - z[rows, labels])

    def back(g):
        p = e / s
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _wrap(np.asarray(loss, dtype=logits.dtype), (logits,), back)


# -- verification -----------------------------------------------------------

def grad_check(f: Callable, x, h: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``x`` may be a tensor or a list of tensors; every coordinate of every
    tensor is perturbed. The error for one coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = f(x)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    worst = 0.0
    for t in xs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f(x).item()
                flat[i] = orig - h
                fm = f(x).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
