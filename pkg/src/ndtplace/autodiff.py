"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every op returns a new :class:`Tensor` remembering its parents and a closure
that maps the output gradient to parent gradients. ``Tensor.backward`` walks the
recorded graph once in reverse topological order, accumulating gradients
additively into leaves that require them, then releases the graph.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

# per thread, so inference workers cannot switch recording off for a trainer
_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (inference, finite differences)."""
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # -- graph plumbing ---------------------------------------------------
    @staticmethod
    def _make(data, parents, backward, op):
        out = Tensor(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    def backward(self, grad=None):
        if self._consumed:
            raise GraphError("backward already ran on this graph; rebuild it first")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")
        order: list[Tensor] = []
        seen: set[int] = set()
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
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._consumed = True
        self._consumed = True

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(as_tensor(other, like=self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        if np.ndim(other) == 0:
            return mul(self, 1.0 / float(other))
        return mul(self, 1.0 / np.asarray(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- shape / reductions as methods ------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def min(self, axis=None, keepdims=False):
        return -tmax(-self, axis, keepdims)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap constants; scalars adopt the dtype of ``like`` so float32 graphs stay float32."""
    if isinstance(x, Tensor):
        return x
    if like is not None and np.ndim(x) == 0:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(np.asarray(x))


def _broadcast_check(a: np.ndarray, b: np.ndarray, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -----------------------------------------------------------
def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return Tensor._make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return Tensor._make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def back(g):
        # subgradient 0 at the origin keeps distances to coincident points finite
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return Tensor._make(out, (a,), back, "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(np.maximum(a.data, 0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor._make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


# -- linear algebra / shape ------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), back, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(a.data[idx], (a,), back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} along axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return Tensor._make(out, tensors, lambda g: tuple(np.split(g, sizes, axis=ax)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in map(as_tensor, tensors)], axis)


# -- reductions ------------------------------------------------------------
def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), lambda g: (_expand(g, shape, axis, keepdims),), "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size // max(1, out.size)
    return Tensor._make(out, (a,), lambda g: (_expand(g, shape, axis, keepdims) / n,), "mean")


def tmax(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max reduction; the gradient flows to the first maximal element only."""
    ad = a.data
    if axis is None:
        flat = int(np.argmax(ad))
        out = ad.reshape(-1)[flat]

        def back_all(g):
            res = np.zeros_like(ad)
            res.reshape(-1)[flat] = g
            return (res,)

        if keepdims:
            out = np.asarray(out).reshape((1,) * ad.ndim)
        return Tensor._make(np.asarray(out), (a,), back_all, "max")
    ax = axis % ad.ndim
    arg = np.expand_dims(np.argmax(ad, axis=ax), ax)
    out = np.take_along_axis(ad, arg, axis=ax)

    def back(g):
        res = np.zeros_like(ad)
        gg = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(res, arg, gg, axis=ax)
        return (res,)

    return Tensor._make(out if keepdims else np.squeeze(out, ax), (a,), back, "max")


# -- normalizations and friends ---------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return Tensor._make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def _normalize_back(g, xhat, inv_std, axes, n):
    gsum = g.sum(axis=axes, keepdims=True)
    gx = (g * xhat).sum(axis=axes, keepdims=True)
    return inv_std * (g - gsum / n - xhat * gx / n)


def layernorm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` (no affine part)."""
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    n = x.shape[axis]
    return Tensor._make(xhat, (a,), lambda g: (_normalize_back(g, xhat, inv_std, axis, n),), "layernorm")


def batchnorm(
    a: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-feature normalization over every axis but the last.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``momentum * running + (1 - momentum) * batch``.
    """
    x = a.data
    axes = tuple(range(x.ndim - 1))
    if not training:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        return Tensor._make((x - running_mean.astype(x.dtype)) * inv_std, (a,), lambda g: (g * inv_std,), "batchnorm")
    n = x.size // x.shape[-1]
    mu = x.mean(axis=axes, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    unbiased = var.reshape(-1) * (n / max(n - 1, 1))
    running_mean *= momentum
    running_mean += (1 - momentum) * mu.reshape(-1)
    running_var *= momentum
    running_var += (1 - momentum) * unbiased
    return Tensor._make(xhat, (a,), lambda g: (_normalize_back(g, xhat, inv_std, axes, n),), "batchnorm")


def dropout_mask(shape, p: float, key: tuple[int, int, int], dtype=np.float64) -> np.ndarray:
    """Inverted-dropout mask from a counter-based generator keyed by (seed, op_id, step)."""
    seed, op_id, step = key
    bitgen = np.random.Philox(key=int(seed) & (2**64 - 1), counter=[int(op_id), int(step), 0, 0])
    keep = np.random.Generator(bitgen).random(shape) >= p
    return keep.astype(dtype) / (1.0 - p)


def dropout(a: Tensor, p: float, training: bool, key: tuple[int, int, int] = (0, 0, 0)) -> Tensor:
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    mask = dropout_mask(a.shape, p, key, a.dtype)
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


def l2normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = a.data
    norm = np.maximum(np.sqrt((x * x).sum(axis=axis, keepdims=True)), eps)
    out = x / norm
    return Tensor._make(out, (a,), lambda g: ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,), "l2normalize")


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    lp = log_softmax(logits, axis=-1)
    rows = np.arange(lp.shape[0])
    return -getitem(lp, (rows, np.asarray(target))).mean()


# -- gradient checking -------------------------------------------------------
def _central_difference(f, tensors, flat, i, h, f0, retries):
    """Central difference at coordinate ``i``; a step that straddles a kink
    (one-sided slopes disagree) is retried ``retries`` times at a tenth the size."""
    orig = flat[i]
    for attempt in range(retries + 1):
        flat[i] = orig + h
        fp = float(f(*tensors).data)
        flat[i] = orig - h
        fm = float(f(*tensors).data)
        flat[i] = orig
        right, left = (fp - f0) / h, (f0 - fm) / h
        # one-sided slopes carry rounding noise ~ eps |f| / h; disagreement below
        # that is not a kink, and shrinking h would only amplify it
        noise = 1e3 * np.finfo(np.float64).eps * max(abs(f0), 1.0) / h
        if attempt == retries or abs(right - left) <= 1e-3 * max(abs(right), abs(left)) + noise:
            return (fp - fm) / (2 * h)
        h /= 10.0


def grad_check(
    f: Callable[..., Tensor],
    inputs,
    h: float = 1e-5,
    max_elems: int | None = None,
    seed: int = 0,
    kink_retries: int = 2,
) -> float:
    """Largest elementwise relative error between backprop and central differences.

    ``inputs`` is a Tensor/array or a list of them; ``f(*inputs)`` must return
    a scalar Tensor. Relative error uses ``max(|a|, |b|, 1e-8)`` as the
    denominator. ``max_elems`` randomly subsamples coordinates per input.
    Coordinates whose step crosses a non-differentiable point (ReLU, max) are
    re-probed with smaller steps, up to ``kink_retries`` times.
    """
    single = not isinstance(inputs, (list, tuple))
    seq = [inputs] if single else list(inputs)
    tensors = [t if isinstance(t, Tensor) else Tensor(np.array(t, dtype=np.float64)) for t in seq]
    flags = [t.requires_grad for t in tensors]
    saved = [t.grad for t in tensors]
    for t in tensors:
        # perturbations go through a flat view, which needs contiguous storage
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    try:
        f(*tensors).backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
        rng = np.random.default_rng(seed)
        worst = 0.0
        with no_grad():
            f0 = float(f(*tensors).data)
            for t, ga in zip(tensors, analytic):
                flat = t.data.reshape(-1)
                coords = np.arange(flat.size)
                if max_elems is not None and flat.size > max_elems:
                    coords = np.sort(rng.choice(flat.size, max_elems, replace=False))
                for i in coords:
                    num = _central_difference(f, tensors, flat, i, h, f0, kink_retries)
                    a = float(ga.reshape(-1)[i])
                    err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                    worst = max(worst, err)
        return worst
    finally:
        for t, fl, g in zip(tensors, flags, saved):
            t.requires_grad = fl
            t.grad = g
