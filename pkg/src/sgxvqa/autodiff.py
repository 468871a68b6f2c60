"""Minimal reverse-mode autodiff over dense numpy arrays.

Covers exactly the primitive set the model needs. Values are checked finite
after every primitive; float32 is the training dtype and float64 the
reference dtype for gradient verification.
"""
from __future__ import annotations

import contextlib

import numpy as np

_DTYPE = np.float32


class ShapeError(ValueError):
    """Incompatible operand shapes for a primitive."""


class NumericsError(FloatingPointError):
    """A primitive produced NaN or Inf."""


def set_dtype(dtype) -> None:
    global _DTYPE
    _DTYPE = np.dtype(dtype).type


def current_dtype():
    return _DTYPE


@contextlib.contextmanager
def reference_mode():
    """float64 context for finite-difference verification."""
    prev = _DTYPE
    set_dtype(np.float64)
    try:
        yield
    finally:
        set_dtype(prev)


_CHECK_FINITE = True


@contextlib.contextmanager
def no_finite_checks():
    """Skip per-op finite checks in hot loops; callers must validate the
    end result (e.g. the loss) themselves."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = False
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op} produced non-finite values")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(),
                 backward=None, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.name = name

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, _as_tensor(other) * -1.0)

    def __rsub__(self, other):
        return add(_as_tensor(other), self * -1.0)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return take(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def _make(data, op, parents, backward) -> Tensor:
    return Tensor(_check(data, op), parents=tuple(parents), backward=backward)


# -- primitives -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(out_data, "add", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, "mul", (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else -1]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.expand_dims(g, -1) * b.data if a.ndim > 1 else g * b.data
            elif a.ndim == 1:
                ga = g @ np.swapaxes(b.data, -1, -2)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(np.asarray(ga), a.shape))
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.outer(a.data, g) if b.ndim == 2 else g * a.data
            elif b.ndim == 1:
                gb = (a.data * np.expand_dims(g, -1)).reshape(-1, a.data.shape[-1]).sum(0)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(np.asarray(gb), b.shape))

    return _make(out_data, "matmul", (a, b), bw)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """x @ W + b with W of shape (in, out)."""
    if x.data.shape[-1] != W.shape[0]:
        raise ShapeError(f"affine: input {x.shape} vs weight {W.shape}")
    return add(matmul(x, W), b)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, "relu", (x,),
                 lambda g: x._accum(g * mask) if x.requires_grad else None)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope).astype(x.data.dtype)
    return _make(x.data * scale, "leaky_relu", (x,),
                 lambda g: x._accum(g * scale) if x.requires_grad else None)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(s, "sigmoid", (x,),
                 lambda g: x._accum(g * s * (1.0 - s)) if x.requires_grad else None)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, "tanh", (x,),
                 lambda g: x._accum(g * (1.0 - t * t)) if x.requires_grad else None)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _make(e, "exp", (x,),
                 lambda g: x._accum(g * e) if x.requires_grad else None)


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), "log", (x,),
                 lambda g: x._accum(g / x.data) if x.requires_grad else None)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accum(np.broadcast_to(g, x.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            x._accum(np.broadcast_to(ge, x.shape).copy())

    return _make(out_data, "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            x._accum(s * (g - dot))

    return _make(s, "softmax", (x,), bw)


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to positions where mask is truthy (mask is constant)."""
    mask = np.asarray(mask, dtype=bool)
    if np.any(~mask.any(axis=axis)):
        raise ShapeError("masked_softmax: a row has empty support")
    neg = np.where(mask, 0.0, -np.inf)
    z = x.data + neg
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(np.maximum(z, -745.0)) * mask.astype(x.data.dtype)
    denom = e.sum(axis=axis, keepdims=True)
    s = e / denom

    def bw(g):
        if x.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            x._accum(s * (g - dot))

    return _make(s, "masked_softmax", (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _make(out_data, "concat", tensors, bw)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), "reshape", (x,),
                 lambda g: x._accum(g.reshape(x.shape)) if x.requires_grad else None)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (-1,))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _make(np.swapaxes(x.data, a1, a2), "swapaxes", (x,),
                 lambda g: x._accum(np.swapaxes(g, a1, a2)) if x.requires_grad else None)


def take(x: Tensor, key) -> Tensor:
    out_data = x.data[key]

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, key, g)
            x._accum(gx)

    return _make(np.asarray(out_data), "take", (x,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup into a (vocab, dim) table."""
    ids = np.asarray(ids, dtype=np.intp)
    return take(table, ids)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis, then affine gain/bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data
    d = x.shape[-1]

    def bw(g):
        if gain.requires_grad:
            gain._accum(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accum(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gh = g * gain.data
            term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            x._accum(term * inv)
        _ = d

    return _make(out_data, "layer_norm", (x, gain, bias), bw)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _make(x.data * keep, "dropout", (x,),
                 lambda g: x._accum(g * keep) if x.requires_grad else None)


def cross_entropy(logits: Tensor, target_id: int) -> Tensor:
    """Negative log-softmax at target_id; logits is a vector."""
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects a logit vector, got {logits.shape}")
    z = logits.data - logits.data.max()
    lse = np.log(np.exp(z).sum())
    out_data = np.asarray(lse - z[target_id])
    p = np.exp(z - lse)

    def bw(g):
        if logits.requires_grad:
            gl = p.copy()
            gl[target_id] -= 1.0
            logits._accum(g * gl)

    return _make(out_data, "cross_entropy", (logits,), bw)


# -- verification ---------------------------------------------------------

def finite_difference_check(fn, inputs, eps: float = 1e-4) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of a scalar-valued fn over the given input tensors."""
    with reference_mode():
        # copy so perturbing one input never aliases another or a closure constant
        tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True)
                   for x in inputs]
        out = fn(*tensors)
        out.backward()
        analytic = [t.grad.copy() for t in tensors]

        worst = 0.0
        for ti, t in enumerate(tensors):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = fn(*tensors).item()
                flat[i] = orig - eps
                lo = fn(*tensors).item()
                flat[i] = orig
                numeric = (hi - lo) / (2 * eps)
                a = analytic[ti].reshape(-1)[i]
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    return worst
