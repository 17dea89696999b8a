"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op builds its output with :func:`_record`, which stores
the parent tensors and a closure mapping the output gradient to one gradient
per parent. ``Tensor.backward`` walks the recorded graph in reverse
topological order (see :func:`tape`).

Only scalar broadcasting is supported; binary ops between tensors require
equal shapes.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

LOG_EPS = 1e-12

_mode = threading.local()


@contextmanager
def no_grad():
    """Skip graph recording in this thread (inference only)."""
    prev = getattr(_mode, "off", False)
    _mode.off = True
    try:
        yield
    finally:
        _mode.off = prev


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class VerificationError(AssertionError):
    pass


class OptimizerStateError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.ndim != 0:
            raise DomainError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = tape(self)
        grads = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def tape(root: Tensor) -> list[Tensor]:
    """Recorded ops reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, opname: str) -> None:
    if not np.isfinite(out).all():
        raise NumericError(f"{opname} produced non-finite values")


def _record(out: np.ndarray, parents: Sequence[Tensor], backward: Callable, opname: str) -> Tensor:
    _check_finite(out, opname)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.requires_grad = not getattr(_mode, "off", False) and any(p.requires_grad for p in parents)
    if t.requires_grad:
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t._parents = ()
        t._backward = None
    return t


def _same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------- elementwise

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _record(a.data + c, (a,), lambda g: (g,), "add")
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def log(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log with the input clamped below at ``eps``."""
    x = a.data
    clamped = np.maximum(x, eps)
    live = x > eps

    def backward(g):
        return (np.where(live, g / clamped, 0.0),)

    return _record(np.log(clamped), (a,), backward, "log")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, log."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        return scale(a, b)
    if op == "log":
        return log(a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- structural

def matmul_ordered(a: Tensor, b: Tensor, sort_terms: bool = False) -> Tensor:
    """2-D matrix product whose entries do not depend on their position.

    Each entry is summed over the inner index in a fixed order (or, with
    ``sort_terms``, in ascending value order), so permuting rows of ``a`` or
    columns of ``b`` permutes the output bit-for-bit. Slower than ``matmul``.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    terms = ad[:, None, :] * bd.T[None, :, :]
    if sort_terms:
        terms = np.sort(terms, axis=2)
    out = terms.sum(axis=2)
    return _record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul_ordered")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D @ 2-D, 2-D @ 1-D and 1-D @ 2-D operands."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or (a.ndim == 1 and b.ndim == 1):
        raise DimensionError(f"matmul: unsupported shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:  # matrix @ vector
            return np.outer(g, bd), ad.T @ g
        return bd @ g, np.outer(ad, g)  # vector @ matrix

    return _record(ad @ bd, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record(np.array(a.data[index], dtype=np.float64), (a,), backward, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("stack of zero tensors")
    first = tensors[0].shape
    for t in tensors:
        if t.shape != first:
            raise DimensionError(f"stack: shape mismatch {first} vs {t.shape}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record(out, tuple(tensors), backward, "stack")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(tensors), backward, "concat")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis`` (last by default)."""
    if x.data.size == 0 or x.shape[axis] == 0:
        raise DomainError("softmax of an empty tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(s, (x,), backward, "softmax")


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax over entries where ``mask`` is true; zeros elsewhere.

    Every row must keep at least one entry.
    """
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 2 or mask.shape != x.shape:
        raise DimensionError(f"masked_softmax: mask {mask.shape} vs input {x.shape}")
    if not mask.any(axis=1).all():
        raise DomainError("masked_softmax: a row has no unmasked entries")
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    # sorted row sums make the result independent of column order
    s = e / np.sort(e, axis=1).sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record(s, (x,), backward, "masked_softmax")


def embedding_bag(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Mean of the table rows picked by ``indices`` (repeats count); zeros if empty."""
    d = table.shape[1]
    if len(indices) == 0:
        return Tensor(np.zeros(d))
    # sorted so the float sum depends only on the multiset of indices
    idx = np.sort(np.asarray(indices, dtype=np.intp))
    k = len(idx)
    shape = table.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g / k)
        return (out,)

    return _record(table.data[idx].mean(axis=0), (table,), backward, "embedding_bag")


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row of a matrix to zero mean and unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _record(y, (x,), backward, "layer_norm")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an RNG")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -------------------------------------------------------------- verification

def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: Optional[float] = None,
    entries: Optional[Sequence[Optional[Iterable[int]]]] = None,
) -> float:
    """Max relative error between backprop gradients and central differences.

    ``f`` must rebuild the loss from the current parameter values on every
    call. ``entries`` optionally restricts the checked flat indices per
    parameter (``None`` means all). Raises :class:`VerificationError` when
    ``f`` is not deterministic, or when ``tol`` is given and exceeded.
    """
    first, second = f().item(), f().item()
    if first != second:
        raise VerificationError(f"f is not deterministic: {first!r} != {second!r}")
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        sel = range(flat.size) if entries is None or entries[k] is None else entries[k]
        a_flat = analytic[k].reshape(-1)
        for i in sel:
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            num = (up - down) / (2 * h)
            err = abs(a_flat[i] - num) / max(abs(a_flat[i]), abs(num), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    if tol is not None and worst > tol:
        raise VerificationError(f"gradient check failed: max relative error {worst:.3e} > {tol}")
    return worst


# ------------------------------------------------------------------ optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: Sequence[Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One in-place Adam update; L2 penalty is folded into the gradient. Zeroes grads."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise OptimizerStateError(f"parameter {p.name or i} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, p in enumerate(params):
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        m = state.m.get(i)
        v = state.v.get(i)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[i], state.v[i] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = None
