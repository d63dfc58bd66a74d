"""Dense n-d arrays with define-by-run reverse-mode autodiff.

Arrays are numpy-backed. Every differentiable operation records a node holding
its parents and a backward closure; ``backward`` walks the nodes reachable from
the loss in exact reverse recording order and accumulates gradients into leaves.

Broadcasting between two tensors is limited to exact-shape matches and 0-d
scalars. Constants (plain numbers or numpy arrays) may broadcast into a tensor's
shape; use :func:`expand` when a learnable tensor has to be broadcast.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind in "iub":
            arr = arr.astype(DEFAULT_DTYPE)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = -1
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, dtype=DEFAULT_DTYPE, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``backward_fn(g)`` receives the output gradient and returns one gradient
    (or None) per parent, in order.
    """
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {getattr(backward_fn, '__qualname__', 'op')}")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_seq)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dleaf into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._backward is None:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


# -- shape helpers --------------------------------------------------------

def _pair(a, b) -> tuple[Tensor, Tensor | None, np.ndarray | float | None]:
    """Split a binary operand pair into (tensor, other-tensor, other-constant)."""
    a = as_tensor(a)
    if isinstance(b, Tensor):
        if b.shape != a.shape and b.ndim != 0 and a.ndim != 0:
            raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
        return a, b, None
    const = np.asarray(b, dtype=a.dtype)
    if const.ndim and not _broadcasts_into(const.shape, a.shape):
        raise ShapeError(f"constant of shape {const.shape} does not broadcast into {a.shape}")
    return a, None, const


def _broadcasts_into(src: tuple[int, ...], dst: tuple[int, ...]) -> bool:
    try:
        return np.broadcast_shapes(src, dst) == dst
    except ValueError:
        return False


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.sum(axis=tuple(range(g.ndim - len(shape)))).reshape(shape)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    a, bt, c = _pair(a, b)
    if bt is None:
        return record(a.data + c, (a,), lambda g: (g,))
    out = a.data + bt.data
    return record(out, (a, bt), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, bt.shape)))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        return add(neg(b), a)
    a, bt, c = _pair(a, b)
    if bt is None:
        return record(a.data - c, (a,), lambda g: (g,))
    return record(a.data - bt.data, (a, bt),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, bt.shape)))


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    a, bt, c = _pair(a, b)
    if bt is None:
        return record(a.data * c, (a,), lambda g: (g * c,))
    ad, bd = a.data, bt.data
    return record(ad * bd, (a, bt),
                  lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, bt.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * c, (a,), lambda g: (g * c,))


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    a, bt, c = _pair(a, b)
    denom = c if bt is None else bt.data
    if np.any(denom == 0):
        raise ZeroDivisionError("division by zero in tensor div")
    ad = a.data
    out = ad / denom
    if bt is None:
        return record(out, (a,), lambda g: (g / c,))
    bd = bt.data
    return record(out, (a, bt),
                  lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), bt.shape)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def elu(a: Tensor) -> Tensor:
    x = a.data
    ex = np.exp(np.minimum(x, 0.0))
    pos = x > 0
    out = np.where(pos, x, ex - 1.0).astype(a.dtype)
    return record(out, (a,), lambda g: (g * np.where(pos, 1.0, ex),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise FloatingPointError("log of non-positive value")
    x = a.data
    return record(np.log(x), (a,), lambda g: (g / x,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return record(out, (a,), bw)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data > lo
    return record(np.where(keep, a.data, lo).astype(a.dtype), (a,), lambda g: (g * keep,))


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, mul, sub, div, relu, elu, exp, scale."""
    table = {"add": add, "mul": mul, "sub": sub, "div": div,
             "relu": relu, "elu": elu, "exp": exp, "scale": scale}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- linear algebra and shape ---------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a[..., m, k] @ b[..., k, n].

    ``b`` may be 2-d (a shared weight) or share a's leading dimensions exactly.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimension mismatch: {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError(f"matmul batch dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record(out, (a, b), bw)


def transpose(a: Tensor, ax1: int = -1, ax2: int = -2) -> Tensor:
    return record(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast of ``a`` to ``shape``."""
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)
    lead = len(shape) - a.ndim

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return record(np.ascontiguousarray(out), (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return record(np.array(a.data[idx]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return record(out, tensors,
                  lambda g: tuple(np.squeeze(p, axis) for p in np.split(g, n, axis=axis)))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range for vocab {vocab}")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return record(table.data[ids], (table,), bw)


# -- normalizers and losses -----------------------------------------------

def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get weight 0."""
    d = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, d.shape)
        m = np.max(np.where(mask, d, -np.inf), axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, d - m, 0.0)), 0.0)
    else:
        e = np.exp(d - np.max(d, axis=-1, keepdims=True))
    y = (e / e.sum(axis=-1, keepdims=True)).astype(d.dtype)
    return record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def _standardize(x: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv, inv


def group_norm(x: Tensor, groups: int, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Standardize contiguous feature groups of the last axis, then affine."""
    d = x.shape[-1]
    if groups < 1 or d % groups:
        raise ValueError(f"feature width {d} not divisible into {groups} groups")
    if eps <= 0:
        raise ValueError("eps must be positive")
    gshape = x.shape[:-1] + (groups, d // groups)
    xhat, inv = _standardize(x.data.reshape(gshape), eps)
    xhat_flat = xhat.reshape(x.shape)
    w = np.ones(d, dtype=x.dtype) if weight is None else weight.data
    b = np.zeros(d, dtype=x.dtype) if bias is None else bias.data
    out = xhat_flat * w + b
    parents = [x] + [t for t in (weight, bias) if t is not None]
    red = tuple(range(x.ndim - 1))

    def bw(g):
        gx = (g * w).reshape(gshape)
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [gx.reshape(x.shape)]
        if weight is not None:
            grads.append((g * xhat_flat).sum(axis=red))
        if bias is not None:
            grads.append(g.sum(axis=red))
        return grads

    return record(out, parents, bw)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return group_norm(x, 1, weight, bias, eps)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean next-token cross-entropy; logits[..., V], integer targets[...]."""
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    n = z.shape[0]
    loss = np.asarray((lse - z[np.arange(n), t]).mean(), dtype=z.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), t] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return record(loss, (logits,), bw)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
