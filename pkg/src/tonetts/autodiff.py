"""Reverse-mode automatic differentiation over dense numpy arrays.

Every primitive returns a new :class:`Tensor`.  When at least one input
requires gradient the output keeps a reference to its inputs and a closure
mapping the output gradient to input gradients; :func:`backward` orders
these records topologically and replays them in reverse.

Parameters are leaf tensors with ``trainable=True``.  A frozen leaf
(``trainable=False``) is treated as a constant: no record is kept for ops
that only touch frozen or constant inputs, and its ``grad`` is never
written.  This is what keeps the phoneme path untouched in adapter mode.

Storage is float32 by default; reductions accumulate in float64.  Arrays
of any float dtype are accepted, which is how :func:`grad_check` runs the
whole graph in float64.
"""
from __future__ import annotations

import contextlib
import fnmatch
import threading
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeMismatch, TtsError

# per thread, so parallel inference cannot leave recording switched off
_state = threading.local()


def _is_recording() -> bool:
    return getattr(_state, "recording", True)


class InvalidProbability(TtsError, ValueError):
    pass


class NonScalarLoss(TtsError, ValueError):
    pass


class EmptyTape(TtsError, RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    prev, _state.recording = _is_recording(), False
    try:
        yield
    finally:
        _state.recording = prev


class Tensor:
    __slots__ = ("data", "grad", "trainable", "name", "_parents", "_backward", "_tracked")

    def __init__(self, data, trainable: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.trainable = trainable
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._tracked = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    @property
    def requires_grad(self):
        return self.trainable if self.is_leaf else self._tracked

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, trainable={self.trainable})"

    # operator sugar, all routed through the primitives below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scalar_mul(as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _is_recording() and any(p.requires_grad for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out._tracked = True
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, what):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(what, a.shape, b.shape) from None


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeMismatch("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.data.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch("layer_norm affine", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(x.dtype)
    y = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True, dtype=np.float64)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True, dtype=np.float64)
            )
            gx = gx.astype(x.dtype)
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    return _make(y, (x, gamma, beta), backward)


def conv1d(x, weight, bias=None) -> Tensor:
    """Same-padded 1-D convolution over time.

    ``x`` is ``(B, T, C_in)``, ``weight`` is ``(K, C_in, C_out)`` with odd
    ``K``, ``bias`` is ``(C_out,)``.  Zero padding of ``K // 2`` on each side.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 3 or x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch("conv1d", x.shape, weight.shape)
    k, cin, cout = weight.shape
    if k % 2 == 0:
        raise ShapeMismatch("conv1d needs an odd kernel", weight.shape)
    b_, t, _ = x.shape
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    cols = np.stack([xp[:, i:i + t, :] for i in range(k)], axis=2).reshape(b_, t, k * cin)
    w2 = weight.data.reshape(k * cin, cout)
    y = cols @ w2
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeMismatch("conv1d bias", bias.shape, (cout,))
        y = y + bias.data
        parents.append(bias)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(b_, t, k, cin)
            gxp = np.zeros((b_, t + 2 * pad, cin), dtype=g.dtype)
            for i in range(k):
                gxp[:, i:i + t, :] += gcols[:, :, i, :]
            gx = gxp[:, pad:pad + t, :]
        if weight.requires_grad:
            gw = (cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(k, cin, cout)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return (gx, gw, gb)[: len(parents)]

    return _make(y, parents, backward)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward)


def index_rows(x, index) -> Tensor:
    """Per-batch row gather: ``out[b, m] = x[b, index[b, m]]`` for ``x`` of shape (B, N, D)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeMismatch("index_rows", x.shape, index.shape)
    out = np.take_along_axis(x.data, index[:, :, None], axis=1)

    def backward(g):
        gx = np.zeros_like(x.data)
        rows = np.broadcast_to(np.arange(x.shape[0])[:, None], index.shape)
        np.add.at(gx, (rows.reshape(-1), index.reshape(-1)), g.reshape(-1, x.shape[2]))
        return (gx,)

    return _make(out, (x,), backward)


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout with drop probability ``p``; identity when not training."""
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"dropout probability {p} not in [0, 1)")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.data.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", *(t.shape for t in xs)) from None
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, xs, backward)


def slice_(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _make(x.data[index], (x,), backward)


def sum_(x) -> Tensor:
    """Sum of all entries, accumulated in float64."""
    x = as_tensor(x)
    total = x.data.sum(dtype=np.float64).astype(x.dtype)
    return _make(total, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mse_loss(pred, target, mask=None) -> Tensor:
    """Mean squared error over the entries selected by ``mask``.

    ``mask`` broadcasts against ``pred``; the mean divides by the number of
    selected entries after broadcasting.  ``target`` is a constant.
    """
    pred = as_tensor(pred)
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatch("mse_loss", pred.shape, target.shape)
    diff = pred.data.astype(np.float64) - target
    if mask is None:
        w = np.ones_like(diff)
    else:
        w = np.broadcast_to(np.asarray(mask, dtype=np.float64), diff.shape)
    count = w.sum()
    if count == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))
    value = (w * diff * diff).sum() / count
    scale = 2.0 * w * diff / count

    return _make(np.asarray(value, dtype=pred.dtype), (pred,),
                 lambda g: ((g * scale).astype(pred.dtype),))


# ------------------------------------------------------------------ backward

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        for p in parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every reachable trainable leaf."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise EmptyTape("loss is not connected to any trainable tensor")
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.trainable:
                g = g.astype(node.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --------------------------------------------------------------- parameters

class ParameterSet:
    """Ordered ``name -> Tensor`` map; the group of a name is its first dotted part."""

    def __init__(self):
        self._tensors: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, data) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(data, trainable=True, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    @staticmethod
    def group_of(name: str) -> str:
        return name.split(".", 1)[0]

    def groups(self) -> list[str]:
        return list(OrderedDict.fromkeys(self.group_of(n) for n in self._tensors))

    def in_group(self, group: str) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._tensors.items() if self.group_of(n) == group]

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def freeze_map(self) -> dict[str, bool]:
        """Per-group trainability; a group counts as trainable if any member is."""
        out: dict[str, bool] = {}
        for n, t in self._tensors.items():
            g = self.group_of(n)
            out[g] = out.get(g, False) or t.trainable
        return out

    def astype(self, dtype):
        for t in self._tensors.values():
            t.data = t.data.astype(dtype)
        return self


def set_trainable(params: ParameterSet, selector, flag: bool) -> int:
    """Set ``trainable`` on every tensor whose name matches ``selector``.

    ``selector`` is either an fnmatch pattern (``"phoneme_encoder.*"``) or a
    predicate on names.  Returns the number of matched tensors.
    """
    match = selector if callable(selector) else (lambda n: fnmatch.fnmatchcase(n, selector))
    count = 0
    for name, t in params.items():
        if match(name):
            t.trainable = bool(flag)
            if not flag:
                t.grad = None
            count += 1
    return count


# --------------------------------------------------------------- grad check

def grad_check(f: Callable[..., Tensor], inputs: Iterable, eps: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    ``inputs`` are arrays or tensors; all are cast to float64 for the check
    (tensors are restored to their original dtype and trainability after).
    The error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    tensors, restore = [], []
    for x in inputs:
        if isinstance(x, Tensor):
            restore.append((x, x.data.dtype, x.trainable, x.grad))
            x.data = x.data.astype(np.float64)
            x.trainable, x.grad = True, None
            tensors.append(x)
        else:
            tensors.append(Tensor(np.array(x, dtype=np.float64), trainable=True))
    try:
        out = f(*tensors)
        analytic = []
        if out.requires_grad:
            backward(out)
        for t in tensors:
            analytic.append(np.zeros_like(t.data) if t.grad is None else t.grad.copy())

        worst = 0.0
        with no_grad():
            for t, a in zip(tensors, analytic):
                flat = t.data.reshape(-1)
                aflat = a.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = float(f(*tensors).data)
                    flat[i] = orig - eps
                    fm = float(f(*tensors).data)
                    flat[i] = orig
                    num = (fp - fm) / (2 * eps)
                    err = abs(aflat[i] - num) / max(1e-8, abs(aflat[i]) + abs(num))
                    worst = max(worst, err)
        return worst
    finally:
        for t, dtype, trainable, grad in restore:
            t.data = t.data.astype(dtype)
            t.trainable, t.grad = trainable, grad
