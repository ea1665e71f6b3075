"""Dense tensors with reverse-mode automatic differentiation.

Arrays are plain numpy arrays (float32 by default, float64 when the caller
hands in float64 data). Differentiable operations are recorded on the
innermost active :class:`Tape`; with no tape active nothing is recorded, so
inference on frozen parameters is allocation-light and safe to run from many
threads at once.

    with Tape() as tape:
        w = Tensor(w0, requires_grad=True)
        loss = (w * w).sum()
    grads = tape.backward(loss, {"w": w})
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericInputError, PoolingUnderflowError

_local = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops for one reverse sweep.

    Tapes are thread-local: entering a tape in one thread never records ops
    issued by another thread.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], tuple[bool, ...], BackwardFn]] = []
        self._touched: dict[int, Tensor] = {}

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], needs: tuple[bool, ...], fn: BackwardFn) -> None:
        for p, n in zip(parents, needs):
            if n and not p._produced:
                self._touched[id(p)] = p
        out._produced = True
        self._nodes.append((out, parents, needs, fn))

    def touched(self, tensors: Iterable[Tensor]) -> list[bool]:
        """Whether each leaf tensor was read by a recorded op."""
        return [id(t) in self._touched for t in tensors]

    def backward(self, loss: Tensor, wrt: Mapping[str, Tensor] | Sequence[Tensor]):
        """Gradients of a scalar ``loss`` with respect to ``wrt``.

        Returns a dict when ``wrt`` is a mapping, otherwise a list. Tensors the
        loss does not depend on get an all-zero gradient.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, needs, fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            parent_grads = fn(g)
            for p, n, pg in zip(parents, needs, parent_grads):
                if not n or pg is None:
                    continue
                pg = _unbroadcast(pg, p.data.shape)
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if isinstance(wrt, Mapping):
            return {k: _leaf_grad(grads, t) for k, t in wrt.items()}
        return [_leaf_grad(grads, t) for t in wrt]


def _leaf_grad(grads: dict[int, np.ndarray], t: Tensor) -> np.ndarray:
    g = grads.get(id(t))
    if g is None:
        return np.zeros_like(t.data)
    return np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)


def backward(tape: Tape, loss: Tensor, wrt):
    return tape.backward(loss, wrt)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        return x if dtype is None else x.astype(dtype, copy=False)
    return np.asarray(x, dtype=dtype or np.float32)


class Tensor:
    __slots__ = ("data", "requires_grad", "_produced", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self._produced = False

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out._produced = False
    tape = current_tape()
    if tape is not None:
        needs = tuple(p.requires_grad for p in parents)
        if any(needs):
            out.requires_grad = True
            tape._record(out, parents, needs, fn)
    return out


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.isfinite(x).all():
        raise NumericInputError(f"{op}: non-finite input")


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a if isinstance(a, Tensor) else None)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a if isinstance(a, Tensor) else None)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def pow_(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _result(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    _check_finite(a.data, "log")
    if (a.data <= 0).any():
        raise NumericInputError("log: non-positive input")
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _result(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    x2 = x * x
    inner = c * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def fn(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(y.astype(x.dtype, copy=False), (a,), fn)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    return mul(a, Tensor(keep))


# linear algebra and reductions -------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ContractError("matmul needs operands of rank >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise ContractError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _result(np.matmul(ad, bd), (a, b), fn)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    advanced = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def fn(g):
        out = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _result(a.data[idx], (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; ids is an integer array of any shape."""
    ids = np.asarray(ids)
    w = weight.data

    def fn(g):
        out = np.zeros_like(w)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, w.shape[1]))
        return (out,)

    return _result(w[ids], (weight,), fn)


# normalization and pooling -----------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    _check_finite(x, "softmax")
    if x.size == 0:
        raise ContractError("softmax of an empty tensor")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ContractError("layer_norm needs eps > 0")
    x = a.data
    _check_finite(x, "layer_norm")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ContractError(f"layer_norm gain/bias must have shape {x.shape[-1:]}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data

    def fn(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, (a, gain, bias), fn)


def seq_max_pool(a: Tensor) -> Tensor:
    """Pairwise max over the sequence axis (second to last).

    Element j of the output is the elementwise max of inputs 2j and 2j+1; an
    odd trailing element is dropped. Ties route the gradient to the first
    element of the pair.
    """
    x = a.data
    if x.ndim < 2 or x.shape[-2] < 2:
        raise PoolingUnderflowError(f"seq_max_pool needs sequence length >= 2, got shape {x.shape}")
    half = x.shape[-2] // 2
    first = x[..., 0 : 2 * half : 2, :]
    second = x[..., 1 : 2 * half : 2, :]
    pick_first = first >= second

    def fn(g):
        out = np.zeros_like(x)
        out[..., 0 : 2 * half : 2, :] = g * pick_first
        out[..., 1 : 2 * half : 2, :] = g * ~pick_first
        return (out,)

    return _result(np.where(pick_first, first, second), (a,), fn)


def pool_mask(mask: np.ndarray) -> np.ndarray:
    """Logical-OR counterpart of :func:`seq_max_pool` for a (..., S) mask."""
    half = mask.shape[-1] // 2
    return mask[..., 0 : 2 * half : 2] | mask[..., 1 : 2 * half : 2]
