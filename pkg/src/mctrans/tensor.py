"""Dense numpy-backed tensors with a reverse-mode differentiation tape.

Operations are recorded on the innermost active :class:`Tape`. Outside a tape
nothing is recorded, which doubles as an inference mode::

    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss, params=[w])

Every op output is checked for NaN/Inf; a non-finite value raises
:class:`NumericError` immediately instead of poisoning later steps.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "BatchNormState",
    "NumericError", "ShapeError", "MaskError", "TapeError", "BatchSizeError", "ConfigError",
    "set_precision", "get_dtype", "precision",
    "tensor", "add", "sub", "mul", "scale", "matmul", "transpose", "swapaxes", "reshape",
    "concat", "concat_time", "split", "take_rows", "pick", "relu", "softsign", "activation",
    "softmax", "softmax_rows", "log_softmax", "layer_norm", "normalize_batch", "tsum", "mean",
    "backward",
]


class NumericError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class MaskError(ValueError):
    """A softmax row has no allowed entry."""


class TapeError(RuntimeError):
    """The tape was used out of order (e.g. backward run twice)."""


class BatchSizeError(ValueError):
    """Batch statistics requested on fewer than two rows."""


class ConfigError(ValueError):
    """Invalid configuration value."""


# ---------------------------------------------------------------------------
# precision

_state = threading.local()
_DTYPE = {"dtype": np.float64}


def set_precision(bits: int) -> None:
    """Switch the default float width (64 or 32) for newly created tensors."""
    if bits == 64:
        _DTYPE["dtype"] = np.float64
    elif bits == 32:
        _DTYPE["dtype"] = np.float32
    else:
        raise ConfigError(f"precision must be 32 or 64, got {bits}")


def get_dtype():
    return _DTYPE["dtype"]


class precision:
    """Context manager temporarily switching the default precision."""

    def __init__(self, bits: int):
        self.bits = bits

    def __enter__(self):
        self._saved = _DTYPE["dtype"]
        set_precision(self.bits)
        return self

    def __exit__(self, *exc):
        _DTYPE["dtype"] = self._saved
        return False


# ---------------------------------------------------------------------------
# tape


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


@dataclass
class _Node:
    out: "Tensor"
    parents: tuple
    backward: Callable
    op: str


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as ops execute, so the list is already in
    topological order. A tape supports exactly one backward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed; record a new one")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: "Tensor", parents: tuple, fn: Callable, op: str) -> None:
        self.nodes.append(_Node(out, parents, fn, op))

    def backward(self, loss: "Tensor", params: Iterable["Tensor"] = ()) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf reached.

        Tensors in ``params`` that the loss does not depend on get a zero grad.
        """
        if self.consumed:
            raise TapeError("backward already ran on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            tensors.pop(id(node.out), None)
            if g is None:
                continue
            pgrads = node.backward(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    tensors[key] = p
        for key, g in grads.items():
            t = tensors[key]
            t.grad = g if t.grad is None else t.grad + g
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        self.nodes = []


def backward(tape: Tape, loss: "Tensor", params: Iterable["Tensor"] = ()) -> None:
    tape.backward(loss, params)


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

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
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __array_priority__ = 100

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.logical_and.reduce(np.isfinite(arr), axis=None):
        raise NumericError(f"{op} produced a non-finite value")


def _make(out: np.ndarray, parents: tuple, fn: Callable, op: str) -> Tensor:
    _check_finite(out, op)
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.requires_grad = needs
    t.grad = None
    t.name = None
    if needs:
        tape.record(t, parents, fn, op)
    return t


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


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def _relu_grad(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(x.dtype)


def _softsign_grad(x: np.ndarray) -> np.ndarray:
    d = 1.0 + np.abs(x)
    return 1.0 / (d * d)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.maximum(xd, 0), (x,), lambda g: (g * _relu_grad(xd),), "relu")


def softsign(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd / (1.0 + np.abs(xd)), (x,), lambda g: (g * _softsign_grad(xd),), "softsign")


_ACTIVATIONS = {"softsign": softsign, "relu": relu}


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise activation by name; ``"none"`` is the identity."""
    if kind == "none":
        return x
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), fn, "matmul")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return swapaxes(a, -1, -2)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of an empty list")
    parts = [_as_tensor(p) for p in parts]
    if len(parts) == 1:
        return parts[0]
    ax = axis % parts[0].ndim
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[k] != ref[k] for k in range(len(ref)) if k != ax):
            raise ShapeError(f"concat shape mismatch: {ref} vs {p.shape} on axis {ax}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def fn(g):
        idx = [slice(None)] * g.ndim
        res = []
        for k in range(len(parts)):
            idx[ax] = slice(bounds[k], bounds[k + 1])
            res.append(g[tuple(idx)])
        return tuple(res)

    return _make(out, tuple(parts), fn, "concat")


def concat_time(parts: Sequence[Tensor]) -> Tensor:
    """Stack sequences along the time (second-to-last) axis."""
    if not parts:
        raise ShapeError("concat_time of an empty list")
    d = parts[0].shape[-1]
    for p in parts:
        if p.shape[-1] != d:
            raise ShapeError(f"feature dims differ: {d} vs {p.shape[-1]}")
    return concat(parts, axis=-2)


def _slice(a: Tensor, key) -> Tensor:
    src = a.shape
    dtype = a.dtype

    def fn(g):
        full = np.zeros(src, dtype=dtype)
        full[key] = g
        return (full,)

    return _make(a.data[key], (a,), fn, "slice")


def split(a: Tensor, sizes: Sequence[int], axis: int = -2) -> list[Tensor]:
    """Inverse of :func:`concat` for the given part sizes."""
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[ax]}")
    out, start = [], 0
    for n in sizes:
        key = [slice(None)] * a.ndim
        key[ax] = slice(start, start + n)
        out.append(_slice(a, tuple(key)))
        start += n
    return out


def take_rows(w: Tensor, ids) -> Tensor:
    """Row gather ``w[ids]``; equivalent to one-hot(ids) @ w."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= w.shape[0]):
        raise IndexError(f"row id out of range [0, {w.shape[0]})")
    wd = w.data

    def fn(g):
        gw = np.zeros_like(wd)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wd.shape[-1]))
        return (gw,)

    return _make(wd[ids], (w,), fn, "take_rows")


def pick(x: Tensor, idx) -> Tensor:
    """Select ``x[..., idx[...]]`` along the last axis."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"pick index shape {idx.shape} does not match {x.shape[:-1]}")
    xd = x.data
    out = np.take_along_axis(xd, idx[..., None], axis=-1)[..., 0]

    def fn(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make(out, (x,), fn, "pick")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    out = xd.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy(),)

    return _make(np.asarray(out), (x,), fn, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# softmax family


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` (True = allowed) zeroes weights exactly."""
    xd = x.data
    if mask is None:
        z = xd - xd.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.asarray(mask, dtype=bool)
        try:
            mask = np.broadcast_to(mask, xd.shape)
        except ValueError:
            raise ShapeError(f"mask shape {mask.shape} does not broadcast to {xd.shape}") from None
        if not mask.any(axis=-1).all():
            raise MaskError("softmax row with every entry masked")
        lowest = np.finfo(xd.dtype).min
        m = np.where(mask, xd, lowest).max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, xd - m, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), fn, "softmax")


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, mask)


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def fn(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), fn, "log_softmax")


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    n = xd.shape[-1]
    xc = xd - np.add.reduce(xd, axis=-1, keepdims=True) / n
    inv = 1.0 / np.sqrt(np.add.reduce(xc * xc, axis=-1, keepdims=True) / n + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def fn(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), fn, "layer_norm")


@dataclass
class BatchNormState:
    """Running per-feature statistics for :func:`normalize_batch`."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, dim: int, dtype=None) -> "BatchNormState":
        dtype = dtype or get_dtype()
        return cls(np.zeros(dim, dtype=dtype), np.ones(dim, dtype=dtype))


def normalize_batch(x: Tensor, state: BatchNormState, mode: str = "train",
                    gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
                    row_mask=None, update_stats: bool = True) -> Tensor:
    """Batch normalization over every row of ``x`` (all leading axes flattened).

    In train mode the statistics come from the rows selected by ``row_mask``
    (all rows when omitted); padded rows are still normalized but do not
    contribute to the statistics. The running estimates are updated with the
    state's momentum using the unbiased variance.
    """
    xd = x.data
    d = xd.shape[-1]
    if state.running_mean.shape != (d,):
        raise ShapeError(f"norm state has dim {state.running_mean.shape}, input has {d}")
    gamma = gamma if gamma is not None else Tensor(np.ones(d, dtype=xd.dtype))
    beta = beta if beta is not None else Tensor(np.zeros(d, dtype=xd.dtype))
    lead = tuple(range(xd.ndim - 1))
    if mode == "infer":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xd - state.running_mean) * inv
        out = xhat * gamma.data + beta.data

        def fn_infer(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=lead), g.sum(axis=lead)

        return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), fn_infer, "batch_norm")
    if mode != "train":
        raise ConfigError(f"unknown norm mode {mode!r}")

    if row_mask is None:
        m = np.ones(xd.shape[:-1] + (1,), dtype=xd.dtype)
    else:
        m = np.asarray(row_mask, dtype=xd.dtype).reshape(xd.shape[:-1] + (1,))
    n = float(m.sum())
    if n < 2:
        raise BatchSizeError("train-mode batch normalization needs at least two rows")
    mu = (xd * m).sum(axis=lead) / n
    xc = xd - mu
    var = ((xc * xc) * m).sum(axis=lead) / n
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    if update_stats:
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mu).astype(state.running_mean.dtype)
        unbiased = var * n / (n - 1)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)

    def fn(g):
        gxhat = g * gamma.data
        s1 = gxhat.sum(axis=lead)
        s2 = (gxhat * xhat).sum(axis=lead)
        gx = inv * (gxhat - m * (s1 + xhat * s2) / n)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), fn, "batch_norm")
