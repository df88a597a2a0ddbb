"""Dense float64 tensors and a small tape-based reverse-mode gradient engine.

Tensors wrap numpy arrays. Operations executed while a :class:`GradientTape`
is active and that touch a tensor with ``requires_grad`` are appended to the
tape; :func:`backward` walks the tape in reverse to produce adjoints.

Broadcasting is supported for the elementwise binary ops only, which is all
the transformer and the policy objective need.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class UsageError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]
    backward: Callable[..., tuple]
    kwargs: dict = field(default_factory=dict)


class GradientTape:
    """Ordered log of primitive applications.

    Use as a context manager; nesting is allowed and the innermost tape
    records.
    """

    _stack: list["GradientTape"] = []

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self):
        GradientTape._stack.append(self)
        return self

    def __exit__(self, *exc):
        GradientTape._stack.pop()
        return False

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded output from the recorded inputs."""
        return [r.forward(*(t.data for t in r.inputs), **r.kwargs) for r in self.records]


def _active_tape() -> GradientTape | None:
    return GradientTape._stack[-1] if GradientTape._stack else None


def _apply(op: str, fwd, bwd, inputs: Sequence, **kwargs) -> Tensor:
    inputs = tuple(as_tensor(t) for t in inputs)
    out = Tensor(fwd(*(t.data for t in inputs), **kwargs))
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(Record(op, inputs, out, fwd, bwd, kwargs))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    return _apply(
        "add",
        lambda x, y: x + y,
        lambda g, x, y, out: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        (a, b),
    )


def sub(a, b) -> Tensor:
    return _apply(
        "sub",
        lambda x, y: x - y,
        lambda g, x, y, out: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
        (a, b),
    )


def mul(a, b) -> Tensor:
    return _apply(
        "mul",
        lambda x, y: x * y,
        lambda g, x, y, out: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        (a, b),
    )


def div(a, b) -> Tensor:
    return _apply(
        "div",
        lambda x, y: x / y,
        lambda g, x, y, out: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)),
        (a, b),
    )


def neg(a) -> Tensor:
    return _apply("neg", lambda x: -x, lambda g, x, out: (-g,), (a,))


def exp(a) -> Tensor:
    return _apply("exp", np.exp, lambda g, x, out: (g * out,), (a,))


def log(a) -> Tensor:
    return _apply("log", np.log, lambda g, x, out: (g / x,), (a,))


def relu(a) -> Tensor:
    return _apply(
        "relu",
        lambda x: np.maximum(x, 0.0),
        lambda g, x, out: (g * (x > 0),),
        (a,),
    )


def minimum(a, b) -> Tensor:
    # ties send the gradient to the first argument
    def bwd(g, x, y, out):
        pick = x <= y
        return _unbroadcast(g * pick, x.shape), _unbroadcast(g * ~pick, y.shape)

    return _apply("minimum", np.minimum, bwd, (a, b))


def clip(a, lo: float, hi: float) -> Tensor:
    return _apply(
        "clip",
        lambda x, lo, hi: np.clip(x, lo, hi),
        lambda g, x, out, lo, hi: (g * ((x >= lo) & (x <= hi)),),
        (a,),
        lo=lo,
        hi=hi,
    )


# ------------------------------------------------------------------ reduction

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def bwd(g, x, out, axis, keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _apply(
        "sum",
        lambda x, axis, keepdims: np.sum(x, axis=axis, keepdims=keepdims),
        bwd,
        (a,),
        axis=axis,
        keepdims=keepdims,
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ------------------------------------------------------------------- linalg

def _mm(x, y):
    if x.ndim < 2 or y.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {x.shape} and {y.shape}")
    if x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {x.shape} @ {y.shape}")
    return np.matmul(x, y)


def matmul(a, b) -> Tensor:
    def bwd(g, x, y, out):
        gx = np.matmul(g, np.swapaxes(y, -1, -2))
        gy = np.matmul(np.swapaxes(x, -1, -2), g)
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    return _apply("matmul", _mm, bwd, (a, b))


def reshape(a, shape) -> Tensor:
    return _apply(
        "reshape",
        lambda x, shape: np.reshape(x, shape),
        lambda g, x, out, shape: (g.reshape(x.shape),),
        (a,),
        shape=tuple(shape),
    )


def transpose(a, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply(
        "transpose",
        lambda x, axes: np.transpose(x, axes),
        lambda g, x, out, axes: (np.transpose(g, inv),),
        (a,),
        axes=axes,
    )


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    def bwd(g, *xs_out, axis):
        xs = xs_out[:-1]
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, cuts, axis=axis))

    return _apply(
        "concat",
        lambda *xs, axis: np.concatenate(xs, axis=axis),
        bwd,
        tuple(tensors),
        axis=axis,
    )


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``start:stop`` along ``axis``."""

    def fwd(x, axis, start, stop):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, stop)
        return x[tuple(idx)]

    def bwd(g, x, out, axis, start, stop):
        gx = np.zeros_like(x)
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, stop)
        gx[tuple(idx)] = g
        return (gx,)

    return _apply("narrow", fwd, bwd, (a,), axis=axis, start=start, stop=stop)


def embed(table, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ids is a plain integer array."""
    ids = np.asarray(ids, dtype=np.int64)

    def bwd(g, t, out, ids):
        gt = np.zeros_like(t)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, t.shape[-1]))
        return (gt,)

    return _apply("embed", lambda t, ids: t[ids], bwd, (table,), ids=ids)


def take_last(a, idx: np.ndarray) -> Tensor:
    """``a[..., idx]`` elementwise along the last axis (take_along_axis)."""
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g, x, out, idx):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _apply(
        "take_last",
        lambda x, idx: np.take_along_axis(x, idx[..., None], axis=-1)[..., 0],
        bwd,
        (a,),
        idx=idx,
    )


# ------------------------------------------------------------ normalisation

def _softmax(x, mask=None):
    if mask is not None:
        z = x + np.where(mask, 0.0, -np.inf)
    else:
        z = x.copy()
    z -= np.max(z, axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= np.sum(z, axis=-1, keepdims=True)
    return z


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (bool, broadcastable) marks allowed entries."""

    def bwd(g, x, out, mask):
        s = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - s),)

    return _apply("softmax", _softmax, bwd, (a,), mask=mask)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x)


def _log_softmax(x):
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def log_softmax(a) -> Tensor:
    def bwd(g, x, out):
        return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)

    return _apply("log_softmax", _log_softmax, bwd, (a,))


def rms_stat(x: np.ndarray, eps: float) -> np.ndarray:
    """sqrt(mean(x^2) + eps) over the last axis, keepdims."""
    return np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def rmsnorm(a, gamma, eps: float = 1e-6) -> Tensor:
    def fwd(x, gm, eps):
        return gm * (x / rms_stat(x, eps))

    def bwd(g, x, gm, out, eps):
        s = rms_stat(x, eps)
        d = x.shape[-1]
        gg = g * gm
        gx = gg / s - x * np.sum(gg * x, axis=-1, keepdims=True) / (d * s**3)
        ggamma = _unbroadcast(g * (x / s), gm.shape)
        return gx, ggamma

    return _apply("rmsnorm", fwd, bwd, (a, gamma), eps=eps)


# ----------------------------------------------------------------- backward

def backward(
    tape: GradientTape,
    output: Tensor,
    params: Mapping[str, Tensor] | Iterable[Tensor] | None = None,
) -> dict[str, Tensor]:
    """Gradients of the scalar ``output`` with respect to named leaves.

    ``params`` selects which leaves to report (by name); when omitted every
    named ``requires_grad`` leaf that appears on the tape is reported.
    Parameters the output does not depend on get zero gradients.
    """
    if output.data.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {output.shape}")

    if params is None:
        leaves: dict[str, Tensor] = {}
        produced = {id(r.output) for r in tape.records}
        for r in tape.records:
            for t in r.inputs:
                if t.requires_grad and t.name is not None and id(t) not in produced:
                    leaves[t.name] = t
    elif isinstance(params, Mapping):
        leaves = dict(params)
    else:
        leaves = {t.name: t for t in params}

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for r in reversed(tape.records):
        g = grads.pop(id(r.output), None)
        if g is None:
            continue
        arrays = [t.data for t in r.inputs]
        in_grads = r.backward(g, *arrays, r.output.data, **r.kwargs)
        for t, gi in zip(r.inputs, in_grads):
            if not t.requires_grad or gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=DTYPE)

    return {
        name: Tensor(grads.get(id(t), np.zeros_like(t.data)))
        for name, t in leaves.items()
    }
