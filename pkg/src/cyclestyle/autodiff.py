"""Dense float64 tensors with a define-by-run tape for reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` whenever one of their
inputs requires a gradient. A tape is opened per forward pass::

    with Tape() as tape:
        loss = cross_entropy(matmul(x, w), target)
    backward(loss, tape)

Outside a tape, operations are plain numpy computations (inference mode).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

# large negative additive mask; exp() of it underflows to exactly 0
MASK_NEG = -1e30


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class Tensor:
    """n-dimensional float64 array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return slice_(self, index)


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None


class no_grad:
    """Suspend recording on any active tape."""

    def __enter__(self):
        self._saved = Tape._stack
        Tape._stack = []

    def __exit__(self, *exc):
        Tape._stack = self._saved


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._leaf = False
    tape = Tape.active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(inputs, out, backward_fn))
    else:
        out.requires_grad = False
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return _record(np.log(d), (x,), lambda g: (g / d,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be 2-D and shared across a batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if ad.ndim == 1:
            gb = np.outer(ad, g)
        elif bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), backward)


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError("stack", tensors[0].shape, t.shape)
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _record(out, tensors, lambda g: tuple(np.moveaxis(g, axis, 0)[i] for i in range(n)))


def slice_(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; gradient scatters back into place."""
    shape = x.shape
    try:
        out = x.data[index]
    except IndexError:
        raise ShapeError("slice", shape, (index,)) from None

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _record(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _record(out, (x,), lambda g: (g.reshape(old),))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding_lookup", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _record(table.data[ids], (table,), backward)


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis), 1.0 / n)


def max_over_time(x: Tensor, axis: int = 1, mask=None) -> Tensor:
    """Max along ``axis``; positions where ``mask`` is 0 never win."""
    d = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != d.shape:
            mask = np.broadcast_to(np.expand_dims(mask, -1) if mask.ndim < d.ndim else mask, d.shape)
        d = np.where(mask, d, -np.inf)
    idx = np.expand_dims(np.argmax(d, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------- probabilities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(y, (x,), backward)


def cross_entropy(logits: Tensor, target, mask=None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over the positions selected by ``mask``.

    ``logits`` has the class axis last; ``target`` holds one class index per
    leading position. A single vector with an int target gives a plain scalar.
    """
    d = logits.data
    target = np.asarray(target, dtype=np.int64)
    if target.shape != d.shape[:-1]:
        raise ShapeError("cross_entropy", d.shape, target.shape)
    V = d.shape[-1]
    if target.size and (target.min() < 0 or target.max() >= V):
        raise IndexError(f"cross_entropy: target outside [0, {V})")
    w = np.ones(target.shape, dtype=DTYPE) if mask is None else np.asarray(mask, dtype=DTYPE)
    count = w.sum()
    if count <= 0:
        raise ValueError("cross_entropy: mask selects no positions")
    shifted = d - d.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    # clamp tiny negative rounding so the loss is never below zero
    loss = max(float(-(picked * w).sum() / count), 0.0)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (w / count)[..., None] * g,)

    return _record(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate ``d loss / d leaf`` into the ``grad`` of every leaf on ``tape``."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=DTYPE)
                else:
                    inp.grad += gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


# ---------------------------------------------------------------- optimisation


@dataclass
class AdamState:
    """First/second moment buffers and step counter for :func:`adam_step`."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params], **hyper)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("adam_step", (len(params),), (len(grads),), (len(state.m),))
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape, m.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


class Adam:
    """Adam over a fixed parameter list, reading gradients from ``Tensor.grad``."""

    def __init__(self, params: Iterable[Tensor], lr: float = 0.0005, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.zeros_like(self.params, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic generator used for every initialisation and shuffle."""
    return np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))


def uniform_param(rng: np.random.Generator, shape, scale: float = 0.08, name: str | None = None) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True, name=name)


def normal_param(rng: np.random.Generator, shape, std: float = 1.0, name: str | None = None) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def zeros_param(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=True, name=name)


def is_finite(x: Tensor) -> bool:
    return bool(np.all(np.isfinite(x.data)))


__all__ = [
    "AdamState", "Adam", "MASK_NEG", "ShapeError", "Tape", "Tensor", "add", "adam_step", "as_tensor",
    "backward", "concat", "cross_entropy", "embedding_lookup", "exp", "is_finite", "log", "log_softmax",
    "matmul", "max_over_time", "mean", "mul", "no_grad", "normal_param", "reshape", "seeded_rng", "sigmoid",
    "slice_", "softmax", "stack", "sub", "sum_", "tanh", "uniform_param", "zeros_param",
]
