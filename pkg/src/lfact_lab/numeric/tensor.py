"""Dense fp64 tensors, primitive operations and a recording tape.

Every differentiable operation goes through :func:`apply_primitive`. When a
:class:`Tape` is active the application is appended to it, and
:func:`backward` walks the tape in reverse to produce gradients.

Shape rules (no general broadcasting):

* ``add``/``mul``: equal shapes, or the second/first operand broadcasts
  without expanding the result beyond the larger operand, e.g. ``(B, H)``
  with ``(H,)``, ``(B, 1)`` or ``()``.
* ``matmul``: rank-1 or rank-2 operands with numpy's inner-dimension rule.
* ``concat``: equal shapes except along ``axis``.
* ``transpose``: rank-2 only.
* ``softmax``/``log_softmax``: along the last axis; an optional boolean
  ``mask`` excludes entries (their probability is exactly zero).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's rule."""


class Tensor:
    """Immutable dense fp64 array.

    Tensors hash by identity, so they can key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = True):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, threshold=8)})"

    # operator sugar; every operator maps onto a primitive
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x: Any) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return const(x)


def const(data: Any) -> Tensor:
    """A tensor that never receives gradients (inputs, masks, targets)."""
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    prim: "Primitive"
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict[str, Any] = field(default_factory=dict)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; while active, every primitive applied in this
    thread is appended. Tapes are thread-confined.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        """Operands that were not produced on this tape, in first-use order."""
        produced = {id(n.output) for n in self.nodes}
        seen: set[int] = set()
        out = []
        for n in self.nodes:
            for t in n.inputs:
                if id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded primitive from the leaf values.

        Returns the recomputed outputs in tape order.
        """
        values: dict[int, np.ndarray] = {}
        outs = []
        for n in self.nodes:
            args = [values.get(id(t), t.data) for t in n.inputs]
            y = n.prim.forward(*args, **n.attrs)
            values[id(n.output)] = y
            outs.append(y)
        return outs


_local = threading.local()


def _stack() -> list[Tape]:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    # vjp(g, out, inputs, attrs) -> per-input gradient (None where not needed)
    vjp: Callable[..., Sequence[np.ndarray | None]]
    check: Callable[..., None] | None = None


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, forward, vjp, check=None):
    PRIMITIVES[name] = Primitive(name, forward, vjp, check)


def apply_primitive(kind: str, *operands: Tensor, **attrs) -> Tensor:
    """Apply primitive ``kind`` to ``operands``; record on the active tape."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    operands = tuple(_as_tensor(t) for t in operands)
    if prim.check is not None:
        prim.check(*(t.data for t in operands), **attrs)
    out_arr = prim.forward(*(t.data for t in operands), **attrs)
    requires = any(t.requires_grad for t in operands)
    out = Tensor._wrap(np.asarray(out_arr), requires)
    tape = active_tape()
    if tape is not None:
        tape.nodes.append(Node(prim, operands, out, attrs))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_elementwise(a, b, **_):
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from None
    if out != a.shape and out != b.shape:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}: result would expand both")


_register(
    "add",
    lambda a, b: a + b,
    lambda g, out, ins, attrs: (_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)),
    _check_elementwise,
)
_register(
    "mul",
    lambda a, b: a * b,
    lambda g, out, ins, attrs: (
        _unbroadcast(g * ins[1], ins[0].shape),
        _unbroadcast(g * ins[0], ins[1].shape),
    ),
    _check_elementwise,
)
_register("neg", lambda a: -a, lambda g, out, ins, attrs: (-g,))
_register("scale", lambda a, c: a * c, lambda g, out, ins, attrs: (g * attrs["c"],))
_register("sigmoid", lambda a: expit(a), lambda g, out, ins, attrs: (g * out * (1.0 - out),))
_register("tanh", np.tanh, lambda g, out, ins, attrs: (g * (1.0 - out * out),))
_register("relu", lambda a: np.maximum(a, 0.0), lambda g, out, ins, attrs: (g * (ins[0] > 0),))
_register("exp", np.exp, lambda g, out, ins, attrs: (g * out,))


def _check_log(a, **_):
    if np.any(a <= 0):
        raise ValueError("log of a non-positive value")


_register("log", np.log, lambda g, out, ins, attrs: (g / ins[0],), _check_log)


def _check_matmul(a, b, **_):
    if not (1 <= a.ndim <= 2 and 1 <= b.ndim <= 2):
        raise ShapeError(f"matmul needs rank-1/2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")


def _matmul_vjp(g, out, ins, attrs):
    a, b = ins
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 1 and b.ndim == 2:
        return b @ g, np.outer(a, g)
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g * b, g * a


_register("matmul", np.matmul, _matmul_vjp, _check_matmul)


def _check_transpose(a, **_):
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 operand, got {a.shape}")


_register("transpose", lambda a: a.T, lambda g, out, ins, attrs: (g.T,), _check_transpose)


def _check_reshape(a, shape):
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}")


_register(
    "reshape",
    lambda a, shape: a.reshape(shape),
    lambda g, out, ins, attrs: (g.reshape(ins[0].shape),),
    _check_reshape,
)


def _sum_vjp(g, out, ins, attrs):
    a = ins[0]
    axis = attrs.get("axis")
    keepdims = attrs.get("keepdims", False)
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape),)


_register(
    "sum",
    lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
    _sum_vjp,
)


def _check_concat(*arrs, axis=0):
    if not arrs:
        raise ShapeError("concat needs at least one operand")
    ref = arrs[0].shape
    ax = axis % len(ref)
    for a in arrs[1:]:
        if a.ndim != len(ref) or any(a.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat shapes disagree off axis {axis}: {ref} and {a.shape}")


def _concat_vjp(g, out, ins, attrs):
    axis = attrs.get("axis", 0)
    sizes = np.cumsum([a.shape[axis] for a in ins])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


_register(
    "concat",
    lambda *arrs, axis=0: np.concatenate(arrs, axis=axis),
    _concat_vjp,
    _check_concat,
)


def _slice_vjp(g, out, ins, attrs):
    full = np.zeros_like(ins[0])
    full[attrs["index"]] = g
    return (full,)


_register("slice", lambda a, index: a[index], _slice_vjp)


def _masked_max(a, mask):
    if mask is None:
        return a.max(axis=-1, keepdims=True)
    return np.where(mask, a, -np.inf).max(axis=-1, keepdims=True)


def _softmax(a, mask=None):
    e = np.exp(a - _masked_max(a, mask))
    if mask is not None:
        e = np.where(mask, e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def _check_softmax(a, mask=None):
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError(f"softmax needs a non-empty last axis, got {a.shape}")
    if mask is not None:
        if mask.shape != a.shape:
            raise ShapeError(f"softmax mask shape {mask.shape} differs from {a.shape}")
        if not np.all(mask.any(axis=-1)):
            raise ValueError("softmax mask excludes every entry of some row")


_register(
    "softmax",
    _softmax,
    lambda g, out, ins, attrs: (out * (g - (g * out).sum(axis=-1, keepdims=True)),),
    _check_softmax,
)


def _log_softmax(a):
    shifted = a - a.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


_register(
    "log_softmax",
    _log_softmax,
    lambda g, out, ins, attrs: (g - np.exp(out) * g.sum(axis=-1, keepdims=True),),
    _check_softmax,
)


def _pick(a, index):
    return np.take_along_axis(a, index[..., None], axis=-1)[..., 0]


def _pick_vjp(g, out, ins, attrs):
    full = np.zeros_like(ins[0])
    np.put_along_axis(full, attrs["index"][..., None], g[..., None], axis=-1)
    return (full,)


def _check_pick(a, index):
    if index.shape != a.shape[:-1]:
        raise ShapeError(f"pick index shape {index.shape} does not match {a.shape[:-1]}")


_register("pick", _pick, _pick_vjp, _check_pick)


# ---------------------------------------------------------------------------
# functional wrappers


def add(a, b):
    return apply_primitive("add", a, b)


def mul(a, b):
    return apply_primitive("mul", a, b)


def neg(a):
    return apply_primitive("neg", a)


def scale(a, c: float):
    return apply_primitive("scale", a, c=float(c))


def matmul(a, b):
    return apply_primitive("matmul", a, b)


def transpose(a):
    return apply_primitive("transpose", a)


def reshape(a, shape):
    return apply_primitive("reshape", a, shape=tuple(shape))


def sigmoid(a):
    return apply_primitive("sigmoid", a)


def tanh(a):
    return apply_primitive("tanh", a)


def relu(a):
    return apply_primitive("relu", a)


def exp(a):
    return apply_primitive("exp", a)


def log(a):
    return apply_primitive("log", a)


def sum_(a, axis: int | None = None, keepdims: bool = False):
    return apply_primitive("sum", a, axis=axis, keepdims=keepdims)


def concat(tensors: Sequence[Tensor], axis: int = 0):
    return apply_primitive("concat", *tensors, axis=axis)


def slice_(a, index):
    return apply_primitive("slice", a, index=index)


def softmax(a, mask: np.ndarray | None = None):
    """Softmax along the last axis, stabilised by max subtraction.

    ``mask`` (boolean, same shape) drops entries; dropped entries get
    probability exactly 0.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    return apply_primitive("softmax", a, mask=mask)


def log_softmax(a):
    return apply_primitive("log_softmax", a)


def pick(a, index: np.ndarray):
    """Select ``a[..., index]`` along the last axis (index has shape a.shape[:-1])."""
    return apply_primitive("pick", a, index=np.asarray(index, dtype=np.int64))


# ---------------------------------------------------------------------------
# reverse mode


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of scalar ``loss`` with respect to every trainable leaf.

    A leaf is a tape operand that no recorded node produced. Constants
    (``requires_grad=False``) are not differentiated. Leaves the loss does not
    depend on get zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    stop = None
    for i, n in enumerate(tape.nodes):
        if n.output is loss:
            stop = i
    if stop is None:
        raise ValueError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes[: stop + 1]):
        g = grads.pop(id(node.output), None)
        if g is None or not node.output.requires_grad:
            continue
        in_grads = node.prim.vjp(g, node.output.data, [t.data for t in node.inputs], node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi

    out: dict[Tensor, Tensor] = {}
    for leaf in tape.leaves():
        if not leaf.requires_grad:
            continue
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros(leaf.shape)
        out[leaf] = Tensor._wrap(np.array(g, dtype=np.float64), False)
    return out
