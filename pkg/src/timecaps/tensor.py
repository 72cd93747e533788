"""Dense float64 tensors with recorded reverse-mode differentiation.

Every operation builds the tape as it runs (define-by-run): the result tensor
keeps references to its inputs and a closure that routes the output gradient
back to them.  Calling ``backward()`` on a scalar result topologically sorts
the recorded graph and accumulates gradients into every grad-enabled leaf.

Tensor data is treated as immutable after construction; ``grad`` is the only
mutable slot and is owned by the backward pass.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording (e.g. for evaluation)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every grad-enabled leaf.

        The recorded graph is consumable once: a second backward from the
        same root raises, because gradients would double-accumulate.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward() already ran on this graph root")
        self._consumed = True

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Arithmetic sugar; scalars are allowed on either side.
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
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _accumulate(t: Tensor, g: np.ndarray):
    # Copy on first write so backward closures may hand out views or shared
    # arrays; later contributions add into the owned buffer.
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap a forward result, recording parents and the gradient closure."""
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _binary(a, b, fwd, da, db) -> Tensor:
    """Elementwise binary op; operands must share a shape or one is a scalar."""
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    av = a.data if a_t else float(a)
    bv = b.data if b_t else float(b)
    if a_t and b_t and a.shape != b.shape:
        raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")
    data = fwd(av, bv)

    def backward(gout: np.ndarray):
        if a_t and a.requires_grad:
            _accumulate(a, da(gout, av, bv))
        if b_t and b.requires_grad:
            _accumulate(b, db(gout, av, bv))

    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))
    return make_op(data, parents, backward)


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(
        a, b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: _accumulate(a, -g))


def scale(t: Tensor, s) -> Tensor:
    """Multiply a tensor by a scalar, where the scalar may itself be a
    trainable single-element tensor (gradient = sum of t * gout)."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"scale factor must be a single element, got shape {s.shape}")
        sval = float(s.data.reshape(()))
        data = t.data * sval

        def backward(gout: np.ndarray):
            if t.requires_grad:
                _accumulate(t, gout * sval)
            if s.requires_grad:
                _accumulate(s, np.sum(gout * t.data).reshape(s.shape))

        return make_op(data, (t, s), backward)
    return mul(t, float(s))


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0

    def backward(gout):
        _accumulate(t, gout * mask)

    return make_op(np.where(mask, t.data, 0.0), (t,), backward)


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    # split by sign to avoid overflow in exp
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(gout):
        _accumulate(t, gout * out * (1.0 - out))

    return make_op(out, (t,), backward)


def sqrt(t: Tensor) -> Tensor:
    out = np.sqrt(t.data)

    def backward(gout):
        _accumulate(t, gout / (2.0 * out))

    return make_op(out, (t,), backward)


def _normalize_axes(axes, ndim) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = []
    for ax in axes:
        a = ax + ndim if ax < 0 else ax
        if not 0 <= a < ndim:
            raise ValueError(f"axis {ax} out of range for ndim {ndim}")
        norm.append(a)
    if len(set(norm)) != len(norm):
        raise ValueError(f"duplicate axes in {axes}")
    return tuple(sorted(norm))


def _restore_keepdims(g: np.ndarray, axes: tuple[int, ...], keepdims: bool, in_shape) -> np.ndarray:
    if keepdims:
        return g
    shape = list(in_shape)
    for ax in axes:
        shape[ax] = 1
    return g.reshape(shape)


def sum_over(t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes_n = _normalize_axes(axes, t.data.ndim)
    data = t.data.sum(axis=axes_n if axes_n else None, keepdims=keepdims)

    def backward(gout):
        g = _restore_keepdims(np.asarray(gout), axes_n, keepdims, t.shape)
        _accumulate(t, np.broadcast_to(g, t.shape))

    return make_op(data, (t,), backward)


def max_over(t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes_n = _normalize_axes(axes, t.data.ndim)
    kept = t.data.max(axis=axes_n, keepdims=True)
    data = kept if keepdims else kept.reshape(
        tuple(s for i, s in enumerate(t.shape) if i not in axes_n))

    def backward(gout):
        g = _restore_keepdims(np.asarray(gout), axes_n, keepdims, t.shape)
        mask = t.data == kept
        count = mask.sum(axis=axes_n, keepdims=True)
        _accumulate(t, mask * (g / count))  # ties share the gradient equally

    return make_op(data, (t,), backward)


def mean_over(t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes_n = _normalize_axes(axes, t.data.ndim)
    count = 1
    for ax in axes_n:
        count *= t.shape[ax]
    return scale(sum_over(t, axes_n, keepdims), 1.0 / count)


def reshape(t: Tensor, new_shape) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    old_shape = t.shape

    def backward(gout):
        _accumulate(t, np.asarray(gout).reshape(old_shape))

    return make_op(t.data.reshape(new_shape), (t,), backward)


def permute(t: Tensor, order: Iterable[int]) -> Tensor:
    order = tuple(order)
    if sorted(order) != list(range(t.data.ndim)):
        raise ValueError(f"{order} is not a permutation of axes for ndim {t.data.ndim}")
    inverse = tuple(np.argsort(order))

    def backward(gout):
        _accumulate(t, np.transpose(np.asarray(gout), inverse))

    return make_op(np.transpose(t.data, order), (t,), backward)


def flatten_leading(t: Tensor, keep_last: int = 1) -> Tensor:
    """Merge every axis except the trailing ``keep_last`` into a single axis."""
    if not 0 < keep_last < t.data.ndim:
        raise ValueError(f"keep_last={keep_last} invalid for ndim {t.data.ndim}")
    tail = t.shape[-keep_last:]
    lead = 1
    for s in t.shape[:-keep_last]:
        lead *= s
    return reshape(t, (lead,) + tail)


def repeat_axis(t: Tensor, axis: int, times: int) -> Tensor:
    """Tile a size-1 axis ``times`` times (explicit expand; backward sums)."""
    axis = axis + t.data.ndim if axis < 0 else axis
    if t.shape[axis] != 1:
        raise ShapeError(f"repeat_axis needs extent 1 at axis {axis}, got {t.shape}")
    data = np.repeat(t.data, times, axis=axis)

    def backward(gout):
        _accumulate(t, np.asarray(gout).sum(axis=axis, keepdims=True))

    return make_op(data, (t,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of zero tensors")
    ndim = tensors[0].data.ndim
    axis = axis + ndim if axis < 0 else axis
    for t in tensors[1:]:
        if t.data.ndim != ndim:
            raise ShapeError("concat operands must share rank")
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise ShapeError(f"concat mismatch off-axis: {t.shape} vs {tensors[0].shape}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(gout):
        g = np.asarray(gout)
        idx: list = [slice(None)] * ndim
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx[axis] = slice(start, stop)
                _accumulate(t, g[tuple(idx)])

    return make_op(data, tuple(tensors), backward)


def contract(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Binary einsum with recorded gradients, e.g. contract('prs,prsn->prn', k, v).

    Restrictions that keep the adjoint another einsum: no ellipses, no label
    repeated within one operand, every operand label present in the output or
    the other operand, every output label present in some operand.
    """
    try:
        in_spec, out_spec = subscripts.replace(" ", "").split("->")
        a_spec, b_spec = in_spec.split(",")
    except ValueError:
        raise ValueError(f"contract spec must look like 'ab,bc->ac', got {subscripts!r}") from None
    for spec, operand in ((a_spec, a), (b_spec, b)):
        if len(set(spec)) != len(spec):
            raise ValueError(f"repeated label in operand spec {spec!r}")
        if len(spec) != operand.data.ndim:
            raise ShapeError(f"spec {spec!r} does not match operand rank {operand.data.ndim}")
    if not set(a_spec) <= set(out_spec) | set(b_spec):
        raise ValueError(f"labels {set(a_spec) - set(out_spec) - set(b_spec)} summed within one operand")
    if not set(b_spec) <= set(out_spec) | set(a_spec):
        raise ValueError(f"labels {set(b_spec) - set(out_spec) - set(a_spec)} summed within one operand")
    if not set(out_spec) <= set(a_spec) | set(b_spec):
        raise ValueError(f"output labels {set(out_spec) - set(a_spec) - set(b_spec)} missing from inputs")
    data = np.einsum(subscripts, a.data, b.data)

    def backward(gout):
        g = np.asarray(gout)
        if a.requires_grad:
            _accumulate(a, np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, b.data))
        if b.requires_grad:
            _accumulate(b, np.einsum(f"{a_spec},{out_spec}->{b_spec}", a.data, g))

    return make_op(data, (a, b), backward)


def softmax_axis(t: Tensor, axes) -> Tensor:
    """Softmax over the given axes, max-shifted for stability.

    The outputs are positive and sum to one over ``axes`` at every remaining
    index; the result is invariant to adding a constant along those axes.
    """
    axes_n = _normalize_axes(axes, t.data.ndim)
    shifted = t.data - t.data.max(axis=axes_n, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axes_n, keepdims=True)

    def backward(gout):
        g = np.asarray(gout)
        inner = (g * y).sum(axis=axes_n, keepdims=True)
        _accumulate(t, y * (g - inner))

    return make_op(y, (t,), backward)
