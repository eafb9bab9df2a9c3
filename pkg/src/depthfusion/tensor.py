"""Minimal n-dimensional tensors with reverse-mode automatic differentiation.

Everything numeric in this package runs on these tensors: a ``Tensor`` wraps
a row-major numpy array plus an optional gradient buffer, and a ``Tape``
records executed operations so ``backward`` can replay them in reverse.

A tape is opened as a context manager around the forward pass of one
training step. Operations executed while a tape is active record themselves
only if some input requires gradients, so evaluation without a tape (or on
constant data) carries no overhead. Leaf tensors (``requires_grad=True`` and
not produced by a recorded op) accumulate into ``.grad``; gradients of
intermediates live only for the duration of one ``backward`` call, which
makes repeated backward calls accumulate exactly one extra copy of
d(loss)/d(leaf) each time.

Binary operations accept tensors of equal shape or a scalar on either side;
general broadcasting is deliberately not supported.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np


class InvalidShape(ValueError):
    """A dimension list contains a zero or negative entry."""


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes."""


class NotScalar(ValueError):
    """backward() was asked to differentiate a non-scalar."""


class EmptyMask(ValueError):
    """A validity mask selects no pixels."""


class NonFinite(FloatingPointError):
    """An operation produced NaN or Inf while debug checks are enabled."""


_debug_checks = False


def set_debug(enabled: bool) -> bool:
    """Toggle NaN/Inf tripwires on every op output; returns the old setting."""
    global _debug_checks
    old = _debug_checks
    _debug_checks = bool(enabled)
    return old


def debug_enabled() -> bool:
    return _debug_checks


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    old = set_debug(enabled)
    try:
        yield
    finally:
        set_debug(old)


class Tensor:
    """A numpy-backed value participating in reverse-mode differentiation.

    ``data`` is always a C-contiguous ndarray; ``grad`` is either None or an
    array of identical shape. ``node_id`` is the tensor's position on the
    tape that produced it (meaningless for leaves).
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: int = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same data that does not require gradients."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)


def tensor_new(shape: Sequence[int], fill: float, dtype=np.float64,
               requires_grad: bool = False) -> Tensor:
    """A tensor of the given shape with every element equal to ``fill``."""
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape):
        raise InvalidShape(f"all dimensions must be >= 1, got {shape}")
    return Tensor(np.full(shape, fill, dtype=dtype), requires_grad=requires_grad)


class TapeNode:
    """One recorded operation: inputs, output, and its backward rule.

    ``backward(grad_out, needs)`` returns one gradient array (or None) per
    input; entries whose ``needs`` flag is False may be skipped. Returned
    arrays must be freshly allocated (they are accumulated in place).
    """

    __slots__ = ("name", "inputs", "output", "backward", "needs")

    def __init__(self, name, inputs, output, backward, needs):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.needs = needs


class Tape:
    """Append-only record of operations, topologically ordered by construction."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def record(self, name: str, inputs: tuple, output: Tensor,
               backward: Callable) -> None:
        needs = tuple(t.requires_grad for t in inputs)
        output.node_id = len(self.nodes)
        self.nodes.append(TapeNode(name, inputs, output, backward, needs))

    def producer_index(self, t: Tensor) -> int:
        """Index of the node that produced ``t`` on this tape, or -1."""
        i = t.node_id
        if 0 <= i < len(self.nodes) and self.nodes[i].output is t:
            return i
        return -1

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()


_tape_stack: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def _check_finite(arr: np.ndarray, name: str) -> None:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise NonFinite(f"non-finite values in output of '{name}'")


def record_op(name: str, inputs: tuple, out_data: np.ndarray,
              backward: Callable) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording the op if gradients are needed.

    Shared by this module and the neural-layer ops in ``nn``.
    """
    _check_finite(out_data, name)
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.record(name, inputs, out, backward)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g.copy() if not g.flags.owndata else g
    # Only scalar-against-tensor broadcasting exists, so collapse everything.
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def _binary(name: str, a, b, fwd, gfn_a, gfn_b) -> Tensor:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeMismatch(f"{name}: shapes {a.shape} and {b.shape} are not "
                            "equal and neither operand is a scalar")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out_data = fwd(ad, bd)

    def backward(g, needs):
        ga = _unbroadcast(gfn_a(g, ad, bd), a.shape) if needs[0] else None
        gb = _unbroadcast(gfn_b(g, ad, bd), b.shape) if needs[1] else None
        return ga, gb

    return record_op(name, (a, b), out_data, backward)


def _unary(name: str, a, fwd, gfn) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out_data = fwd(a.data)

    def backward(g, needs):
        return (gfn(g, a.data, out_data),)

    return record_op(name, (a,), out_data, backward)


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g.copy(), lambda g, x, y: g.copy())


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g.copy(), lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def exp(a) -> Tensor:
    return _unary("exp", a, np.exp, lambda g, x, out: g * out)


def absval(a) -> Tensor:
    return _unary("abs", a, np.abs, lambda g, x, out: g * np.sign(x))


def square(a) -> Tensor:
    return _unary("square", a, np.square, lambda g, x, out: g * (2.0 * x))


def maximum(a, b) -> Tensor:
    """Elementwise max; gradient routes to the first operand on ties."""
    def gfn_a(g, x, y):
        return g * (x >= y)

    def gfn_b(g, x, y):
        return g * (x < y)

    return _binary("maximum", a, b, np.maximum, gfn_a, gfn_b)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "exp": exp, "abs": absval, "square": square,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name; binary ops require ``b``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul", "div"):
        if b is None:
            raise ValueError(f"elementwise {op!r} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"elementwise {op!r} is unary")
    return fn(a)


def reduce_mean(a: Tensor, mask=None) -> Tensor:
    """Mean of ``a``, optionally restricted to ``mask == 1`` positions.

    With a mask the result is sum(a * mask) / sum(mask), i.e. the pixel
    count n is the number of selected positions. Masked-out positions get
    exactly zero gradient.
    """
    a = as_tensor(a)
    if mask is None:
        n = a.size
        out_data = np.asarray(a.data.mean(), dtype=a.dtype)

        def backward(g, needs):
            return (np.full(a.shape, g / n, dtype=a.dtype),)

        return record_op("reduce_mean", (a,), out_data, backward)

    mask_data = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if mask_data.shape != a.shape:
        raise ShapeMismatch(f"mask shape {mask_data.shape} != tensor shape {a.shape}")
    if _debug_checks and not np.all((mask_data == 0) | (mask_data == 1)):
        raise ValueError("mask values must be 0 or 1")
    n = mask_data.sum()
    if n == 0:
        raise EmptyMask("mask selects no elements")
    mask_data = mask_data.astype(a.dtype, copy=False)
    out_data = np.asarray((a.data * mask_data).sum() / n, dtype=a.dtype)

    def backward(g, needs):
        return (g * mask_data / n, None) if needs[0] else (None, None)

    # The mask participates as a constant input; it never receives gradient.
    mask_t = mask if isinstance(mask, Tensor) else Tensor(mask_data)
    return record_op("reduce_mean_masked", (a, mask_t), out_data, backward)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf on the tape."""
    if loss.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
    start = tape.producer_index(loss)
    if start < 0:
        raise ValueError("loss was not produced on this tape")

    out_grads: list[Optional[np.ndarray]] = [None] * (start + 1)
    out_grads[start] = np.ones_like(loss.data)
    for i in range(start, -1, -1):
        g = out_grads[i]
        out_grads[i] = None
        if g is None:
            continue
        node = tape.nodes[i]
        grads = node.backward(g, node.needs)
        for inp, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            j = tape.producer_index(inp)
            if 0 <= j <= start:
                if out_grads[j] is None:
                    out_grads[j] = gi
                else:
                    out_grads[j] += gi
            elif inp.requires_grad:
                if inp.grad is None:
                    inp.grad = gi
                else:
                    inp.grad += gi
