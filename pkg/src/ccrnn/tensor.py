"""Dense float64 tensors with reverse-mode automatic differentiation.

Every model computation in this package runs through the ops defined here,
so a single `backward` call yields gradients for all trainable parameters.
The design is define-by-run: each op records its operands and a closure
computing the vector-Jacobian product, and `backward` replays the recorded
graph in reverse topological order.

Broadcasting follows the trailing-axis rule (align shapes from the right,
axes of size 1 expand). `matmul` accepts stacked operands: leading axes are
treated as batch dimensions and broadcast the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for gradients.

    Tensors are hashable by identity; a trainable parameter is a leaf tensor
    with ``requires_grad=True`` and is used as the key in a GradientMap.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] | None = None
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy; treat as read-only)."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; scalars and arrays are wrapped as constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


GradientMap = dict  # parameter Tensor -> gradient Tensor of identical shape


def _not_scalar(t: Tensor):
    raise ShapeError(f"expected a scalar tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"shapes {sa} and {sb} are not broadcastable") from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing trailing-axis broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    out_data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out_data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    out_data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out_data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard (pointwise) product with broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    out_data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out_data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes act as broadcast batch dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D or higher operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    out_data = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out_data, (a, b), vjp)


def transpose_last(a: Tensor) -> Tensor:
    """Swap the two trailing axes (matrix transpose on stacked matrices)."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got shape {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out_data, tuple(tensors), vjp)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g):
        if axes is not None and not keepdims:
            kshape = list(in_shape)
            for ax in axes:
                kshape[ax] = 1
            g = g.reshape(kshape)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _make(out_data, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    out_data = a.data.mean(axis=axes, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g):
        if axes is not None and not keepdims:
            kshape = list(in_shape)
            for ax in axes:
                kshape[ax] = 1
            g = g.reshape(kshape)
        return (np.broadcast_to(g / count, in_shape).copy(),)

    return _make(out_data, (a,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # evaluate each branch only where it is stable
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.sqrt(a.data)
    return _make(y, (a,), lambda g: (g / (2.0 * y),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along `axis`, stabilized by max-subtraction."""
    a = _as_tensor(a)
    ax = axis % a.ndim if a.ndim else 0
    if a.shape == () or a.shape[ax] == 0:
        raise ShapeError(f"softmax over an empty axis {axis} of shape {a.shape}")
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _make(y, (a,), vjp)


_ELEMENTWISE_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "exp": exp}
_ELEMENTWISE_BINARY = {"mul": mul, "add": add, "sub": sub}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch a named pointwise op (sigmoid|tanh|exp|mul|add|sub)."""
    if op in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"{op} is unary")
        return _ELEMENTWISE_UNARY[op](a)
    if op in _ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"{op} is binary")
        return _ELEMENTWISE_BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order walk over recorded parents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._parents is not None:
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> GradientMap:
    """Gradients of a scalar loss w.r.t. every participating parameter.

    Fan-out accumulates: a parameter used along several paths receives the
    sum of all path gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad=True")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: GradientMap = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents is None:
            if node.requires_grad:
                result[node] = Tensor(g)
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = np.asarray(pg, dtype=np.float64) if acc is None else acc + pg
    return result


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]

    @property
    def ok(self) -> bool:
        return np.isfinite(self.max_rel_error)


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_error < self.tolerance for e in self.entries)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.max_rel_error < self.tolerance]

    def __str__(self) -> str:
        lines = [f"gradient check (tolerance {self.tolerance:g})"]
        for e in self.entries:
            mark = "ok  " if e.max_rel_error < self.tolerance else "FAIL"
            lines.append(f"  {mark} {e.name}: max rel error {e.max_rel_error:.3e} at {e.worst_index}")
        return "\n".join(lines)


def finite_difference_check(
    forward: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of `forward()` against central differences.

    `forward` must be a deterministic closure over the given parameters and
    return a scalar Tensor. Failures are reported per parameter, never raised.
    The relative error denominator is floored at 1e-6 so near-zero gradients
    are compared absolutely at that scale.
    """
    analytic = backward(forward())
    report = GradCheckReport(tolerance=tolerance)
    for pname, p in params.items():
        a = analytic[p].data if p in analytic else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = forward().item()
                flat[i] = orig - step
                f_minus = forward().item()
                flat[i] = orig
                nflat[i] = (f_plus - f_minus) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-6)
        rel = np.abs(a - numeric) / denom
        worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
        report.entries.append(GradCheckEntry(pname, float(rel.max(initial=0.0)), worst))
    return report
