"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the upstream gradient to one gradient per
parent. The graph is rebuilt on every forward pass, so network topology can
change freely between calls.

Gradients accumulate across :meth:`Tensor.backward` calls until cleared with
:func:`zero_grads` (or :meth:`Tensor.zero_grad`).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .exceptions import DimensionError, NonDeterministicError

_state = {"dtype": np.dtype(np.float32), "grad_enabled": True}


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating point precision.

    >>> with precision("float64"):
    ...     tensor([1.0]).dtype
    dtype('float64')
    """
    previous = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = previous


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextlib.contextmanager
def no_grad():
    """Disable graph construction; results carry no parents."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An N-dimensional array that can take part in a differentiation graph.

    Parameters
    ----------
    data : array_like
        Values. Non-floating input is cast to the default dtype; floating
        arrays keep their precision.
    requires_grad : bool
        Whether gradients should be accumulated into :attr:`grad`.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op=""):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = tuple(_parents)
        self._backward: Optional[BackwardFn] = _backward
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def backward(self) -> None:
        """Backpropagate from this scalar through the graph.

        Every tensor reachable from here with ``requires_grad`` set receives
        (accumulates) its gradient in :attr:`grad`.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise RuntimeError(
                "backward() called on a tensor that is not attached to a graph"
            )
        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Create a leaf tensor in the default (or given) precision."""
    arr = np.array(data, dtype=dtype or get_default_dtype())
    return Tensor(arr, requires_grad=requires_grad)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else tensor(value)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an operation output, wiring it into the graph when needed."""
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    """Elementwise sum of two equally shaped tensors (or a tensor and a scalar)."""
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return make_result(a.data + b, (a,), lambda g: (g,), "add_scalar")
    a = as_tensor(a)
    _check_same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


add_elementwise = add


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a Python scalar."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = b
        return make_result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return make_result(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def tensor_mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)
    return make_result(
        out, (a,), lambda g: (np.full(shape, g / n, dtype=g.dtype),), "mean"
    )


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(a * weights)`` for a constant weight array; used by gradient checks."""
    if weights.shape != a.shape:
        raise DimensionError(f"weighted_sum: shape mismatch {a.shape} vs {weights.shape}")
    w = weights.astype(a.dtype, copy=False)
    out = np.asarray((a.data * w).sum(), dtype=a.dtype)
    return make_result(out, (a,), lambda g: (g * w,), "weighted_sum")


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    wrt: Sequence[Tensor] = (),
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare analytic gradients of a scalar function with central differences.

    Returns ``max |analytic - numeric| / max(1, |analytic|)`` over the checked
    elements of ``x`` and of every tensor in ``wrt`` (tensors that ``f`` reads
    through its closure, e.g. parameters). ``max_elements`` limits the number
    of coordinates checked per tensor, sampled with ``rng``.

    Raises NonDeterministicError if two evaluations at the same point differ.
    """
    targets = [x, *wrt]
    for t in targets:
        t.data = np.ascontiguousarray(t.data)
    saved_flags = [t.requires_grad for t in targets]
    for t in targets:
        t.requires_grad = True
        t.grad = None
    try:
        out = f(x)
        if out.size != 1:
            raise ValueError(f"finite_diff_check needs a scalar function, got {out.shape}")
        out.backward()
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in targets]
        with no_grad():
            base = f(x).item()
            if base != out.item():
                raise NonDeterministicError(
                    f"function returned {out.item()!r} then {base!r} for the same input"
                )
            worst = 0.0
            for t, grad in zip(targets, analytic):
                flat = t.data.reshape(-1)
                indices = np.arange(flat.size)
                if max_elements is not None and flat.size > max_elements:
                    picker = rng if rng is not None else np.random.default_rng(0)
                    indices = picker.choice(flat.size, size=max_elements, replace=False)
                gflat = grad.reshape(-1)
                for i in indices:
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = f(x).item()
                    flat[i] = orig - eps
                    down = f(x).item()
                    flat[i] = orig
                    numeric = (up - down) / (2 * eps)
                    err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
                    worst = max(worst, float(err))
    finally:
        for t, flag in zip(targets, saved_flags):
            t.requires_grad = flag
            t.grad = None
    return worst
