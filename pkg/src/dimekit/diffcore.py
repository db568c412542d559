"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every primitive records its inputs and a vector-Jacobian product (VJP)
written in terms of other primitives.  Running :func:`grad` with
``create_graph=True`` therefore records the adjoint computation itself,
and the resulting gradients can be differentiated again
(reverse-over-reverse).  This is what force training needs: forces are
``-dE/dx`` and the loss on forces is differentiated w.r.t. parameters.

Broadcasting follows numpy rules for the elementwise binary operations;
everything else is deliberately small: 2-D matmul, concatenation, basic
slicing, row gather and segment sums.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import ContractViolation

__all__ = [
    "Tensor",
    "SegmentIndex",
    "tensor",
    "constant",
    "grad",
    "no_grad",
    "enable_grad",
    "is_recording",
    "add",
    "sub",
    "mul",
    "hadamard",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "sum",
    "mean",
    "gather",
    "segment_sum",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "abs",
    "power",
    "sigmoid",
    "silu",
    "softplus",
    "elementwise",
]

_mode = threading.local()


def is_recording() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def _recording(enabled: bool):
    prev = is_recording()
    _mode.enabled = enabled
    try:
        yield
    finally:
        _mode.enabled = prev


def no_grad():
    """Context manager: operations inside are not recorded."""
    return _recording(False)


def enable_grad():
    return _recording(True)


class Tensor:
    """A numpy array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.dtype == np.float16:
            raise ContractViolation("16-bit tensors are not supported")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    # -- array-like conveniences ------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- operators --------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        if isinstance(key, (np.ndarray, list, SegmentIndex)):
            return gather(self, key)
        return _getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _node(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) else np.asarray(data)
    out.op = op
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# shape plumbing


def _sum_to_array(a: np.ndarray, shape: tuple) -> np.ndarray:
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    return a.sum(axis=axes, keepdims=True).reshape(shape)


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Reduce ``x`` by summation onto a broadcast-compatible ``shape``."""
    shape = tuple(shape)
    if x.shape == shape:
        return x

    def backward(g, needs):
        return (expand(g, x.shape),)

    return _node(_sum_to_array(x.data, shape), (x,), backward, "sum_to")


def expand(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x

    def backward(g, needs):
        return (sum_to(g, x.shape),)

    return _node(np.broadcast_to(x.data, shape), (x,), backward, "expand")


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    return g if g.shape == shape else sum_to(g, shape)


def reshape(x: Tensor, shape) -> Tensor:
    x = constant(x)
    shape = tuple(shape)

    def backward(g, needs):
        return (reshape(g, x.shape),)

    return _node(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor) -> Tensor:
    x = constant(x)
    if x.ndim != 2:
        raise ContractViolation(f"transpose expects a 2-D tensor, got shape {x.shape}")

    def backward(g, needs):
        return (transpose(g),)

    return _node(x.data.T, (x,), backward, "transpose")


def _getitem(x: Tensor, key) -> Tensor:
    def backward(g, needs):
        return (_index_put(g, key, x.shape),)

    return _node(x.data[key], (x,), backward, "getitem")


def _index_put(g: Tensor, key, shape: tuple) -> Tensor:
    """Embed ``g`` at ``key`` inside a zero array of ``shape`` (adjoint of slicing)."""
    out = np.zeros(shape, dtype=g.dtype)
    out[key] = g.data

    def backward(h, needs):
        return (_getitem(h, key),)

    return _node(out, (g,), backward, "index_put")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(constant(t) for t in tensors)
    if not tensors:
        raise ContractViolation("concat of an empty sequence")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != ax
        ):
            raise ContractViolation(
                f"concat shape mismatch: {[t.shape for t in tensors]} on axis {axis}"
            )
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g, needs):
        out = []
        for n, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
            if not needs[n]:
                out.append(None)
                continue
            key = (slice(None),) * ax + (slice(int(lo), int(hi)),)
            out.append(_getitem(g, key))
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return _node(data, tensors, backward, "concat")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = constant(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)
    kept_shape = x.data.sum(axis=axis, keepdims=True).shape if axis is not None else (1,) * x.ndim

    def backward(g, needs):
        return (expand(reshape(g, kept_shape), x.shape),)

    return _node(data, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = constant(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "add")

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "sub")

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(neg(g), b.shape) if needs[1] else None,
        )

    return _node(a.data - b.data, (a, b), backward, "sub")


def neg(x) -> Tensor:
    x = constant(x)

    def backward(g, needs):
        return (neg(g),)

    return _node(-x.data, (x,), backward, "neg")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "mul")

    def backward(g, needs):
        return (
            _unbroadcast(mul(g, b), a.shape) if needs[0] else None,
            _unbroadcast(mul(g, a), b.shape) if needs[1] else None,
        )

    return _node(a.data * b.data, (a, b), backward, "mul")


def hadamard(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.shape != b.shape:
        raise ContractViolation(f"hadamard: shapes differ {a.shape} vs {b.shape}")
    return mul(a, b)


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "div")

    def backward(g, needs):
        ga = _unbroadcast(div(g, b), a.shape) if needs[0] else None
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape) if needs[1] else None
        return ga, gb

    return _node(a.data / b.data, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def power(x, p: float) -> Tensor:
    x = constant(x)
    p = float(p)

    def backward(g, needs):
        if p == 1.0:
            return (g,)
        if p == 2.0:
            return (mul(g, x * 2.0),)
        return (mul(g, power(x, p - 1.0) * p),)

    return _node(x.data**p, (x,), backward, "power")


def exp(x) -> Tensor:
    x = constant(x)

    def backward(g, needs):
        return (mul(g, out),)

    out = _node(np.exp(x.data), (x,), backward, "exp")
    return out


def log(x) -> Tensor:
    x = constant(x)

    def backward(g, needs):
        return (div(g, x),)

    return _node(np.log(x.data), (x,), backward, "log")


def sqrt(x) -> Tensor:
    x = constant(x)

    def backward(g, needs):
        return (div(g * 0.5, out),)

    out = _node(np.sqrt(x.data), (x,), backward, "sqrt")
    return out


def sin(x) -> Tensor:
    x = constant(x)

    def backward(g, needs):
        return (mul(g, cos(x)),)

    return _node(np.sin(x.data), (x,), backward, "sin")


def cos(x) -> Tensor:
    x = constant(x)

    def backward(g, needs):
        return (neg(mul(g, sin(x))),)

    return _node(np.cos(x.data), (x,), backward, "cos")


def abs(x) -> Tensor:  # noqa: A001
    x = constant(x)

    def backward(g, needs):
        return (mul(g, Tensor(np.sign(x.data))),)

    return _node(np.abs(x.data), (x,), backward, "abs")


def sigmoid(x) -> Tensor:
    x = constant(x)

    def backward(g, needs):
        return (mul(g, out * (1.0 - out)),)

    out = _node(expit(x.data), (x,), backward, "sigmoid")
    return out


def softplus(x) -> Tensor:
    x = constant(x)

    def backward(g, needs):
        return (mul(g, sigmoid(x)),)

    return _node(np.logaddexp(0.0, x.data), (x,), backward, "softplus")


def elementwise(x, derivatives: Sequence[Callable[[np.ndarray], np.ndarray]], order: int = 0) -> Tensor:
    """Apply a scalar function given as a tower of derivative callables.

    ``derivatives[k]`` evaluates the k-th derivative.  The result can be
    differentiated ``len(derivatives) - 1 - order`` more times.
    """
    x = constant(x)
    if order >= len(derivatives):
        raise ContractViolation(
            f"derivative of order {order} requested; only {len(derivatives) - 1} available"
        )

    def backward(g, needs):
        return (mul(g, elementwise(x, derivatives, order + 1)),)

    return _node(derivatives[order](x.data), (x,), backward, f"elementwise[{order}]")


def _silu_derivative(x: np.ndarray, s: np.ndarray, order: int) -> np.ndarray:
    # s = sigmoid(x), shared by the whole derivative tower
    if order == 0:
        return x * s
    if order == 1:
        return s * (1.0 + x * (1.0 - s))
    a = s * (1.0 - s)
    c = 1.0 - 2.0 * s
    if order == 2:
        return a * (2.0 + x * c)
    return a * (c * (3.0 + x * c) - 2.0 * x * a)


def _silu_k(x: Tensor, s: np.ndarray, order: int) -> Tensor:
    if order > 3:
        raise ContractViolation("silu derivatives beyond third order are not implemented")

    def backward(g, needs):
        return (mul(g, _silu_k(x, s, order + 1)),)

    return _node(_silu_derivative(x.data, s, order), (x,), backward, f"silu[{order}]")


def silu(x) -> Tensor:
    """Self-gated sigmoid-linear activation ``x * sigmoid(x)``."""
    x = constant(x)
    return _silu_k(x, expit(x.data), 0)


# ---------------------------------------------------------------------------
# indexing


class SegmentIndex:
    """Integer ids in ``[0, n)`` plus a cached sparse summation operator.

    The same object serves ``gather`` (read row ``ids[r]`` of an ``n``-row
    tensor) and its adjoint ``segment_sum`` (add row ``r`` into ``ids[r]``).
    """

    __slots__ = ("ids", "n", "_csr")

    def __init__(self, ids, n: int):
        ids = np.asarray(ids)
        if ids.ndim != 1 or (ids.size and ids.dtype.kind not in "iu"):
            raise ContractViolation("segment ids must be a 1-D integer array")
        n = int(n)
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise ContractViolation(f"segment id out of range [0, {n})")
        self.ids = ids.astype(np.int64, copy=False)
        self.n = n
        self._csr = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def csr(self) -> sp.csr_matrix:
        # Row r of the matrix lists contributing rows in ascending order,
        # so the reduction order is fixed.
        if self._csr is None:
            m = len(self.ids)
            self._csr = sp.csr_matrix(
                (np.ones(m), (self.ids, np.arange(m))), shape=(self.n, m)
            )
            self._csr.sort_indices()
        return self._csr

    def sum(self, values: np.ndarray) -> np.ndarray:
        if values.shape[0] != len(self.ids):
            raise ContractViolation(
                f"segment_sum: {values.shape[0]} rows but {len(self.ids)} segment ids"
            )
        if len(self.ids) == 0:
            return np.zeros((self.n,) + values.shape[1:], dtype=values.dtype)
        flat = values.reshape(len(self.ids), -1)
        out = np.asarray(self.csr @ flat)
        return out.reshape((self.n,) + values.shape[1:]).astype(values.dtype, copy=False)


def _as_index(ids, n: int) -> SegmentIndex:
    if isinstance(ids, SegmentIndex):
        if ids.n != n:
            raise ContractViolation(f"segment index built for {ids.n} rows, used with {n}")
        return ids
    return SegmentIndex(ids, n)


def gather(x, ids) -> Tensor:
    """Rows ``x[ids]`` along axis 0."""
    x = constant(x)
    idx = _as_index(ids, x.shape[0])

    def backward(g, needs):
        return (segment_sum(g, idx),)

    return _node(x.data[idx.ids], (x,), backward, "gather")


def segment_sum(values, segment_ids, num_segments: int | None = None) -> Tensor:
    """Sum rows of ``values`` that share a segment id; empty segments give zeros."""
    values = constant(values)
    if isinstance(segment_ids, SegmentIndex):
        if num_segments is not None and num_segments != segment_ids.n:
            raise ContractViolation("num_segments disagrees with the segment index")
        idx = segment_ids
    else:
        if num_segments is None:
            raise ContractViolation("num_segments is required for raw segment ids")
        idx = SegmentIndex(segment_ids, num_segments)

    def backward(g, needs):
        return (gather(g, idx),)

    return _node(idx.sum(values.data), (values,), backward, "segment_sum")


# ---------------------------------------------------------------------------
# differentiation


def _topological_order(output: Tensor) -> list:
    order, visited = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs,
    create_graph: bool = False,
    allow_unused: bool = False,
):
    """Gradient of scalar ``output`` with respect to each tensor in ``inputs``.

    With ``create_graph=True`` the adjoint computation is recorded, so the
    returned gradients can themselves be differentiated.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if not isinstance(output, Tensor) or output.size != 1:
        raise ContractViolation("grad: output must be a scalar tensor")
    for t in inputs:
        if not isinstance(t, Tensor) or not t.requires_grad:
            raise ContractViolation("grad: input is not on the record (requires_grad is False)")

    wanted = {id(t) for t in inputs}
    order = _topological_order(output) if output.requires_grad else []
    relevant: dict[int, bool] = {}
    for node in order:
        relevant[id(node)] = id(node) in wanted or any(
            relevant.get(id(p), False) for p in node._parents
        )

    grads: dict[int, Tensor] = {}
    results: dict[int, Tensor] = {}
    if order:
        grads[id(output)] = Tensor(np.ones_like(output.data))
    with _recording(create_graph):
        for node in reversed(order):
            key = id(node)
            if not relevant[key]:
                continue
            g = grads.pop(key, None)
            if g is None:
                continue
            if key in wanted:
                results[key] = g
            if node._backward is None:
                continue
            needs = tuple(relevant.get(id(p), False) for p in node._parents)
            parent_grads = node._backward(g, needs)
            for p, pg, need in zip(node._parents, parent_grads, needs):
                if pg is None or not need:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)

    out = []
    for t in inputs:
        g = results.get(id(t))
        if g is None:
            if not allow_unused:
                raise ContractViolation("grad: an input does not influence the output")
            g = Tensor(np.zeros_like(t.data))
        out.append(g)
    return out[0] if single else out
