"""N-dimensional float tensor with reverse-mode automatic differentiation.

Every differentiable operation produces a new :class:`Tensor` that remembers
its parents and a closure computing the local vector-Jacobian product.
:func:`backward` visits the reachable nodes in exact reverse creation order
and accumulates gradients into leaf tensors.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from collections.abc import Callable, Iterator, Sequence

import numpy as np

PRECISIONS = {"single": np.float32, "double": np.float64}

_default_dtype: type = np.float32
_grad_enabled = True
_node_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class PrecisionError(TypeError):
    """Raised when tensors of different precision meet in one graph."""


def get_default_dtype() -> type:
    return _default_dtype


def set_default_precision(mode: str) -> None:
    global _default_dtype
    if mode not in PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(PRECISIONS)}")
    _default_dtype = PRECISIONS[mode]


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    previous = _default_dtype
    set_default_precision(mode)
    try:
        yield
    finally:
        globals()["_default_dtype"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference, finite differences)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Float array plus the bookkeeping needed for backpropagation.

    Tensors are treated as immutable once they take part in a graph; the
    optimizer is the only code that rewrites ``data`` of leaf parameters.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                               and data.dtype in (np.float32, np.float64)
                                               else _default_dtype))
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_node_ids)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def create(shape: Sequence[int], fill=0.0, requires_grad: bool = False, dtype=None) -> Tensor:
    """Build a tensor of ``shape`` from a scalar or a flat/nested array fill."""
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {list(shape)}")
    dtype = dtype or _default_dtype
    expected = int(np.prod(shape))
    if np.isscalar(fill):
        data = np.full(shape, fill, dtype=dtype)
    else:
        flat = np.asarray(fill, dtype=dtype).reshape(-1)
        if flat.size != expected:
            raise ShapeError(f"expected {expected} elements, got {flat.size}")
        data = flat.reshape(shape)
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap a forward result, attaching graph information if any parent needs it."""
    out = Tensor(out_data, dtype=out_data.dtype)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_precision(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise PrecisionError(f"mixed precision in one graph: {sorted(d.name for d in dtypes)}")


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _operand_view(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a rank-1 operand matching the channel axis of a rank-4 one is a per-channel vector
    if a.ndim == 4 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return b.reshape(1, -1, 1, 1)
    return b


def ewise_shape(a_shape: Sequence[int], b_shape: Sequence[int]) -> tuple[int, ...]:
    a_shape, b_shape = tuple(a_shape), tuple(b_shape)
    if len(a_shape) == 4 and len(b_shape) == 1 and b_shape[0] == a_shape[1]:
        b_shape = (1, b_shape[0], 1, 1)
    try:
        return tuple(np.broadcast_shapes(a_shape, b_shape))
    except ValueError:
        raise ShapeError(f"incompatible shapes {list(a_shape)} and {list(b_shape)}") from None


def _ewise(kind: str, a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_precision(a, b)
    ewise_shape(a.shape, b.shape)
    bv = _operand_view(a.data, b.data)
    av, bshape = a.data, b.shape
    if kind == "add":
        out = av + bv
    elif kind == "sub":
        out = av - bv
    elif kind == "mul":
        out = av * bv
    else:
        raise ValueError(f"unknown element-wise op {kind!r}")

    def backward_fn(g):
        if kind == "add":
            ga, gb = g, g
        elif kind == "sub":
            ga, gb = g, -g
        else:
            ga, gb = g * bv, g * av
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, tuple(bv.shape)).reshape(bshape)

    return _record(out, (a, b), backward_fn, kind)


def add(a: Tensor, b) -> Tensor:
    return _ewise("add", a, b)


def sub(a: Tensor, b) -> Tensor:
    return _ewise("sub", a, b)


def mul(a: Tensor, b) -> Tensor:
    return _ewise("mul", a, b)


def ewise(op: str, a: Tensor, b) -> Tensor:
    return _ewise(op, a, b)


def neg(x: Tensor) -> Tensor:
    return _record(-x.data, (x,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _record(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient passes only where the input was inside [lo, hi]."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _record(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def sum_all(x: Tensor) -> Tensor:
    total = np.asarray(x.data.sum(dtype=x.dtype), dtype=x.dtype).reshape(1)
    return _record(total, (x,), lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),), "sum_all")


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Sum of w_i * x_i over one-element tensors, correctly rounded (order independent)."""
    terms = list(terms)
    if len(terms) != len(weights):
        raise ShapeError(f"{len(terms)} terms but {len(weights)} weights")
    for t in terms:
        if t.size != 1:
            raise ShapeError(f"weighted_sum needs one-element terms, got shape {list(t.shape)}")
    _check_precision(*terms)
    dtype = terms[0].dtype
    total = math.fsum(float(t.data.reshape(-1)[0]) * float(w) for t, w in zip(terms, weights))
    out = np.array([total], dtype=dtype)

    def backward_fn(g):
        return tuple((g * w).astype(dtype).reshape(t.shape) for t, w in zip(terms, weights))

    return _record(out, terms, backward_fn, "weighted_sum")


def mean(x: Tensor) -> Tensor:
    return mul(sum_all(x), 1.0 / x.size)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat_shape(shapes: Sequence[Sequence[int]]) -> tuple[int, ...]:
    shapes = [tuple(s) for s in shapes]
    if not shapes:
        raise ShapeError("concat needs at least one part")
    for s in shapes:
        if len(s) != 4:
            raise ShapeError(f"concat expects rank-4 N,C,H,W parts, got {list(s)}")
        if (s[0], s[2], s[3]) != (shapes[0][0], shapes[0][2], shapes[0][3]):
            raise ShapeError(f"batch/spatial mismatch: {list(shapes[0])} vs {list(s)}")
    n, _, h, w = shapes[0]
    return n, int(np.sum([s[1] for s in shapes])), h, w


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-4 tensors along the channel axis in order."""
    parts = list(parts)
    concat_shape([p.shape for p in parts])
    _check_precision(*parts)
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)

    def backward_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(out, parts, backward_fn, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 4 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"bad channel slice [{start}:{stop}] of shape {list(x.shape)}")

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _record(x.data[:, start:stop].copy(), (x,), backward_fn, "slice_channels")


def _topological(loss: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen.add(node._id)
        nodes.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    nodes.sort(key=lambda t: t._id, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves keep summing across calls until :meth:`Tensor.zero_grad`; interior
    gradients live only for the duration of the pass.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in _topological(loss):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6, seed: int = 0) -> float:
    """Compare the analytic gradient of ``f`` at ``x`` with central differences.

    Non-scalar outputs are contracted with a fixed random weighting first, so
    that sum-invariant layers (batch norm) still expose their full Jacobian.
    Returns max |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    """
    if x.dtype != np.float64:
        raise PrecisionError("grad_check requires double precision; single precision noise exceeds the signal")
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    projection: list[np.ndarray | None] = [None]

    def scalar(out: Tensor) -> Tensor:
        if out.size == 1:
            return out
        if projection[0] is None:
            projection[0] = np.random.default_rng(seed).standard_normal(out.shape)
        return sum_all(mul(out, Tensor(projection[0], dtype=np.float64)))

    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    loss = scalar(f(x))
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    x.requires_grad = was

    numeric = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = scalar(f(x)).item()
            flat[i] = orig - eps
            down = scalar(f(x)).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(err.max())


# Shape-only evaluation: one rule per op, mirroring what execution produces.
SHAPE_RULES: dict[str, Callable[..., tuple[int, ...]]] = {
    "add": ewise_shape,
    "sub": ewise_shape,
    "mul": ewise_shape,
    "relu": lambda s: tuple(s),
    "sigmoid": lambda s: tuple(s),
    "log": lambda s: tuple(s),
    "clip": lambda s, lo=0.0, hi=1.0: tuple(s),
    "sum_all": lambda s: (1,),
    "concat_channels": lambda *shapes: concat_shape(shapes),
    "slice_channels": lambda s, start, stop: (s[0], stop - start, s[2], s[3]),
}


def infer_shape(op: str, *shapes, **kwargs) -> tuple[int, ...]:
    """Output shape of ``op`` for the given input shapes, without touching data."""
    try:
        rule = SHAPE_RULES[op]
    except KeyError:
        raise ValueError(f"no shape rule for op {op!r}") from None
    return tuple(int(d) for d in rule(*shapes, **kwargs))
