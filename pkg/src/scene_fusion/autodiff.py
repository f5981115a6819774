"""
Scene Fusion - Reverse-mode differentiation over dense matrices.

Every differentiable operation of the library is expressed with the Var
operations in this module. A Var records its parents and a closure that
pushes its output gradient back to them; `backward` walks the recorded graph
in reverse topological order and deposits parameter gradients into a
ParamStore.

A computation graph belongs to one thread. Values are never mutated after an
operation returns.
"""

from __future__ import annotations

import math
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from scene_fusion.errors import (
    ContractError,
    DegenerateRowError,
    DimensionError,
    NonFiniteError,
)
from scene_fusion.tensor import Precision, Tensor2D

ArrayLike = Union[np.ndarray, Tensor2D, float, int, Sequence[Sequence[float]]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

DEFAULT_LEAKY_SLOPE = 0.2


class Var:
    """A node of the computation graph holding a 2-D value."""

    __slots__ = ("_backward", "_parents", "grad", "requires_grad", "source", "value")

    def __init__(
        self,
        value: np.ndarray,
        parents: Tuple[Var, ...] = (),
        backward: Optional[BackwardFn] = None,
        source: Optional[str] = None,
        requires_grad: Optional[bool] = None,
    ):
        if value.ndim != 2:
            raise ContractError(f"Var values are 2-D, got shape {value.shape}")
        if not np.all(np.isfinite(value)):
            raise NonFiniteError("operation produced NaN or Inf")
        self.value = value
        self._parents = parents
        self._backward = backward
        self.source = source
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    # -------------------------------------------------------------------------
    # Introspection
    # -------------------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, int]:
        return (int(self.value.shape[0]), int(self.value.shape[1]))

    @property
    def rows(self) -> int:
        return int(self.value.shape[0])

    @property
    def cols(self) -> int:
        return int(self.value.shape[1])

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 value, got {self.shape}")
        return float(self.value[0, 0])

    def tensor(self) -> Tensor2D:
        return Tensor2D(self.value)

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def detach(self) -> Var:
        """Same value, cut from the graph."""
        return Var(self.value, requires_grad=False)

    def __repr__(self) -> str:
        label = f", source={self.source!r}" if self.source else ""
        return f"Var({self.rows}x{self.cols}{label})"

    # -------------------------------------------------------------------------
    # Operators
    # -------------------------------------------------------------------------

    def __matmul__(self, other: Var) -> Var:
        return matmul(self, other)

    def __add__(self, other: Union[Var, float]) -> Var:
        return add(self, _lift(other, self))

    def __radd__(self, other: float) -> Var:
        return add(_lift(other, self), self)

    def __sub__(self, other: Union[Var, float]) -> Var:
        return sub(self, _lift(other, self))

    def __rsub__(self, other: float) -> Var:
        return sub(_lift(other, self), self)

    def __mul__(self, other: Union[Var, float]) -> Var:
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: float) -> Var:
        return scale(self, float(other))

    def __truediv__(self, other: float) -> Var:
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> Var:
        return scale(self, -1.0)

    @property
    def T(self) -> Var:  # noqa: N802
        return transpose(self)


def _lift(value: Union[Var, float], like: Var) -> Var:
    if isinstance(value, Var):
        return value
    return constant(np.full((1, 1), float(value), dtype=like.dtype))


def constant(value: ArrayLike, precision: Optional[Precision] = None) -> Var:
    """Wrap a value that takes no gradient."""
    return Var(_as_array(value, precision), requires_grad=False)


def variable(
    value: ArrayLike, precision: Optional[Precision] = None, source: Optional[str] = None
) -> Var:
    """Wrap a value that takes a gradient (a leaf)."""
    return Var(_as_array(value, precision), source=source, requires_grad=True)


def _as_array(value: ArrayLike, precision: Optional[Precision]) -> np.ndarray:
    if isinstance(value, Tensor2D):
        array = value.data
    elif isinstance(value, np.ndarray):
        array = value
    elif isinstance(value, (int, float)):
        array = np.array([[float(value)]])
    else:
        array = np.array(value, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if precision is not None:
        array = array.astype(precision.dtype, copy=False)
    elif array.dtype not in (np.float32, np.float64):
        array = array.astype(np.float64)
    return array


def _make(value: np.ndarray, parents: Tuple[Var, ...], backward: BackwardFn) -> Var:
    return Var(value, parents, backward)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


def _broadcast_shape(op: str, a: Var, b: Var) -> Tuple[int, int]:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None
    return (int(shape[0]), int(shape[1]))


# =============================================================================
# Linear algebra
# =============================================================================


def matmul(a: Var, b: Var) -> Var:
    """Matrix product a @ b."""
    if a.cols != b.rows:
        raise DimensionError("matmul", a.shape, b.shape)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return g @ b.value.T, a.value.T @ g

    return _make(a.value @ b.value, (a, b), backward)


def add(a: Var, b: Var) -> Var:
    """Elementwise sum with row/column broadcasting."""
    _broadcast_shape("add", a, b)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), backward)


def sub(a: Var, b: Var) -> Var:
    """Elementwise difference with broadcasting."""
    _broadcast_shape("sub", a, b)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, (a, b), backward)


def mul(a: Var, b: Var) -> Var:
    """Elementwise (Hadamard) product with broadcasting."""
    _broadcast_shape("mul", a, b)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, (a, b), backward)


def scale(a: Var, factor: float) -> Var:
    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * factor,)

    return _make(a.value * a.dtype.type(factor), (a,), backward)


def transpose(a: Var) -> Var:
    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g.T,)

    return _make(np.ascontiguousarray(a.value.T), (a,), backward)


# =============================================================================
# Structural operations
# =============================================================================


def concat_cols(parts: Sequence[Var]) -> Var:
    """Horizontal concatenation [a | b | ...]."""
    if not parts:
        raise ContractError("concat_cols needs at least one operand")
    rows = parts[0].rows
    for p in parts[1:]:
        if p.rows != rows:
            raise DimensionError("concat_cols", parts[0].shape, p.shape)
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def backward(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(np.hstack([p.value for p in parts]), tuple(parts), backward)


def concat_rows(parts: Sequence[Var]) -> Var:
    """Vertical concatenation."""
    if not parts:
        raise ContractError("concat_rows needs at least one operand")
    cols = parts[0].cols
    for p in parts[1:]:
        if p.cols != cols:
            raise DimensionError("concat_rows", parts[0].shape, p.shape)
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def backward(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(np.vstack([p.value for p in parts]), tuple(parts), backward)


def slice_cols(a: Var, start: int, stop: int) -> Var:
    if not 0 <= start < stop <= a.cols:
        raise ContractError(f"column slice [{start}:{stop}] outside 0..{a.cols}")

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros_like(a.value)
        out[:, start:stop] = g
        return (out,)

    return _make(a.value[:, start:stop].copy(), (a,), backward)


def slice_rows(a: Var, start: int, stop: int) -> Var:
    if not 0 <= start < stop <= a.rows:
        raise ContractError(f"row slice [{start}:{stop}] outside 0..{a.rows}")

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros_like(a.value)
        out[start:stop] = g
        return (out,)

    return _make(a.value[start:stop].copy(), (a,), backward)


def take_rows(a: Var, indices: Sequence[int]) -> Var:
    """Gather rows by index (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= a.rows:
        raise ContractError(f"row indices outside 0..{a.rows - 1}")

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), backward)


def pick(a: Var, columns: Sequence[int]) -> Var:
    """Column `columns[i]` of row i, as an n x 1 column."""
    idx = np.asarray(columns, dtype=np.intp)
    if idx.shape != (a.rows,):
        raise DimensionError("pick", a.shape, (idx.size,))
    if idx.min() < 0 or idx.max() >= a.cols:
        raise ContractError(f"picked column outside 0..{a.cols - 1}")
    rows = np.arange(a.rows)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros_like(a.value)
        out[rows, idx] = g[:, 0]
        return (out,)

    return _make(a.value[rows, idx].reshape(-1, 1), (a,), backward)


# =============================================================================
# Reductions
# =============================================================================


def sum_all(a: Var) -> Var:
    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.full_like(a.value, g[0, 0]),)

    return _make(a.value.sum(dtype=a.dtype).reshape(1, 1), (a,), backward)


def mean_all(a: Var) -> Var:
    n = a.rows * a.cols
    return scale(sum_all(a), 1.0 / n)


def column_max(a: Var) -> Var:
    """Column-wise max as 1 x cols; gradient flows to the first argmax."""
    arg = np.argmax(a.value, axis=0)
    cols = np.arange(a.cols)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros_like(a.value)
        out[arg, cols] = g[0]
        return (out,)

    return _make(a.value[arg, cols].reshape(1, -1), (a,), backward)


# =============================================================================
# Elementwise nonlinearities
# =============================================================================


class ActivationKind(Enum):
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    IDENTITY = "identity"
    GELU = "gelu"


def activation(
    x: Var,
    kind: Union[ActivationKind, str] = ActivationKind.RELU,
    slope: float = DEFAULT_LEAKY_SLOPE,
) -> Var:
    """Apply an elementwise activation; relu takes subgradient 0 at 0."""
    kind = ActivationKind(kind)
    if kind is ActivationKind.IDENTITY:
        return x
    if kind is ActivationKind.RELU:
        return relu(x)
    if kind is ActivationKind.LEAKY_RELU:
        return leaky_relu(x, slope)
    return gelu(x)


def relu(x: Var) -> Var:
    positive = x.value > 0

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * positive,)

    return _make(np.where(positive, x.value, 0).astype(x.dtype), (x,), backward)


def leaky_relu(x: Var, slope: float = DEFAULT_LEAKY_SLOPE) -> Var:
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    positive = x.value > 0
    factor = np.where(positive, 1.0, slope).astype(x.dtype)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * factor,)

    return _make(x.value * factor, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Var) -> Var:
    """tanh-approximated GELU."""
    v = x.value
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * d_inner),)

    return _make((0.5 * v * (1.0 + t)).astype(x.dtype), (x,), backward)


def exp(x: Var) -> Var:
    out = np.exp(x.value)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * out,)

    return _make(out, (x,), backward)


def log(x: Var) -> Var:
    if np.any(x.value <= 0):
        raise ContractError("log of a non-positive value")

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g / x.value,)

    return _make(np.log(x.value), (x,), backward)


# =============================================================================
# Row-wise normalizations
# =============================================================================


def rowwise_softmax(x: Var, mask: Optional[np.ndarray] = None) -> Var:
    """Softmax along each row; masked-out entries (mask False) are exactly 0."""
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError("rowwise_softmax mask", x.shape, mask.shape)
        empty = np.flatnonzero(~mask.any(axis=1))
        if empty.size:
            raise DegenerateRowError(empty.tolist())
        masked = np.where(mask, x.value, -np.inf)
    else:
        masked = x.value
    shifted = masked - masked.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    out = (e / e.sum(axis=1, keepdims=True)).astype(x.dtype)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), backward)


def log_softmax_rows(x: Var) -> Var:
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _make(out, (x,), backward)


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    if gamma.shape != (1, x.cols) or beta.shape != (1, x.cols):
        raise DimensionError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.value.mean(axis=1, keepdims=True)
    centered = x.value - mu
    var = (centered**2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    n = x.cols

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        gx_hat = g * gamma.value
        gx = (
            inv
            / n
            * (
                n * gx_hat
                - gx_hat.sum(axis=1, keepdims=True)
                - xhat * (gx_hat * xhat).sum(axis=1, keepdims=True)
            )
        )
        return (
            gx,
            (g * xhat).sum(axis=0, keepdims=True),
            g.sum(axis=0, keepdims=True),
        )

    out = (xhat * gamma.value + beta.value).astype(x.dtype)
    return _make(out, (x, gamma, beta), backward)


def l2_normalize_rows(x: Var, eps: float = 1e-12) -> Var:
    norm = np.sqrt((x.value**2).sum(axis=1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.value / denom

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - out * dot) / denom,)

    return _make(out, (x,), backward)


# =============================================================================
# Reverse pass
# =============================================================================


def _topological_order(root: Var) -> List[Var]:
    order: List[Var] = []
    seen = set()
    stack: List[Tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(loss: Var) -> List[Var]:
    """Run the reverse pass from a scalar and return the leaves reached.

    Every returned leaf has its `grad` populated.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    leaves: List[Var] = []
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if node._backward is None:
            leaves.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = pg.astype(parent.dtype, copy=False)
            parent.grad = pg if parent.grad is None else parent.grad + pg
    return leaves


__all__ = [
    "DEFAULT_LEAKY_SLOPE",
    "ActivationKind",
    "Var",
    "activation",
    "add",
    "column_max",
    "concat_cols",
    "concat_rows",
    "constant",
    "exp",
    "gelu",
    "grad",
    "l2_normalize_rows",
    "layer_norm",
    "leaky_relu",
    "log",
    "log_softmax_rows",
    "matmul",
    "mean_all",
    "mul",
    "pick",
    "relu",
    "rowwise_softmax",
    "scale",
    "slice_cols",
    "slice_rows",
    "sub",
    "sum_all",
    "take_rows",
    "transpose",
    "variable",
]
