"""
Scene Fusion - Named parameters, gradient deposit and gradient checking.

A ParamStore maps unique names to (value, gradient) pairs. Models read their
weights through `ParamStore.var`, which hands out graph leaves tagged with the
parameter name; `backward` runs the reverse pass and adds each leaf's gradient
into the matching slot.

A store may be shared read-only between threads for inference. Gradient
accumulation and optimizer updates belong to a single writer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from scene_fusion.autodiff import Var, grad, variable
from scene_fusion.errors import ContractError, EvaluationError, NonFiniteError
from scene_fusion.tensor import Precision, Tensor2D

logger = logging.getLogger(__name__)


@dataclass
class Parameter:
    """One trainable tensor and its accumulated gradient."""

    value: Tensor2D
    grad: Tensor2D

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape


class ParamStore:
    """Ordered name -> Parameter map with unique names."""

    def __init__(self, precision: Precision = Precision.DEFAULT):
        self.precision = precision
        self._entries: Dict[str, Parameter] = {}

    # -------------------------------------------------------------------------
    # Registration and lookup
    # -------------------------------------------------------------------------

    def add(self, name: str, value: Tensor2D) -> Tensor2D:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        value = value.astype(self.precision)
        self._entries[name] = Parameter(
            value, Tensor2D.zeros(value.rows, value.cols, self.precision)
        )
        return value

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Parameter:
        try:
            return self._entries[name]
        except KeyError:
            raise ContractError(f"unknown parameter {name!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> List[str]:
        return list(self._entries)

    def items(self) -> Iterator[Tuple[str, Parameter]]:
        return iter(self._entries.items())

    def value(self, name: str) -> Tensor2D:
        return self[name].value

    def var(self, name: str) -> Var:
        """Graph leaf for a parameter; gradients flow back by name."""
        return variable(self[name].value.data, source=name)

    def set_value(self, name: str, value: Union[Tensor2D, np.ndarray]) -> None:
        entry = self[name]
        tensor = value if isinstance(value, Tensor2D) else Tensor2D(value)
        if tensor.shape != entry.shape:
            raise ContractError(
                f"parameter {name!r} has shape {entry.shape}, got {tensor.shape}"
            )
        entry.value = tensor.astype(self.precision)

    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(p.value.rows * p.value.cols for p in self._entries.values())

    # -------------------------------------------------------------------------
    # Namespaces
    # -------------------------------------------------------------------------

    def subset(self, prefix: str) -> ParamStore:
        """A store sharing the Parameter objects whose names start with prefix."""
        view = ParamStore(self.precision)
        for name, entry in self._entries.items():
            if name.startswith(prefix):
                view._entries[name] = entry
        return view

    def merge(self, other: ParamStore) -> ParamStore:
        """Add every parameter of `other` (shared, not copied)."""
        for name, entry in other._entries.items():
            if name in self._entries:
                raise ContractError(f"duplicate parameter name {name!r}")
            self._entries[name] = entry
        return self

    def snapshot(self) -> Dict[str, Tensor2D]:
        return {name: entry.value for name, entry in self._entries.items()}

    def restore(self, values: Dict[str, Tensor2D]) -> None:
        for name, value in values.items():
            self.set_value(name, value)

    def zero_grad(self) -> None:
        for entry in self._entries.values():
            entry.grad = Tensor2D.zeros(entry.value.rows, entry.value.cols, self.precision)

    def astype(self, precision: Precision) -> ParamStore:
        """Copy of the store in another precision (gradients reset)."""
        out = ParamStore(precision)
        for name, entry in self._entries.items():
            out.add(name, entry.value.astype(precision))
        return out


def ensure_params(params: ParamStore, shapes: Dict[str, Tuple[int, int]]) -> None:
    """Check that a supplied store holds every expected parameter and shape."""
    missing = [name for name in shapes if name not in params]
    if missing:
        raise ContractError(f"missing parameters: {', '.join(missing)}")
    for name, shape in shapes.items():
        if params[name].shape != tuple(shape):
            raise ContractError(
                f"parameter {name!r} has shape {params[name].shape}, expected {tuple(shape)}"
            )


# =============================================================================
# Gradient deposit
# =============================================================================


def backward(loss: Var, params: ParamStore) -> None:
    """Accumulate d(loss)/d(param) into every gradient slot of `params`.

    Parameters the loss does not reach receive a zero contribution. Calling
    twice without `zero_grad` adds the two gradients.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    totals: Dict[str, np.ndarray] = {}
    for leaf in grad(loss):
        if leaf.source is None or leaf.source not in params:
            continue
        g = leaf.grad
        totals[leaf.source] = g if leaf.source not in totals else totals[leaf.source] + g
    for name, g in totals.items():
        entry = params[name]
        updated = entry.grad.data + g.astype(params.precision.dtype, copy=False)
        if not np.all(np.isfinite(updated)):
            raise NonFiniteError(f"gradient of {name!r} is not finite")
        entry.grad = Tensor2D(updated)


# =============================================================================
# Initialization
# =============================================================================


class InitScheme(Enum):
    XAVIER_UNIFORM = "xavier_uniform"
    ZEROS = "zeros"
    CONSTANT = "constant"


def init_params(
    shape: Tuple[int, int],
    scheme: Union[InitScheme, str] = InitScheme.XAVIER_UNIFORM,
    rng_seed: Union[int, np.random.Generator] = 0,
    constant: float = 0.0,
    precision: Precision = Precision.DEFAULT,
) -> Tensor2D:
    """Create an initial parameter tensor.

    Args:
        shape: (rows, cols), both positive; rows is fan_in, cols is fan_out.
        scheme: xavier_uniform, zeros or constant.
        rng_seed: Seed or generator; identical seeds give bit-identical draws.
        constant: Fill value for the constant scheme.
        precision: Storage precision.

    Returns:
        The initialized tensor.
    """
    rows, cols = shape
    if rows < 1 or cols < 1:
        raise ContractError(f"parameter shape must be positive, got {shape}")
    scheme = InitScheme(scheme)
    if scheme is InitScheme.ZEROS:
        return Tensor2D.zeros(rows, cols, precision)
    if scheme is InitScheme.CONSTANT:
        return Tensor2D.full(rows, cols, constant, precision)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    bound = math.sqrt(6.0 / (rows + cols))
    draws = rng.uniform(-bound, bound, size=(rows, cols))
    return Tensor2D(draws.astype(precision.dtype))


# =============================================================================
# Finite-difference oracle
# =============================================================================


def finite_difference_check(
    f: Callable[[ParamStore], Var],
    params: ParamStore,
    step: float = 1e-5,
    names: Optional[List[str]] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The relative error of each entry uses the denominator
    max(|analytic|, |numeric|, 1e-8). Gradient slots are reset first.
    """
    if step <= 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    if params.precision is not Precision.TEST:
        raise ContractError("finite-difference checks need 64-bit (test) precision")

    def evaluate() -> float:
        out = f(params)
        if out.shape != (1, 1):
            raise ContractError(f"checked function must return a scalar, got {out.shape}")
        value = out.item()
        if not math.isfinite(value):
            raise EvaluationError("checked function returned a non-finite value")
        return value

    params.zero_grad()
    try:
        loss = f(params)
    except NonFiniteError as exc:
        raise EvaluationError(str(exc)) from exc
    backward(loss, params)

    worst = 0.0
    for name in names if names is not None else params.names():
        entry = params[name]
        analytic = entry.grad.data
        base = entry.value.data.copy()
        for index in np.ndindex(base.shape):
            probe = base.copy()
            probe[index] = base[index] + step
            params.set_value(name, probe)
            try:
                plus = evaluate()
                probe[index] = base[index] - step
                params.set_value(name, probe)
                minus = evaluate()
            except NonFiniteError as exc:
                raise EvaluationError(str(exc)) from exc
            finally:
                params.set_value(name, base)
            numeric = (plus - minus) / (2.0 * step)
            a = float(analytic[index])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    logger.debug("finite-difference check over %d params: %.3e", len(params), worst)
    return worst


__all__ = [
    "InitScheme",
    "ParamStore",
    "Parameter",
    "backward",
    "ensure_params",
    "finite_difference_check",
    "init_params",
]
