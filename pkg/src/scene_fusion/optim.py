"""
Scene Fusion - Optimizers.

Both optimizers update every parameter of the store they are given and zero
its gradients afterwards; frozen parameters are kept out by passing a
namespaced view (`ParamStore.subset`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Union

import numpy as np

from scene_fusion.errors import ConfigError
from scene_fusion.params import ParamStore

logger = logging.getLogger(__name__)


class OptimizerKind(Enum):
    SGD = "sgd"
    ADAM = "adam"


def sgd_step(params: ParamStore, lr: float, weight_decay: float = 0.0) -> None:
    """w <- w - lr * (grad + weight_decay * w)."""
    for name, entry in params.items():
        w = entry.value.data
        params.set_value(name, w - lr * (entry.grad.data + weight_decay * w))
    params.zero_grad()


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: ParamStore,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    t: Optional[int] = None,
) -> None:
    """One bias-corrected Adam update; weight decay is added to the gradient first."""
    state.t = state.t + 1 if t is None else t
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.t
    correction2 = 1.0 - b2**state.t
    for name, entry in params.items():
        w = entry.value.data
        g = entry.grad.data + weight_decay * w
        m = b1 * state.m.get(name, np.zeros_like(w)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(w)) + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        params.set_value(name, w - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    params.zero_grad()


class Optimizer:
    """Stateful wrapper choosing SGD or Adam from a config."""

    def __init__(
        self,
        kind: Union[OptimizerKind, str],
        learning_rate: float,
        weight_decay: float = 0.0,
    ):
        self.kind = OptimizerKind(kind)
        if learning_rate < 0 or weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.state = AdamState()

    def step(self, params: ParamStore) -> None:
        if self.kind is OptimizerKind.SGD:
            sgd_step(params, self.learning_rate, self.weight_decay)
        else:
            adam_step(params, self.state, self.learning_rate, self.weight_decay)


__all__ = ["AdamState", "Optimizer", "OptimizerKind", "adam_step", "sgd_step"]
