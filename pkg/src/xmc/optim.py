"""AdamW with decoupled weight decay, gradient clipping and SWA averaging."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingStateError
from .tensor import Tensor

# Parameter-name leaves that are exempt from weight decay by default
# (biases and layer-norm gains/shifts).
DECAY_EXEMPT_LEAVES = frozenset({"b", "b1", "b2", "b_g", "b_h", "beta", "gamma"})


def is_decay_exempt(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in DECAY_EXEMPT_LEAVES


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the decoupled-decay bookkeeping."""

    learning_rate: float
    weight_decay: float
    decay_exempt: set[str] = field(default_factory=set)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """One AdamW update over all parameters, in place.

    Decoupled weight decay is applied only to parameters not in
    ``state.decay_exempt``.  Every parameter must carry a gradient.
    """
    for name, p in params.items():
        if p.grad is None:
            raise TrainingStateError(f"adamw_step: parameter '{name}' has no gradient")

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    lr = state.learning_rate

    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay != 0.0 and name not in state.decay_exempt:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def clip_grads(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass
class SwaState:
    """Running arithmetic mean of parameter snapshots."""

    start_epoch: int
    count: int = 0
    average: dict[str, np.ndarray] = field(default_factory=dict)


def swa_update(state: SwaState, params: dict[str, Tensor]) -> SwaState:
    """Fold the current parameters into the running mean: avg += (p - avg)/(n+1)."""
    n = state.count
    for name, p in params.items():
        if name not in state.average:
            state.average[name] = np.zeros_like(p.data)
        avg = state.average[name]
        avg += (p.data - avg) / (n + 1)
    state.count = n + 1
    return state
