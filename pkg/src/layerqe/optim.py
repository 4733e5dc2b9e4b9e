"""Optimizers over :class:`~layerqe.autodiff.Tensor` parameters."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from layerqe.autodiff import Tensor, global_grad_norm
from layerqe.errors import ConfigError

_logger = logging.getLogger(__name__)


class OptimizerKind(str, Enum):
    ADAMW = "adamw"
    SGD = "sgd"


@dataclass
class AdamState:
    """First/second moments per parameter, created lazily as zeros."""

    step: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One AdamW update in place.

    Weight decay is decoupled: ``p <- p - lr * wd * p`` is applied before, and
    independently of, the bias-corrected Adam step.
    """
    if len(params) != len(grads):
        raise ConfigError(f"{len(params)} parameter(s) but {len(grads)} gradient(s)")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {p.name} {p.shape}")
        if i not in state.m:
            state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        m = state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        v = state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        if weight_decay:
            p.data -= (lr * weight_decay) * p.data
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


class Optimizer:
    """Binds a parameter list to an update rule."""

    def __init__(
        self,
        params: Sequence[Tensor],
        kind: OptimizerKind = OptimizerKind.ADAMW,
        *,
        lr: float = 2e-4,
        weight_decay: float = 0.0,
    ):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {weight_decay}")
        self.params: List[Tensor] = list(params)
        self.kind = OptimizerKind(kind)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        if self.kind is OptimizerKind.ADAMW:
            adamw_step(self.params, grads, self.state, self.lr, self.weight_decay)
            return
        self.state.step += 1
        for p, g in zip(self.params, grads):
            if g is None:
                continue
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= (self.lr * g).astype(p.dtype)
