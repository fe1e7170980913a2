"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamWHyper:
    lr: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05


def no_decay(name: str, param: Tensor) -> bool:
    """Biases, norm parameters and tokens are exempt from weight decay."""
    return param.ndim < 2


@dataclass
class AdamW:
    """Keeps first/second moments keyed by parameter name."""

    named: dict[str, Tensor]
    hyper: AdamWHyper = field(default_factory=AdamWHyper)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        for name, p in self.named.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def zero_grad(self) -> None:
        for p in self.named.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.hyper.lr if lr is None else lr
        self.step_count += 1
        for name, p in self.named.items():
            wd = 0.0 if no_decay(name, p) else self.hyper.weight_decay
            adamw_update(p.data, p.grad, self.m[name], self.v[name], self.step_count,
                         lr, self.hyper, wd)


def adamw_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
                 lr: float, hyper: AdamWHyper, weight_decay: float | None = None) -> None:
    """One in-place AdamW update at step ``t`` (1-based)."""
    if param.shape != grad.shape or param.shape != m.shape or param.shape != v.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}")
    wd = hyper.weight_decay if weight_decay is None else weight_decay
    b1, b2 = hyper.beta1, hyper.beta2
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    if wd:
        param *= 1.0 - lr * wd
    param -= (lr * mhat / (np.sqrt(vhat) + hyper.eps)).astype(param.dtype, copy=False)


def warmup_cosine(step: int, total: int, base_lr: float, warmup: int, min_lr: float = 0.0) -> float:
    """Linear warmup to ``base_lr`` then half-cosine decay to ``min_lr`` at ``total``."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))
