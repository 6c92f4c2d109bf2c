"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class OptimizerError(RuntimeError):
    pass


def cosine_lr(step: int, total_steps: int, lr0: float, min_ratio: float = 0.0) -> float:
    """Half-cosine from ``lr0`` at step 0 to ``min_ratio * lr0`` at step ``total_steps - 1``."""
    if total_steps <= 1:
        return lr0
    t = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    lo = min_ratio * lr0
    return lo + 0.5 * (lr0 - lo) * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam moments with weight decay applied directly to the weights.

    Decay is applied only to tensors with two or more dimensions; gains,
    biases and scalar temperatures are left undecayed.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, grad_clip: float | None = None):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise OptimizerError("parameter list contains duplicates")
        frozen = [i for i, p in enumerate(self.params) if not p.requires_grad]
        if frozen:
            raise OptimizerError(f"{len(frozen)} frozen tensor(s) passed to the optimizer")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params if p.grad is not None))

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        clip = 1.0
        if self.grad_clip is not None:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                clip = self.grad_clip / (norm + 1e-12)
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if T.DEBUG and not p.requires_grad:
                raise OptimizerError("optimizer asked to update a frozen tensor")
            if p.grad is None:
                continue
            g = p.grad * clip if clip != 1.0 else p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                p.data *= p.dtype.type(1.0 - lr * self.weight_decay)
            p.data -= (lr * update).astype(p.dtype, copy=False)
