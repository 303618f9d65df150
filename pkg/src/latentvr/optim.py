"""AdamW with decoupled weight decay, plus the learning-rate profiles."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import Tensor

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_ratio: float = 0.0
    schedule: str = "constant"  # or "cosine"
    grad_clip: float | None = 1.0


def large_model_profile() -> OptimizerConfig:
    """Large-model Stage-2 settings: 5e-6, decay 0.1, 3% warmup, cosine."""
    return OptimizerConfig(lr=5e-6, weight_decay=0.1, warmup_ratio=0.03, schedule="cosine")


def lr_at(cfg: OptimizerConfig, step: int, total_steps: int | None) -> float:
    """Learning rate for 0-based ``step``."""
    if total_steps is None or total_steps <= 0:
        return cfg.lr
    warm = int(math.ceil(cfg.warmup_ratio * total_steps))
    if warm and step < warm:
        return cfg.lr * (step + 1) / warm
    if cfg.schedule == "cosine":
        span = max(total_steps - warm, 1)
        frac = min(max(step - warm, 0) / span, 1.0)
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    return cfg.lr


class AdamW:
    """Moment-tracked first-order update with decoupled weight decay.

    ``params`` maps names to leaf tensors; only names listed in ``trainable``
    (default: all) are updated.  A step whose gradients contain NaN/Inf is
    skipped and counted in ``skipped_steps``.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        cfg: OptimizerConfig,
        trainable: list[str] | None = None,
        total_steps: int | None = None,
    ):
        self.params = dict(params)
        self.cfg = cfg
        self.names = list(trainable) if trainable is not None else list(self.params)
        self.total_steps = total_steps
        self.m = {n: np.zeros_like(self.params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(self.params[n].data) for n in self.names}
        self.t = 0
        self.skipped_steps = 0
        self.events: list[str] = []

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(self.params[n].grad ** 2)) for n in self.names))

    def step(self, grads: Mapping[str, np.ndarray] | None = None) -> bool:
        """Apply one update. Returns False if it was skipped."""
        if grads is None:
            grads = {n: self.params[n].grad for n in self.names}
        for n in self.names:
            if not np.all(np.isfinite(grads[n])):
                self.skipped_steps += 1
                msg = f"non-finite gradient in {n}; step skipped"
                self.events.append(msg)
                log.warning(msg)
                return False
        scale = 1.0
        if self.cfg.grad_clip is not None:
            norm = math.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in self.names))
            if norm > self.cfg.grad_clip:
                scale = self.cfg.grad_clip / norm
        lr = lr_at(self.cfg, self.t, self.total_steps)
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for n in self.names:
            p = self.params[n]
            g = grads[n] * scale
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.cfg.eps)
            if self.cfg.weight_decay:
                p.data *= 1.0 - lr * self.cfg.weight_decay
            p.data -= lr * update
        return True

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()}, "v": {k: v.copy() for k, v in self.v.items()}}
