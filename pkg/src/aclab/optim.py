"""AdamW with global-norm gradient clipping and linear warmup."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class AdamWConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    grad_clip_norm: float = 10.0
    warmup_steps: int = 0
    decay: str = "constant"  # constant | cosine
    total_steps: int = 0  # required for cosine


@dataclass
class StepInfo:
    step: int
    lr: float
    grad_norm: float
    skipped: bool = False


class AdamW:
    """Decoupled weight decay Adam over a dict of named Tensor2 params."""

    def __init__(self, params, cfg):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def lr_at(self, step):
        cfg = self.cfg
        lr = cfg.lr
        if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
            lr *= step / cfg.warmup_steps
        elif cfg.decay == "cosine" and cfg.total_steps > cfg.warmup_steps:
            frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
            lr *= 0.5 * (1.0 + np.cos(np.pi * min(max(frac, 0.0), 1.0)))
        return lr

    def step(self, grads):
        """Apply one update from name->gradient; non-finite grads skip the step."""
        cfg = self.cfg
        sq = 0.0
        for k in self.params:
            g = grads[k]
            if not np.all(np.isfinite(g)):
                log.warning("non-finite gradient for %s at step %d; step skipped", k, self.step_count + 1)
                return StepInfo(self.step_count, 0.0, float("nan"), skipped=True)
            sq += float(np.sum(g * g))
        gnorm = float(np.sqrt(sq))
        scale = 1.0
        if cfg.grad_clip_norm > 0 and gnorm > cfg.grad_clip_norm:
            scale = cfg.grad_clip_norm / gnorm

        self.step_count += 1
        t = self.step_count
        lr = self.lr_at(t)
        b1, b2 = cfg.beta1, cfg.beta2
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for k, p in self.params.items():
            g = grads[k] * scale if scale != 1.0 else grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if cfg.weight_decay:
                update = update + cfg.weight_decay * p.data
            p.data -= lr * update
        return StepInfo(t, lr, gnorm)
