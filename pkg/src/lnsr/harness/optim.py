"""Adam with optional bias correction, and a linear-warmup schedule."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np


def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    return math.ceil(warmup_fraction * total_steps)


def warmup_lr(step: int, base_lr: float, n_warmup: int) -> float:
    """Learning rate for 1-based ``step``: linear ramp to ``base_lr`` at ``n_warmup``, then flat."""
    if step <= 0:
        return 0.0
    if n_warmup <= 0 or step >= n_warmup:
        return base_lr
    return base_lr * step / n_warmup


class Adam:
    """Adam over a dict of named arrays.

    With ``bias_correction=False`` the update is ``lr * m / (sqrt(v) + eps)``,
    the BERT-style variant. With it on, ``m`` and ``v`` are divided by
    ``1 - beta^t`` first.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-6, bias_correction: bool = False):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.bias_correction = bias_correction
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name] = m
            self.v[name] = v
            if self.bias_correction:
                m_hat = m / (1 - b1**self.t)
                v_hat = v / (1 - b2**self.t)
                out[name] = p - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            else:
                out[name] = p - lr * m / (np.sqrt(v) + self.eps)
        return out
