"""Rectified Adam, global-norm clipping, warmup learning-rate schedule."""

from __future__ import annotations

import math
from typing import Dict, List, Sequence

import numpy as np

from .module import Parameter
from .tensor import NumericError


class RAdam:
    """Rectified Adam.

    Bias-corrected first moment always applies; the adaptive second-moment
    denominator (with its variance-rectification factor) is used only once
    the approximated SMA length rho_t exceeds 4, otherwise the step is the
    un-adapted corrected first moment times the learning rate.
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.rho_inf = 2.0 / (1.0 - beta2) - 1.0

    def step(self) -> None:
        self.t += 1
        t = self.t
        b1, b2 = self.beta1, self.beta2
        b1t, b2t = b1 ** t, b2 ** t
        rho = self.rho_inf - 2.0 * t * b2t / (1.0 - b2t)
        if rho > 4.0:
            r = math.sqrt(((rho - 4.0) * (rho - 2.0) * self.rho_inf)
                          / ((self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho))
        else:
            r = None
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient reached the optimizer")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / (1.0 - b1t)
            if r is not None:
                vhat = np.sqrt(v / (1.0 - b2t))
                p.data -= self.lr * r * mhat / (vhat + self.eps)
            else:
                p.data -= self.lr * mhat

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Flat name -> array view of the optimizer state, for checkpointing."""
        out: Dict[str, np.ndarray] = {"t": np.array([self.t], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        for i in range(len(self.params)):
            self.m[i] = arrays[f"m.{i}"].reshape(self.m[i].shape).copy()
            self.v[i] = arrays[f"v.{i}"].reshape(self.v[i].shape).copy()


def global_norm_clip(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def warmup_inv_sqrt_lr(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear ramp to peak_lr over warmup_steps, then decay as 1/sqrt(step)."""
    if step < 1:
        raise ValueError("steps are 1-based")
    if warmup_steps < 1:
        return peak_lr / math.sqrt(step)
    return peak_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))
