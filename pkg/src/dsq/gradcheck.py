"""Central-difference gradient verification.

The numeric derivative is the oracle: for a scalar-valued function f of
tensors, each checked element x_i is perturbed by +/- step and the analytic
grad from backward() is compared against (f(x+h) - f(x-h)) / (2h) with

    rel_err = |analytic - numeric| / max(1, |analytic|, |numeric|)

Checks must run in 'verify' mode (float64); the step default 1e-5 keeps the
truncation and cancellation errors both near 1e-10 at unit scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T


class NondeterministicFunction(RuntimeError):
    """f() produced different values on two identical evaluations."""


@dataclass
class ElementReport:
    input_index: int
    flat_index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    passed: bool
    tol: float
    step: float
    n_checked: int
    max_rel_err: float
    worst: Optional[ElementReport]
    failures: list = field(default_factory=list)

    def summary(self) -> str:
        s = "PASS" if self.passed else "FAIL"
        w = ""
        if self.worst is not None:
            w = (f" worst input={self.worst.input_index}"
                 f" elem={self.worst.flat_index}"
                 f" analytic={self.worst.analytic:.3e}"
                 f" numeric={self.worst.numeric:.3e}")
        return (f"{s} max_rel_err={self.max_rel_err:.3e}"
                f" tol={self.tol:.1e} checked={self.n_checked}{w}")


def grad_check(f: Callable[..., T.Tensor],
               inputs: Sequence[T.Tensor],
               step: float = 1e-5,
               tol: float = 1e-4,
               max_elements: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Verify backward() of ``f(*inputs)`` against central differences.

    ``inputs`` are the tensors whose gradients get checked; f may close over
    additional constants. When ``max_elements`` is given, a random subset of
    that many elements per input is checked (seeded ``rng`` required for
    reproducibility, defaults to a fixed seed).
    """
    if T.mode() != "verify":
        raise RuntimeError("grad_check requires 'verify' mode")
    if rng is None:
        rng = np.random.default_rng(0)

    for t in inputs:
        if not t.requires_grad:
            raise ValueError("all checked inputs must have requires_grad=True")
        t.zero_grad()

    out1 = f(*inputs)
    out2 = f(*inputs)
    if out1.data.shape != out2.data.shape or not np.array_equal(out1.data, out2.data):
        raise NondeterministicFunction(
            "two evaluations of f disagree; fix RNG/state before checking")
    out1.backward()
    analytic = []
    for t in inputs:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(t.grad.copy())
        t.zero_grad()

    max_rel = 0.0
    worst: Optional[ElementReport] = None
    failures: list[ElementReport] = []
    n_checked = 0
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_elements is not None and n > max_elements:
            sel = rng.choice(n, size=max_elements, replace=False)
        else:
            sel = np.arange(n)
        for j in sel:
            j = int(j)
            orig = flat[j]
            flat[j] = orig + step
            lo_hi = float(f(*inputs).data)
            flat[j] = orig - step
            lo_lo = float(f(*inputs).data)
            flat[j] = orig
            numeric = (lo_hi - lo_lo) / (2.0 * step)
            a = float(analytic[i].reshape(-1)[j])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            n_checked += 1
            rep = ElementReport(i, j, a, numeric, rel)
            if rel > max_rel:
                max_rel = rel
                worst = rep
            if rel > tol:
                failures.append(rep)

    return GradCheckReport(passed=not failures, tol=tol, step=step,
                           n_checked=n_checked, max_rel_err=max_rel,
                           worst=worst, failures=failures)
