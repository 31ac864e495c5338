"""Central finite-difference gradient checks for scalar torch losses.

The numeric side never touches autograd: every parameter entry is nudged by
+-eps in float64 and the loss is re-evaluated. The error is norm-wise over
all parameters together, ``|g_auto - g_fd| / max(|g_auto|, |g_fd|, floor)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

DEFAULT_EPS = 1e-6
DEFAULT_TOL = 1e-4


@dataclass(frozen=True)
class GradCheckResult:
    relative_error: float
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, tol: float = DEFAULT_TOL) -> bool:
        return self.relative_error < tol


def _flat(tensors) -> np.ndarray:
    if not tensors:
        return np.zeros(0)
    return np.concatenate([np.asarray(t, dtype=np.float64).ravel() for t in tensors])


def analytic_gradient(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]) -> np.ndarray:
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    return _flat([np.zeros(p.shape) if g is None else g.detach().numpy() for p, g in zip(params, grads)])


def numeric_gradient(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                     eps: float = DEFAULT_EPS) -> np.ndarray:
    out = []
    with torch.no_grad():
        for p in params:
            if p.dtype != torch.float64:
                raise TypeError("finite differences need float64 parameters")
            g = np.zeros(p.numel())
            flat = p.view(-1)
            for i in range(p.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = float(loss_fn())
                flat[i] = old - eps
                down = float(loss_fn())
                flat[i] = old
                g[i] = (up - down) / (2 * eps)
            out.append(g)
    return _flat(out)


def check_gradients(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                    eps: float = DEFAULT_EPS, floor: float = 1e-12) -> GradCheckResult:
    """``loss_fn`` is re-run from scratch on each call and must read ``params`` in place."""
    params = list(params)
    a = analytic_gradient(loss_fn, params)
    n = numeric_gradient(loss_fn, params, eps)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return GradCheckResult(float(np.linalg.norm(a - n) / denom), a, n)
