"""Central finite-difference oracle for autodiff gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    report: dict | None = None,
) -> float:
    """Max relative error between autodiff and central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar. Every entry of every parameter is perturbed by +-h.
    The per-entry error is |a - n| / max(|a|, |n|, 1e-8). If ``report`` is
    given it receives the worst error per parameter name.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    worst = 0.0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            a = analytic[name].reshape(-1)
            num = np.empty_like(a)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                num[i] = (up - down) / (2.0 * h)
            err = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
            e = float(err.max()) if err.size else 0.0
            if report is not None:
                report[name] = e
            worst = max(worst, e)
    return worst
