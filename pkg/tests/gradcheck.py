"""Finite-difference gradient oracle shared by the nn and acceptance tests.

Central differences with h = 1e-5 on float64; the analytic gradient must
match within a relative error of 1e-4 (absolute floor for near-zero
entries). The oracle only ever calls forward passes, so it stays
independent of the backward implementation it checks.
"""

from __future__ import annotations

import numpy as np

from scenewalk.nn.tensor import Parameter, Tensor, backward


def finite_difference(loss_fn, tensors: list[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = loss_fn().item()
            flat[i] = orig - h
            minus = loss_fn().item()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def assert_gradients_match(
    loss_fn,
    tensors: list[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Backward() vs central differences on every (or a sampled subset of)
    coordinate; returns the worst relative error seen."""
    for t in tensors:
        if isinstance(t, Parameter):
            t.zero_grad()
        else:
            t.grad = None
            t.requires_grad = True
    backward(loss_fn())
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "no gradient reached a checked tensor"
        analytic = t.grad.copy()
        if sample is not None and t.data.size > sample:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(t.data.size, size=sample, replace=False)
        else:
            coords = np.arange(t.data.size)
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            plus = loss_fn().item()
            flat[i] = orig - h
            minus = loss_fn().item()
            flat[i] = orig
            numeric = (plus - minus) / (2 * h)
            denom = max(abs(aflat[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
        if isinstance(t, Parameter):
            t.zero_grad()
        else:
            t.grad = None
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e} >= {tol}"
    return worst
