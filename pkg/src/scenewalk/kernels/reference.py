"""Pure-numpy reference implementations of the hot kernels.

These are the semantic ground truth for the numba twins in ``jit.py``;
``tests/test_kernels.py`` asserts parity between the two backends.
All kernels take C-contiguous float64 arrays (int64 for indices).
"""

from __future__ import annotations

import numpy as np


def layer_norm_fwd(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise standardization. Returns (y, inv_std); gain/shift live outside."""
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv_std[:, None]
    return y, inv_std


def layer_norm_bwd(y: np.ndarray, inv_std: np.ndarray, gy: np.ndarray) -> np.ndarray:
    g_mean = gy.mean(axis=1, keepdims=True)
    gy_dot_y = (gy * y).mean(axis=1, keepdims=True)
    return inv_std[:, None] * (gy - g_mean - y * gy_dot_y)


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    # max subtraction keeps exp() in range for extreme logits
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def log_softmax_fwd(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax_bwd(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return gy - np.exp(y) * gy.sum(axis=1, keepdims=True)


def gather_rows(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return x[idx]


def scatter_add_rows(out: np.ndarray, idx: np.ndarray, g: np.ndarray) -> None:
    # np.add.at handles repeated indices correctly (plain fancy += does not)
    np.add.at(out, idx, g)


def relu_fwd(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_bwd(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, gy, 0.0)


def adam_step(
    p: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    t: int,
) -> None:
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def sgd_step(
    p: np.ndarray,
    g: np.ndarray,
    vel: np.ndarray,
    lr: float,
    momentum: float,
) -> None:
    vel *= momentum
    vel += g
    p -= lr * vel
