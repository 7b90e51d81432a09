"""SGD-with-momentum and Adam over Parameter lists.

Updates run through the kernel backend on flat float64 views. A parameter
whose gradient is exactly zero is skipped entirely (no state decay), so
modules that are inactive in the current mode stay bit-identical.
"""

from __future__ import annotations

import numpy as np

from ..errors import OptimizerError
from ..kernels import ops as K
from .tensor import Parameter


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    total = 0.0
    for p in params:
        total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


class Optimizer:
    def __init__(self, params: list[Parameter], lr: float):
        self.params = list(params)
        self.lr = lr
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def _check(self, p: Parameter) -> None:
        if not np.all(np.isfinite(p.grad)):
            raise OptimizerError(f"non-finite gradient for parameter {p.name!r}")

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params: list[Parameter], lr: float, momentum: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self._vel = [np.zeros(p.data.size) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        for p, vel in zip(self.params, self._vel):
            self._check(p)
            g = p.grad.reshape(-1)
            if not g.any():
                continue
            K.sgd_step(p.data.reshape(-1), g, vel, self.lr, self.momentum)
            p.zero_grad()


class Adam(Optimizer):
    def __init__(
        self,
        params: list[Parameter],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        super().__init__(params, lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = [np.zeros(p.data.size) for p in self.params]
        self._v = [np.zeros(p.data.size) for p in self.params]
        self._t = [0] * len(self.params)

    def step(self) -> None:
        self.step_count += 1
        for i, p in enumerate(self.params):
            self._check(p)
            g = p.grad.reshape(-1)
            if not g.any():
                continue
            self._t[i] += 1
            K.adam_step(
                p.data.reshape(-1),
                g,
                self._m[i],
                self._v[i],
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                self._t[i],
            )
            p.zero_grad()


def make_optimizer(name: str, params: list[Parameter], lr: float, **kwargs) -> Optimizer:
    if name == "sgd":
        return SGD(params, lr, momentum=kwargs.get("momentum", 0.0))
    if name == "adam":
        return Adam(
            params,
            lr,
            beta1=kwargs.get("beta1", 0.9),
            beta2=kwargs.get("beta2", 0.999),
            eps=kwargs.get("eps", 1e-8),
        )
    raise ValueError(f"unknown optimizer {name!r}")
