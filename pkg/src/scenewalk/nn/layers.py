"""Layers: feed-forward, layer norm, embeddings, and the Module container.

Parameter initialization is uniform(-a, a) with a = sqrt(6 / (fan_in +
fan_out)), drawn from an RngState derived from the parameter's *name*, so
init is stable under refactors that reorder construction.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError, VocabularyError
from .rng import RngState
from .tensor import (
    Parameter,
    Tensor,
    add,
    gather_rows,
    layer_norm_rows,
    matmul_t,
    mul,
    relu,
    reshape,
)

ACTIVATIONS = ("identity", "relu")


class Module:
    """Minimal container: recursively collects Parameters in attribute order."""

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        seen: set[int] = set()

        def visit(obj):
            if isinstance(obj, Parameter):
                if id(obj) not in seen:
                    seen.add(id(obj))
                    out.append(obj)
            elif isinstance(obj, Module):
                for value in vars(obj).values():
                    visit(value)
            elif isinstance(obj, dict):
                for value in obj.values():
                    visit(value)
            elif isinstance(obj, (list, tuple)):
                for value in obj:
                    visit(value)

        visit(self)
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def glorot_uniform(name: str, shape: tuple[int, int], rng: RngState) -> Parameter:
    fan_out, fan_in = shape
    a = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.derive(f"init/{name}").uniform(-a, a, shape)
    return Parameter(data, name)


class FeedForwardLayer(Module):
    """y = activation(W x + b) with W of shape (out_dim, in_dim)."""

    def __init__(
        self,
        name: str,
        in_dim: int,
        out_dim: int,
        rng: RngState,
        activation: str = "identity",
        bias: bool = True,
    ):
        if in_dim < 1 or out_dim < 1:
            raise DimensionError(f"layer dims must be >= 1, got {in_dim}x{out_dim}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.weight = glorot_uniform(f"{name}/weight", (out_dim, in_dim), rng)
        self.bias = Parameter(np.zeros(out_dim), f"{name}/bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 1
        if squeeze:
            x = reshape(x, (1, -1))
        if x.shape[1] != self.in_dim:
            raise DimensionError(
                f"feed_forward input has last dim {x.shape[1]}, "
                f"layer expects {self.in_dim} (weight {self.weight.shape})"
            )
        y = matmul_t(x, self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        if self.activation == "relu":
            y = relu(y)
        if squeeze:
            y = reshape(y, (-1,))
        return y


def feed_forward(layer: FeedForwardLayer, x: Tensor) -> Tensor:
    return layer.forward(x)


class LayerNorm(Module):
    """LayerNorm(x) = standardize(x) * gain + shift over the last axis."""

    def __init__(self, name: str, dim: int, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.gain = Parameter(np.ones(dim), f"{name}/gain")
        self.shift = Parameter(np.zeros(dim), f"{name}/shift")

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift, self.eps)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, -1))
    y = add(mul(layer_norm_rows(x, eps), gain), shift)
    if squeeze:
        y = reshape(y, (-1,))
    return y


class Embedding(Module):
    """Lookup table; differentiable only w.r.t. the rows it returns."""

    def __init__(self, name: str, rows: int, dim: int, rng: RngState):
        self.name = name
        self.rows = rows
        self.dim = dim
        self.table = glorot_uniform(f"{name}/table", (rows, dim), rng)

    def forward(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.rows):
            raise VocabularyError(
                f"index {ids.tolist()} out of range for table "
                f"{self.name!r} with {self.rows} rows"
            )
        return gather_rows(self.table, ids)

    def row(self, index: int) -> Tensor:
        return reshape(self.forward(np.asarray([index])), (-1,))


def embed(table: Parameter, index: int) -> Tensor:
    """Single-row lookup on a raw Parameter table."""
    if not 0 <= index < table.shape[0]:
        raise VocabularyError(
            f"index {index} out of range for table {table.name!r} "
            f"with {table.shape[0]} rows"
        )
    return reshape(gather_rows(table, np.asarray([index])), (-1,))


class MLP(Module):
    """Feed-forward stack: relu on hidden layers, identity on the last."""

    def __init__(self, name: str, dims: list[int], rng: RngState):
        self.layers = [
            FeedForwardLayer(
                f"{name}/ff{i}",
                dims[i],
                dims[i + 1],
                rng,
                activation="relu" if i < len(dims) - 2 else "identity",
            )
            for i in range(len(dims) - 1)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
