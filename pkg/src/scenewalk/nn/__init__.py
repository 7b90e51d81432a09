"""Minimal deterministic differentiable-computation substrate (float64)."""

from .layers import (
    Embedding,
    FeedForwardLayer,
    LayerNorm,
    MLP,
    Module,
    embed,
    feed_forward,
    layer_norm,
)
from .optim import Adam, SGD, clip_grad_norm, make_optimizer
from .rng import RngState
from .tensor import (
    Parameter,
    Tensor,
    backward,
    no_grad,
    softmax,
)

__all__ = [
    "Adam",
    "Embedding",
    "FeedForwardLayer",
    "LayerNorm",
    "MLP",
    "Module",
    "Parameter",
    "RngState",
    "SGD",
    "Tensor",
    "backward",
    "clip_grad_norm",
    "embed",
    "feed_forward",
    "layer_norm",
    "make_optimizer",
    "no_grad",
    "softmax",
]
