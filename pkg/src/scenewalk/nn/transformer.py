"""Transformer building blocks on 2-D tensors (sequence x dim).

Post-LN residual blocks, learned positions, greedy decoding only. Heads are
realized with column slices instead of 3-D reshapes so the autodiff core
stays strictly 2-D.
"""

from __future__ import annotations

import numpy as np

from .layers import FeedForwardLayer, LayerNorm, Module
from .rng import RngState
from .tensor import (
    Tensor,
    add,
    concat,
    matmul,
    matmul_t,
    mul,
    narrow,
    softmax_rows,
)

NEG_INF = -1e9


def causal_mask(t: int) -> np.ndarray:
    """Additive mask: position i may attend to j <= i."""
    return np.triu(np.full((t, t), NEG_INF), k=1)


class MultiHeadAttention(Module):
    def __init__(self, name: str, dim: int, heads: int, rng: RngState):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = FeedForwardLayer(f"{name}/wq", dim, dim, rng)
        self.wk = FeedForwardLayer(f"{name}/wk", dim, dim, rng)
        self.wv = FeedForwardLayer(f"{name}/wv", dim, dim, rng)
        self.wo = FeedForwardLayer(f"{name}/wo", dim, dim, rng)

    def forward(
        self, queries: Tensor, memory: Tensor, mask: np.ndarray | None = None
    ) -> Tensor:
        q = self.wq(queries)
        k = self.wk(memory)
        v = self.wv(memory)
        scale = 1.0 / np.sqrt(self.head_dim)
        outs = []
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh = narrow(q, 1, lo, hi)
            kh = narrow(k, 1, lo, hi)
            vh = narrow(v, 1, lo, hi)
            scores = mul(matmul_t(qh, kh), scale)
            if mask is not None:
                scores = add(scores, mask)
            outs.append(matmul(softmax_rows(scores), vh))
        return self.wo(concat(outs, axis=1))


class FeedForwardBlock(Module):
    def __init__(self, name: str, dim: int, hidden: int, rng: RngState):
        self.up = FeedForwardLayer(f"{name}/up", dim, hidden, rng, activation="relu")
        self.down = FeedForwardLayer(f"{name}/down", hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(self.up(x))


class EncoderBlock(Module):
    """Self-attention + position-wise FFN, post-LN residuals."""

    def __init__(self, name: str, dim: int, heads: int, hidden: int, rng: RngState):
        self.attn = MultiHeadAttention(f"{name}/attn", dim, heads, rng)
        self.ln1 = LayerNorm(f"{name}/ln1", dim)
        self.ffn = FeedForwardBlock(f"{name}/ffn", dim, hidden, rng)
        self.ln2 = LayerNorm(f"{name}/ln2", dim)

    def forward(self, x: Tensor) -> Tensor:
        x = self.ln1(add(x, self.attn(x, x)))
        return self.ln2(add(x, self.ffn(x)))


class DecoderBlock(Module):
    """Causal self-attention, cross-attention over memory, FFN."""

    def __init__(self, name: str, dim: int, heads: int, hidden: int, rng: RngState):
        self.self_attn = MultiHeadAttention(f"{name}/self", dim, heads, rng)
        self.ln1 = LayerNorm(f"{name}/ln1", dim)
        self.cross_attn = MultiHeadAttention(f"{name}/cross", dim, heads, rng)
        self.ln2 = LayerNorm(f"{name}/ln2", dim)
        self.ffn = FeedForwardBlock(f"{name}/ffn", dim, hidden, rng)
        self.ln3 = LayerNorm(f"{name}/ln3", dim)

    def forward(self, x: Tensor, memory: Tensor, self_mask: np.ndarray) -> Tensor:
        x = self.ln1(add(x, self.self_attn(x, x, self_mask)))
        x = self.ln2(add(x, self.cross_attn(x, memory)))
        return self.ln3(add(x, self.ffn(x)))
