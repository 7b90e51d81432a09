"""The "Read" stage: question tokens -> M instruction vectors, a decoder
from instruction vectors back to canonical text, and the symbolic program
embedder used by the reading-oracle path.

The parser is a small self-attention encoder; per-step learned queries
cross-attend the encoded question once each (no autoregression between
steps), and a stop head decides where the program ends. Downstream modules
consume the *vectors* - the text decoder exists for explanation and for
the per-step text supervision.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .instruction import BOS, EOS, InstructionProgram, Vocab
from .nn.layers import Embedding, FeedForwardLayer, LayerNorm, Module
from .nn.rng import RngState
from .nn.tensor import (
    Tensor,
    add,
    concat,
    cross_entropy_rows,
    narrow,
    reshape,
)
from .nn.transformer import EncoderBlock, FeedForwardBlock, MultiHeadAttention


class QuestionParser(Module):
    def __init__(
        self,
        vocab: Vocab,
        dim: int,
        heads: int,
        blocks: int,
        m_max: int,
        rng: RngState,
        max_len: int = 32,
        ffn_mult: int = 2,
        name: str = "parser",
    ):
        self.vocab = vocab
        self.dim = dim
        self.m_max = m_max
        self.max_len = max_len
        self.tok = Embedding(f"{name}/tok", len(vocab), dim, rng)
        self.pos = Embedding(f"{name}/pos", max_len, dim, rng)
        self.blocks = [
            EncoderBlock(f"{name}/enc{i}", dim, heads, ffn_mult * dim, rng)
            for i in range(blocks)
        ]
        self.step_queries = Embedding(f"{name}/steps", m_max, dim, rng)
        self.cross = MultiHeadAttention(f"{name}/cross", dim, heads, rng)
        self.cross_ln = LayerNorm(f"{name}/cross_ln", dim)
        self.ffn = FeedForwardBlock(f"{name}/ffn", dim, ffn_mult * dim, rng)
        self.ffn_ln = LayerNorm(f"{name}/ffn_ln", dim)
        self.stop = FeedForwardLayer(f"{name}/stop", dim, 2, rng)

    def encode(self, tokens: list[str]) -> Tensor:
        if not tokens:
            raise ContractError("cannot parse an empty question")
        if len(tokens) > self.max_len:
            raise ContractError(
                f"question of {len(tokens)} tokens exceeds max length {self.max_len}"
            )
        ids = self.vocab.encode(tokens)
        x = add(self.tok(ids), self.pos(np.arange(len(tokens))))
        for block in self.blocks:
            x = block(x)
        return x

    def step_vectors(self, encoded: Tensor) -> Tensor:
        """All M_max candidate instruction vectors (rows are independent)."""
        queries = self.step_queries(np.arange(self.m_max))
        x = self.cross_ln(add(queries, self.cross(queries, encoded)))
        return self.ffn_ln(add(x, self.ffn(x)))

    def parse(
        self, tokens: list[str], gold_m: int | None = None
    ) -> tuple[list[Tensor], Tensor]:
        """Instruction vectors plus per-step stop logits.

        With ``gold_m`` (teacher forcing) exactly that many steps are
        emitted; otherwise the first step whose stop head fires ends the
        program (greedy, deterministic), capped at M_max.
        """
        encoded = self.encode(tokens)
        all_steps = self.step_vectors(encoded)
        stop_logits = self.stop(all_steps)  # (M_max, 2)
        if gold_m is not None:
            m = gold_m
        else:
            fired = np.flatnonzero(
                stop_logits.data[:, 1] > stop_logits.data[:, 0]
            )
            m = int(fired[0]) + 1 if fired.size else self.m_max
        vectors = [
            reshape(narrow(all_steps, 0, i, i + 1), (-1,)) for i in range(m)
        ]
        return vectors, narrow(stop_logits, 0, 0, m)

    def stop_loss(self, stop_logits: Tensor, m: int) -> Tensor:
        targets = np.zeros(m, dtype=np.int64)
        targets[m - 1] = 1
        return cross_entropy_rows(stop_logits, targets)


class InstructionTextDecoder(Module):
    """Greedy token decoder from one instruction vector to canonical text;
    explanation-only (downstream consumes the vectors)."""

    def __init__(
        self,
        vocab: Vocab,
        dim: int,
        rng: RngState,
        max_text_len: int = 6,
        name: str = "instr_decoder",
    ):
        self.vocab = vocab
        self.dim = dim
        self.max_text_len = max_text_len
        self.tok = Embedding(f"{name}/tok", len(vocab), dim, rng)
        self.pos = Embedding(f"{name}/pos", max_text_len + 1, dim, rng)
        self.hidden = FeedForwardLayer(
            f"{name}/hidden", 3 * dim, dim, rng, activation="relu"
        )
        self.out = FeedForwardLayer(f"{name}/out", dim, len(vocab), rng)
        self._bos = vocab.index[BOS]
        self._eos = vocab.index[EOS]

    def step_loss(self, iv: Tensor, target_ids: np.ndarray) -> Tensor:
        """Teacher-forced cross-entropy of one step's canonical tokens."""
        prev = np.concatenate(([self._bos], target_ids[:-1]))
        logits = self._token_logits(iv, prev)
        return cross_entropy_rows(logits, target_ids)

    def _token_logits(self, iv: Tensor, prev_ids: np.ndarray) -> Tensor:
        length = prev_ids.shape[0]
        iv_rows = concat([reshape(iv, (1, -1))] * length, axis=0)
        prev_emb = self.tok(prev_ids)
        pos_emb = self.pos(np.arange(length))
        x = concat([iv_rows, prev_emb, pos_emb], axis=1)
        return self.out(self.hidden(x))

    def decode(self, iv: Tensor) -> list[str]:
        """Greedy decoding; terminates at <eos> or max_text_len tokens."""
        prev = [self._bos]
        out: list[str] = []
        for _ in range(self.max_text_len):
            logits = self._token_logits(iv, np.asarray(prev, dtype=np.int64))
            next_id = int(logits.data[-1].argmax())
            if next_id == self._eos:
                break
            out.append(self.vocab.tokens[next_id])
            prev.append(next_id)
        return out


class ProgramEmbedder(Module):
    """Dense encoding of a gold symbolic program: per step, the sum of its
    canonical-token embeddings plus a step-position embedding. This is the
    instruction-vector source in reading-oracle mode (parser bypassed)."""

    def __init__(
        self,
        vocab: Vocab,
        dim: int,
        m_max: int,
        rng: RngState,
        name: str = "prog_embed",
    ):
        self.vocab = vocab
        self.m_max = m_max
        self.tok = Embedding(f"{name}/tok", len(vocab), dim, rng)
        self.step_pos = Embedding(f"{name}/pos", m_max, dim, rng)

    def forward(self, program: InstructionProgram) -> list[Tensor]:
        vectors = []
        for m, step in enumerate(program.steps):
            ids = self.vocab.encode(step.tokens())
            summed = reshape(
                Tensor(np.ones((1, len(ids)))) @ self.tok(ids), (-1,)
            )
            vectors.append(add(summed, reshape(self.step_pos(np.asarray([m])), (-1,))))
        return vectors
