"""The "Answer" stage: full-sentence answers from the traversal histories,
the template grammar that defines ground-truth full answers, and string-
match scoring.

Surface forms are lowercase and space-tokenized with detached punctuation,
so exact string match needs no tokenizer. The short answer is a single
token extracted from a fixed slot of each template.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ReportError
from .exec_engine import OracleResult
from .instruction import BOS, EOS, InstructionProgram, Vocab, referent_tokens
from .nn.layers import Embedding, FeedForwardLayer, Module
from .nn.rng import RngState
from .nn.tensor import Tensor, add, cross_entropy_rows, narrow, stack_rows
from .nn.transformer import DecoderBlock, causal_mask
from .world import SymbolicScene


@dataclass(frozen=True)
class FullAnswer:
    tokens: tuple[str, ...]
    short_answer: str


def render_full_answer(
    program: InstructionProgram, result: OracleResult, scene: SymbolicScene
) -> FullAnswer:
    """Template ground truth; the description echoes the question's referent."""
    referent = referent_tokens(program)
    terminal = program.terminal
    if terminal.opcode == "exist":
        if result.short_answer == "yes":
            tokens = ["yes", ",", "there", "is", "a", *referent, "."]
        else:
            tokens = ["no", ",", "there", "is", "no", *referent, "."]
    elif terminal.opcode == "query":
        mc = terminal.args[0]
        tokens = ["the", mc, "of", "the", *referent, "is", result.short_answer, "."]
    else:  # verify
        value = terminal.args[1]
        if result.short_answer == "yes":
            tokens = ["yes", ",", "the", *referent, "is", value, "."]
        else:
            tokens = ["no", ",", "the", *referent, "is", "not", value, "."]
    return FullAnswer(tokens=tuple(tokens), short_answer=result.short_answer)


def extract_short_answer(tokens: tuple[str, ...] | list[str], question_type: str) -> str:
    """First template slot: leading yes/no for exist/verify, the value
    token (before the final period) for query."""
    tokens = list(tokens)
    if not tokens:
        return ""
    if question_type == "query":
        return tokens[-2] if len(tokens) >= 2 else ""
    return tokens[0]


class AnswerDecoder(Module):
    """Transformer decoder over the answer vocabulary, cross-attending one
    memory row per reasoning step. A row combines the step's history vector
    with its instruction vector: histories alone cannot tell "what color"
    from "what material" (the traversal is identical), so the question's
    hidden states ride along. Rows keep their raw scale: the magnitude of a
    history vector separates empty from non-empty traversals."""

    def __init__(
        self,
        vocab: Vocab,
        dim: int,
        heads: int,
        blocks: int,
        a_max: int,
        m_max: int,
        rng: RngState,
        ffn_mult: int = 2,
        name: str = "answer",
    ):
        self.vocab = vocab
        self.dim = dim
        self.a_max = a_max
        self.tok = Embedding(f"{name}/tok", len(vocab), dim, rng)
        self.pos = Embedding(f"{name}/pos", a_max + 1, dim, rng)
        self.mem_proj = FeedForwardLayer(f"{name}/mem", dim, dim, rng)
        self.instr_proj = FeedForwardLayer(f"{name}/instr", dim, dim, rng)
        self.mem_pos = Embedding(f"{name}/mem_pos", m_max, dim, rng)
        self.blocks = [
            DecoderBlock(f"{name}/dec{i}", dim, heads, ffn_mult * dim, rng)
            for i in range(blocks)
        ]
        self.out = FeedForwardLayer(f"{name}/out", dim, len(vocab), rng)
        self._bos = vocab.index[BOS]
        self._eos = vocab.index[EOS]

    def memory(self, histories: list[Tensor], instructions: list[Tensor]) -> Tensor:
        h = stack_rows(histories)
        i = stack_rows(instructions)
        return add(
            add(self.mem_proj(h), self.instr_proj(i)),
            self.mem_pos(np.arange(len(histories))),
        )

    def _prefix_logits(self, memory: Tensor, prefix_ids: np.ndarray) -> Tensor:
        length = prefix_ids.shape[0]
        x = add(self.tok(prefix_ids), self.pos(np.arange(length)))
        mask = causal_mask(length)
        for block in self.blocks:
            x = block(x, memory, mask)
        return self.out(x)

    def loss(
        self,
        histories: list[Tensor],
        instructions: list[Tensor],
        target_tokens: list[str],
    ) -> Tensor:
        """Teacher-forced cross-entropy over the template tokens + <eos>."""
        target_ids = self.vocab.encode([*target_tokens, EOS])
        prefix = np.concatenate(([self._bos], target_ids[:-1]))
        logits = self._prefix_logits(self.memory(histories, instructions), prefix)
        return cross_entropy_rows(logits, target_ids)

    def generate(self, histories: list[Tensor], instructions: list[Tensor]) -> list[str]:
        """Greedy decoding; stops at <eos> or after a_max tokens."""
        memory = self.memory(histories, instructions)
        prefix = [self._bos]
        out: list[str] = []
        for _ in range(self.a_max):
            logits = self._prefix_logits(memory, np.asarray(prefix, dtype=np.int64))
            last = narrow(logits, 0, len(prefix) - 1, len(prefix))
            next_id = int(last.data.argmax())
            if next_id == self._eos:
                break
            out.append(self.vocab.tokens[next_id])
            prefix.append(next_id)
        return out


# -------------------------------------------------------------------- scoring


def question_type_of(record: dict) -> str:
    return record["program"][-1].split()[0]


def score(predictions: list[dict], references: list[dict]) -> dict:
    """Exact-match accuracy over aligned question ids.

    Full-answer accuracy: exact token-sequence match. Short-answer accuracy:
    exact short-token match. Plus a per-question-type breakdown.
    """
    pred_by_id = {p["question_id"]: p for p in predictions}
    ref_by_id = {r["question_id"]: r for r in references}
    missing = sorted(set(ref_by_id) - set(pred_by_id))
    extra = sorted(set(pred_by_id) - set(ref_by_id))
    if missing or extra:
        raise ReportError(
            f"prediction/reference mismatch; missing={missing[:10]} extra={extra[:10]}"
        )
    by_type: dict[str, dict] = {}
    full_hits = 0
    short_hits = 0
    for qid in sorted(ref_by_id):
        ref = ref_by_id[qid]
        prd = pred_by_id[qid]
        qtype = question_type_of(ref)
        bucket = by_type.setdefault(qtype, {"full": 0, "short": 0, "n": 0})
        full_ok = list(prd["full_answer"]) == list(ref["full_answer"])
        short_ok = prd["short_answer"] == ref["short_answer"]
        bucket["n"] += 1
        bucket["full"] += int(full_ok)
        bucket["short"] += int(short_ok)
        full_hits += int(full_ok)
        short_hits += int(short_ok)
    n = len(ref_by_id)
    return {
        "full_acc": full_hits / n if n else 0.0,
        "short_acc": short_hits / n if n else 0.0,
        "by_type": {
            t: {
                "full_acc": b["full"] / b["n"],
                "short_acc": b["short"] / b["n"],
                "n": b["n"],
            }
            for t, b in sorted(by_type.items())
        },
        "n": n,
    }
