"""Traversal instruction DSL, canonical text forms, and question rendering.

Six opcodes cover the question grammar: select / filter / relate / exist /
query / verify. Canonical serialization is a bijection between instructions
and lowercase space-separated strings ("relate holding fwd"), used both for
human-readable explanations and as decoder supervision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .nn.rng import RngState
from .world import WorldSchema

OPCODES = ("select", "filter", "relate", "exist", "query", "verify")
TERMINALS = ("exist", "query", "verify")
DIRECTIONS = ("fwd", "bwd")

# arity of each opcode's argument tuple
_ARITY = {"select": 1, "filter": 2, "relate": 2, "exist": 0, "query": 1, "verify": 2}


@dataclass(frozen=True)
class SymbolicInstruction:
    opcode: str
    args: tuple[str, ...] = ()

    def __post_init__(self):
        if self.opcode not in OPCODES:
            raise ValidationError(f"unknown opcode {self.opcode!r}")
        if len(self.args) != _ARITY[self.opcode]:
            raise ValidationError(
                f"opcode {self.opcode!r} takes {_ARITY[self.opcode]} args, "
                f"got {self.args}"
            )

    def to_text(self) -> str:
        return " ".join((self.opcode, *self.args))

    def tokens(self) -> tuple[str, ...]:
        return (self.opcode, *self.args)


def instruction_from_text(text: str) -> SymbolicInstruction:
    parts = text.strip().split()
    if not parts:
        raise ValidationError("empty instruction text")
    return SymbolicInstruction(parts[0], tuple(parts[1:]))


def validate_instruction(instr: SymbolicInstruction, schema: WorldSchema) -> None:
    op, args = instr.opcode, instr.args
    if op == "select" and args[0] not in schema.categories:
        raise ValidationError(f"select: unknown category {args[0]!r}")
    if op in ("filter", "verify"):
        mc, value = args
        if mc not in schema.metaconcepts:
            raise ValidationError(f"{op}: unknown metaconcept {mc!r}")
        if value not in schema.metaconcepts[mc]:
            raise ValidationError(f"{op}: unknown value {value!r} for {mc!r}")
    if op == "query" and args[0] not in schema.metaconcepts:
        raise ValidationError(f"query: unknown metaconcept {args[0]!r}")
    if op == "relate":
        pred, direction = args
        if pred not in schema.predicates:
            raise ValidationError(f"relate: unknown predicate {pred!r}")
        if direction not in DIRECTIONS:
            raise ValidationError(f"relate: direction must be fwd|bwd, got {direction!r}")


@dataclass(frozen=True)
class InstructionProgram:
    steps: tuple[SymbolicInstruction, ...]

    def __len__(self) -> int:
        return len(self.steps)

    def to_texts(self) -> list[str]:
        return [s.to_text() for s in self.steps]

    @classmethod
    def from_texts(cls, texts: list[str]) -> "InstructionProgram":
        return cls(tuple(instruction_from_text(t) for t in texts))

    @property
    def terminal(self) -> SymbolicInstruction:
        return self.steps[-1]

    @property
    def question_type(self) -> str:
        return self.steps[-1].opcode

    def relate_step(self) -> SymbolicInstruction | None:
        for step in self.steps:
            if step.opcode == "relate":
                return step
        return None


def validate_program(
    program: InstructionProgram, schema: WorldSchema, m_max: int = 5
) -> None:
    steps = program.steps
    if not steps:
        raise ValidationError("program has no steps")
    if len(steps) > m_max:
        raise ValidationError(f"program length {len(steps)} exceeds M_max={m_max}")
    if steps[0].opcode != "select":
        raise ValidationError(f"first step must be select, got {steps[0].opcode!r}")
    terminal_positions = [i for i, s in enumerate(steps) if s.opcode in TERMINALS]
    if terminal_positions != [len(steps) - 1]:
        raise ValidationError(
            "program must have exactly one terminal step, at the end "
            f"(terminals at {terminal_positions}, length {len(steps)})"
        )
    for step in steps:
        validate_instruction(step, schema)


# ------------------------------------------------------------ question text


@dataclass(frozen=True)
class Question:
    tokens: tuple[str, ...]
    question_id: str
    question_type: str
    scene_id: str = ""


def _split_parts(program: InstructionProgram):
    """(select category, pre-relate filters, relate step, post-relate filters)."""
    category = program.steps[0].args[0]
    pre: list[tuple[str, str]] = []
    post: list[tuple[str, str]] = []
    relate = None
    for step in program.steps[1:-1]:
        if step.opcode == "relate":
            relate = step
        elif step.opcode == "filter":
            (post if relate is not None else pre).append(step.args)
        else:
            raise ValidationError(f"unexpected mid-program opcode {step.opcode!r}")
    return category, pre, relate, post


def referent_tokens(program: InstructionProgram) -> list[str]:
    """Surface form of the object the question asks about.

    "red cube", "thing the girl is holding" (fwd relate),
    "thing holding the hamburger" (bwd relate).
    """
    category, pre, relate, post = _split_parts(program)
    source = [v for _, v in pre] + [category]
    if relate is None:
        return source
    predicate, direction = relate.args
    head = [v for _, v in post] + ["thing"]
    if direction == "fwd":
        return head + ["the"] + source + ["is", predicate]
    return head + [predicate, "the"] + source


def render_question(program: InstructionProgram, rng: RngState | None = None) -> Question:
    """Deterministic template question; the grammar has one surface form per
    program shape, so ``rng`` currently draws nothing."""
    referent = referent_tokens(program)
    terminal = program.terminal
    if terminal.opcode == "exist":
        tokens = ["is", "there", "a", *referent, "?"]
    elif terminal.opcode == "query":
        tokens = ["what", terminal.args[0], "is", "the", *referent, "?"]
    else:  # verify
        tokens = ["is", "the", *referent, terminal.args[1], "?"]
    return Question(
        tokens=tuple(tokens),
        question_id="",
        question_type=terminal.opcode,
    )


# ------------------------------------------------------------- vocabularies

UNK = "[UNK]"
MASK = "[MASK]"
BOS = "<bos>"
EOS = "<eos>"

QUESTION_TEMPLATE_WORDS = ("is", "there", "a", "the", "what", "thing", "?")
ANSWER_TEMPLATE_WORDS = (
    "yes",
    "no",
    "none",
    ",",
    ".",
    "there",
    "is",
    "a",
    "the",
    "of",
    "not",
    "thing",
)


class Vocab:
    def __init__(self, tokens: list[str], unk: str | None = UNK):
        if len(set(tokens)) != len(tokens):
            raise ValidationError("vocabulary has duplicate tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.unk = unk

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, toks) -> np.ndarray:
        if self.unk is not None:
            unk_id = self.index[self.unk]
            ids = [self.index.get(t, unk_id) for t in toks]
        else:
            ids = [self.index[t] for t in toks]
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


def _schema_tokens(schema: WorldSchema) -> list[str]:
    toks: list[str] = list(schema.categories)
    for mc, values in schema.metaconcepts.items():
        toks.append(mc)
        toks.extend(values)
    toks.extend(schema.predicates)
    return toks


def _dedup(tokens: list[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for t in tokens:
        if t not in seen:
            seen.add(t)
            out.append(t)
    return out


def build_question_vocab(schema: WorldSchema) -> Vocab:
    return Vocab(_dedup([UNK, MASK, *QUESTION_TEMPLATE_WORDS, *_schema_tokens(schema)]))


def build_instruction_vocab(schema: WorldSchema) -> Vocab:
    return Vocab(
        _dedup([UNK, BOS, EOS, *OPCODES, *DIRECTIONS, *_schema_tokens(schema)])
    )


def build_answer_vocab(schema: WorldSchema) -> Vocab:
    return Vocab(_dedup([UNK, BOS, EOS, *ANSWER_TEMPLATE_WORDS, *_schema_tokens(schema)]))


# --------------------------------------------------------- gold supervision


@dataclass(frozen=True)
class ProgramTargets:
    """Teacher-forcing targets for the parser: per-step canonical token ids
    (with <eos>) plus the stop bit per step."""

    step_token_ids: tuple[np.ndarray, ...]
    stop_targets: np.ndarray  # (M,) 0/1, 1 exactly at the last step


def encode_gold_program(
    program: InstructionProgram, schema: WorldSchema, vocab: Vocab, m_max: int = 5
) -> ProgramTargets:
    validate_program(program, schema, m_max=m_max)
    step_ids = tuple(
        vocab.encode([*step.tokens(), EOS]) for step in program.steps
    )
    stops = np.zeros(len(program.steps), dtype=np.int64)
    stops[-1] = 1
    return ProgramTargets(step_token_ids=step_ids, stop_targets=stops)
