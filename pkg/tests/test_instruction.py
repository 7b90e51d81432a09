"""Instruction DSL: canonical serialization bijection, program invariants,
question templates, vocabularies, and gold parser targets."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenewalk.errors import ValidationError
from scenewalk.instruction import (
    BOS,
    EOS,
    MASK,
    UNK,
    InstructionProgram,
    SymbolicInstruction,
    Vocab,
    build_answer_vocab,
    build_instruction_vocab,
    build_question_vocab,
    encode_gold_program,
    instruction_from_text,
    render_question,
    validate_program,
)
from scenewalk.world import WorldSchema

SCHEMA = WorldSchema.default()


def all_instructions(schema=SCHEMA):
    out = [SymbolicInstruction("exist")]
    for c in schema.categories:
        out.append(SymbolicInstruction("select", (c,)))
    for mc, values in schema.metaconcepts.items():
        out.append(SymbolicInstruction("query", (mc,)))
        for v in values:
            out.append(SymbolicInstruction("filter", (mc, v)))
            out.append(SymbolicInstruction("verify", (mc, v)))
    for p in schema.predicates:
        for d in ("fwd", "bwd"):
            out.append(SymbolicInstruction("relate", (p, d)))
    return out


def test_serialization_is_a_bijection_over_the_schema():
    seen = set()
    for instr in all_instructions():
        text = instr.to_text()
        assert text not in seen
        seen.add(text)
        assert instruction_from_text(text) == instr


@given(st.integers(0, 10**6))
@settings(max_examples=60, deadline=None)
def test_serialization_round_trip_random(i):
    candidates = all_instructions()
    instr = candidates[i % len(candidates)]
    assert instruction_from_text(instr.to_text()) == instr


def test_canonical_text_examples():
    assert SymbolicInstruction("select", ("girl",)).to_text() == "select girl"
    assert (
        SymbolicInstruction("relate", ("holding", "fwd")).to_text()
        == "relate holding fwd"
    )
    assert SymbolicInstruction("filter", ("color", "red")).to_text() == "filter color red"


def test_bad_opcode_and_arity_rejected():
    with pytest.raises(ValidationError):
        SymbolicInstruction("grab", ("x",))
    with pytest.raises(ValidationError):
        SymbolicInstruction("select", ())
    with pytest.raises(ValidationError):
        instruction_from_text("")


class TestProgramValidation:
    def test_valid_program(self):
        prog = InstructionProgram.from_texts(
            ["select girl", "relate holding fwd", "query color"]
        )
        validate_program(prog, SCHEMA)

    def test_must_start_with_select(self):
        prog = InstructionProgram.from_texts(["filter color red", "exist"])
        with pytest.raises(ValidationError, match="select"):
            validate_program(prog, SCHEMA)

    def test_exactly_one_terminal_at_end(self):
        with pytest.raises(ValidationError, match="terminal"):
            validate_program(
                InstructionProgram.from_texts(["select girl", "exist", "exist"]),
                SCHEMA,
            )
        with pytest.raises(ValidationError, match="terminal"):
            validate_program(
                InstructionProgram.from_texts(["select girl", "filter color red"]),
                SCHEMA,
            )

    def test_m_max_enforced(self):
        prog = InstructionProgram.from_texts(
            [
                "select girl",
                "filter color red",
                "filter size small",
                "filter material metal",
                "relate holding fwd",
                "exist",
            ]
        )
        with pytest.raises(ValidationError, match="M_max"):
            validate_program(prog, SCHEMA, m_max=5)

    def test_unknown_labels_rejected(self):
        with pytest.raises(ValidationError, match="category"):
            validate_program(
                InstructionProgram.from_texts(["select dragon", "exist"]), SCHEMA
            )


class TestRenderQuestion:
    def test_plain_exist(self):
        q = render_question(InstructionProgram.from_texts(["select dog", "exist"]))
        assert " ".join(q.tokens) == "is there a dog ?"
        assert q.question_type == "exist"

    def test_filtered_exist(self):
        q = render_question(
            InstructionProgram.from_texts(
                ["select cube", "filter color red", "exist"]
            )
        )
        assert " ".join(q.tokens) == "is there a red cube ?"

    def test_relate_query_surface(self):
        q = render_question(
            InstructionProgram.from_texts(
                ["select girl", "relate holding fwd", "query color"]
            )
        )
        assert " ".join(q.tokens) == "what color is the thing the girl is holding ?"

    def test_backward_relate_surface(self):
        q = render_question(
            InstructionProgram.from_texts(
                ["select hamburger", "relate holding bwd", "exist"]
            )
        )
        assert " ".join(q.tokens) == "is there a thing holding the hamburger ?"

    def test_verify_surface(self):
        q = render_question(
            InstructionProgram.from_texts(
                ["select cube", "filter size small", "verify color red"]
            )
        )
        assert " ".join(q.tokens) == "is the small cube red ?"

    def test_deterministic(self):
        prog = InstructionProgram.from_texts(["select dog", "exist"])
        assert render_question(prog).tokens == render_question(prog).tokens


class TestVocab:
    def test_unknown_maps_to_unk(self):
        vocab = build_question_vocab(SCHEMA)
        ids = vocab.encode(["girl", "zebra"])
        assert vocab.tokens[ids[0]] == "girl"
        assert vocab.tokens[ids[1]] == UNK

    def test_mask_in_question_vocab(self):
        vocab = build_question_vocab(SCHEMA)
        assert MASK in vocab.index

    def test_specials_present(self):
        iv = build_instruction_vocab(SCHEMA)
        av = build_answer_vocab(SCHEMA)
        for tok in (BOS, EOS):
            assert tok in iv.index and tok in av.index

    def test_duplicate_tokens_rejected(self):
        with pytest.raises(ValidationError):
            Vocab(["a", "a"])

    def test_answer_vocab_covers_templates(self):
        av = build_answer_vocab(SCHEMA)
        for tok in ("yes", "no", "none", ",", ".", "there", "not", "of", "thing"):
            assert tok in av.index


class TestGoldTargets:
    def test_single_step_program_stops_at_one(self):
        prog = InstructionProgram.from_texts(["select girl", "exist"])
        targets = encode_gold_program(prog, SCHEMA, build_instruction_vocab(SCHEMA))
        assert list(targets.stop_targets) == [0, 1]

    def test_three_step_targets(self):
        prog = InstructionProgram.from_texts(
            ["select cube", "filter color red", "query material"]
        )
        targets = encode_gold_program(prog, SCHEMA, build_instruction_vocab(SCHEMA))
        assert len(targets.step_token_ids) == 3
        vocab = build_instruction_vocab(SCHEMA)
        assert vocab.decode(targets.step_token_ids[1]) == ["filter", "color", "red", EOS]

    def test_equal_programs_equal_targets(self):
        texts = ["select girl", "relate holding fwd", "exist"]
        v = build_instruction_vocab(SCHEMA)
        a = encode_gold_program(InstructionProgram.from_texts(texts), SCHEMA, v)
        b = encode_gold_program(InstructionProgram.from_texts(list(texts)), SCHEMA, v)
        assert all(
            np.array_equal(x, y) for x, y in zip(a.step_token_ids, b.step_token_ids)
        )
        assert np.array_equal(a.stop_targets, b.stop_targets)
