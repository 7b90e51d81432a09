"""Perturbation study: strip linguistic cues from questions by masking.

Two maskers: attribute values (from the world schema or an external list)
and verbs/prepositions via a rule-based lexicon tagger (closed-class
preposition list; verb lexicon plus -ing/-ed/-s stem rules). Copulas are
excluded from verb masking by default - masking "is" would destroy every
template question - and the choice is recorded in report headers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .instruction import MASK
from .world import WorldSchema

COPULAS = frozenset({"is", "am", "are", "was", "were", "be", "been", "being"})


def _read_lexicon_file(path: Path) -> frozenset[str]:
    tokens = set()
    for line in path.read_text().splitlines():
        token = line.strip().lower()
        if token:
            tokens.add(token)
    return frozenset(tokens)


def _packaged_lexicon(name: str) -> frozenset[str]:
    text = resources.files("scenewalk.data").joinpath(name).read_text()
    return frozenset(t.strip().lower() for t in text.splitlines() if t.strip())


@dataclass(frozen=True)
class CueLexicons:
    attributes: frozenset[str]
    verbs: frozenset[str]
    prepositions: frozenset[str]
    copulas: frozenset[str] = COPULAS
    include_copulas: bool = False

    def __post_init__(self):
        for name, lex in (
            ("attributes", self.attributes),
            ("verbs", self.verbs),
            ("prepositions", self.prepositions),
        ):
            for token in lex:
                if token != token.lower() or token == MASK:
                    raise ValueError(f"{name} lexicon entry invalid: {token!r}")

    @classmethod
    def from_schema(cls, schema: WorldSchema, include_copulas: bool = False) -> "CueLexicons":
        return cls(
            attributes=frozenset(schema.attribute_lexicon()),
            verbs=_packaged_lexicon("verbs.txt"),
            prepositions=_packaged_lexicon("prepositions.txt"),
            include_copulas=include_copulas,
        )

    @classmethod
    def load(cls, lexicons_dir: str | Path, include_copulas: bool = False) -> "CueLexicons":
        d = Path(lexicons_dir)
        return cls(
            attributes=_read_lexicon_file(d / "attributes.txt"),
            verbs=_read_lexicon_file(d / "verbs.txt"),
            prepositions=_read_lexicon_file(d / "prepositions.txt"),
            include_copulas=include_copulas,
        )


def _verb_stems(token: str) -> list[str]:
    stems = []
    if token.endswith("ing") and len(token) > 4:
        stems += [token[:-3], token[:-3] + "e"]
        if len(token) > 5 and token[-4] == token[-5]:
            stems.append(token[:-4])  # doubling: sitting -> sit
    if token.endswith("ed") and len(token) > 3:
        stems += [token[:-2], token[:-1]]
        if len(token) > 4 and token[-3] == token[-4]:
            stems.append(token[:-3])
    if token.endswith("es") and len(token) > 3:
        stems.append(token[:-2])
    if token.endswith("s") and len(token) > 2:
        stems.append(token[:-1])
    return stems


def is_verb(token: str, lex: CueLexicons) -> bool:
    if token in lex.copulas:
        return lex.include_copulas
    if token in lex.verbs:
        return True
    return any(stem in lex.verbs for stem in _verb_stems(token))


def is_preposition(token: str, lex: CueLexicons) -> bool:
    return token in lex.prepositions


@dataclass(frozen=True)
class MaskedQuestion:
    original: tuple[str, ...]
    tokens: tuple[str, ...]
    mask_kind: str
    positions: tuple[int, ...]


def _mask_where(tokens, predicate, kind: str) -> MaskedQuestion:
    original = tuple(tokens)
    out = list(original)
    positions = []
    for i, token in enumerate(original):
        if token != MASK and predicate(token):
            out[i] = MASK
            positions.append(i)
    return MaskedQuestion(
        original=original,
        tokens=tuple(out),
        mask_kind=kind,
        positions=tuple(positions),
    )


def mask_attributes(tokens, lex: CueLexicons) -> MaskedQuestion:
    """Replace every attribute-value token with the mask token."""
    return _mask_where(tokens, lambda t: t in lex.attributes, "attributes")


def mask_vb_prpn(tokens, lex: CueLexicons) -> MaskedQuestion:
    """Replace verbs and prepositions (per the lexicon tagger) with the mask."""
    return _mask_where(
        tokens, lambda t: is_verb(t, lex) or is_preposition(t, lex), "vb_prpn"
    )


MASKERS = {"attributes": mask_attributes, "vb_prpn": mask_vb_prpn}


def mask_question_record(record: dict, kind: str, lex: CueLexicons) -> dict:
    """Masked copy of a question record: all fields preserved, tokens
    replaced, mask bookkeeping added."""
    if kind not in MASKERS:
        raise ValueError(f"unknown mask kind {kind!r} (use attributes|vb_prpn)")
    masked = MASKERS[kind](record["tokens"], lex)
    out = dict(record)
    out["tokens"] = list(masked.tokens)
    out["mask_kind"] = masked.mask_kind
    out["masked_positions"] = list(masked.positions)
    return out


# ----------------------------------------------------------- report helpers


def question_has_relate(record: dict) -> bool:
    return any(step.split()[0] == "relate" for step in record["program"])


def question_is_attribute_dependent(record: dict) -> bool:
    """True iff the program has a filter or verify step with a value argument."""
    for step in record["program"]:
        parts = step.split()
        if parts[0] in ("filter", "verify") and len(parts) >= 3:
            return True
    return False


def format_drop(before: float, after: float) -> str:
    """Table layout: "drop (from -> to)" in percent, e.g.
    "26.20% (54.48% -> 28.28%)"."""
    return f"{(before - after) * 100:.2f}% ({before * 100:.2f}% -> {after * 100:.2f}%)"


def drop_row(mask_kind: str, subset: str, before: float, after: float, n: int) -> dict:
    return {
        "mask_kind": mask_kind,
        "subset": subset,
        "short_acc_before": before,
        "short_acc_after": after,
        "drop": before - after,
        "formatted": format_drop(before, after),
        "n": n,
    }
