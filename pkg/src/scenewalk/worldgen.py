"""Synthetic world and dataset generator.

Emits (scene, question, program, per-step bitmaps, full answer) tuples with
complete supervision. Deterministic given seeds: every scene and question
draws from an RngState derived from (master seed, split, index), and
yes/no balance uses deterministic quota scheduling rather than coin flips,
so the configured caps hold exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .answer_gen import render_full_answer
from .errors import ValidationError
from .exec_engine import oracle_execute
from .instruction import (
    InstructionProgram,
    SymbolicInstruction,
    render_question,
    validate_program,
)
from .nn.rng import RngState
from .world import (
    SymbolicObject,
    SymbolicScene,
    WorldSchema,
    validate_scene,
    write_jsonl,
    write_scenes,
)


@dataclass
class WorldgenConfig:
    counts: dict[str, int] = field(
        default_factory=lambda: {"train": 2000, "valid": 500, "testdev": 500}
    )
    questions_per_scene: int = 4
    scene_size_range: tuple[int, int] = (2, 6)
    relation_density: float = 0.15
    attr_present_prob: float = 0.9
    type_mix: dict[str, float] = field(
        default_factory=lambda: {"exist": 0.40, "query": 0.35, "verify": 0.25}
    )
    relate_fraction: float = 0.45
    exist_negative_fraction: float = 0.45
    verify_no_fraction: float = 0.5
    # how negative exist questions perturb the source program
    negative_kind_weights: dict[str, float] = field(
        default_factory=lambda: {"value": 0.5, "predicate": 0.3, "category": 0.2}
    )
    m_max: int = 5
    max_filters: int = 2
    balance_cap: float = 0.6  # neither yes nor no may exceed this among exist


def sample_scene(
    schema: WorldSchema,
    rng: RngState,
    size_range: tuple[int, int] = (2, 6),
    relation_density: float = 0.15,
    attr_present_prob: float = 0.9,
    scene_id: str = "scene",
) -> SymbolicScene:
    lo, hi = size_range
    n = int(rng.integers(lo, hi + 1))
    objects = []
    for i in range(n):
        category = schema.categories[int(rng.integers(0, len(schema.categories)))]
        attrs = {}
        for mc, values in schema.metaconcepts.items():
            if rng.random() < attr_present_prob:
                attrs[mc] = values[int(rng.integers(0, len(values)))]
        w = round(float(rng.uniform(0.05, 0.3)), 4)
        h = round(float(rng.uniform(0.05, 0.3)), 4)
        x = round(float(rng.uniform(0.0, 1.0 - w)), 4)
        y = round(float(rng.uniform(0.0, 1.0 - h)), 4)
        objects.append(SymbolicObject(id=i, category=category, attributes=attrs, box=(x, y, w, h)))
    relations = []
    for s in range(n):
        for o in range(n):
            if s != o and rng.random() < relation_density:
                p = schema.predicates[int(rng.integers(0, len(schema.predicates)))]
                relations.append((s, p, o))
    scene = SymbolicScene(scene_id, tuple(objects), tuple(relations))
    validate_scene(scene, schema)
    return scene


def _describe(obj: SymbolicObject, rng: RngState, max_filters: int, exclude_mc: str | None = None):
    """Random truthful description: (category, [(mc, value), ...])."""
    available = [
        (mc, v) for mc, v in sorted(obj.attributes.items()) if mc != exclude_mc
    ]
    rng.shuffle(available)
    weights = [0.35, 0.45, 0.20]
    k = int(rng.choice(np.arange(3), p=np.asarray(weights)))
    k = min(k, max_filters, len(available))
    return obj.category, available[:k]


def _program(category, filters, relate=None, post_filters=(), terminal=("exist",)):
    steps = [SymbolicInstruction("select", (category,))]
    steps += [SymbolicInstruction("filter", (mc, v)) for mc, v in filters]
    if relate is not None:
        steps.append(SymbolicInstruction("relate", relate))
    steps += [SymbolicInstruction("filter", (mc, v)) for mc, v in post_filters]
    steps.append(SymbolicInstruction(terminal[0], tuple(terminal[1:])))
    return InstructionProgram(tuple(steps))


def sample_program_for(
    scene: SymbolicScene,
    schema: WorldSchema,
    rng: RngState,
    question_type: str = "exist",
    want_relate: bool = False,
    want_negative: bool = False,
    config: WorldgenConfig | None = None,
) -> tuple[InstructionProgram, str]:
    """Draw a program with a well-defined oracle answer.

    Returns (program, short_answer). ``want_negative`` applies to exist
    ("no" target) and verify ("no" target). Falls back to simpler shapes
    (no relate, or plain exist) if the scene cannot support the request.
    """
    config = config or WorldgenConfig()
    use_relate = want_relate and len(scene.relations) > 0
    m_budget = config.m_max - 1  # minus terminal
    for attempt in range(12):
        attempt_rng = rng.derive(f"attempt{attempt}")
        relate_arg = None
        post_filters: list[tuple[str, str]] = []
        if use_relate:
            s_id, pred, o_id = scene.relations[
                int(attempt_rng.integers(0, len(scene.relations)))
            ]
            direction = "fwd" if attempt_rng.random() < 0.5 else "bwd"
            src = scene.object_by_id(s_id if direction == "fwd" else o_id)
            dst = scene.object_by_id(o_id if direction == "fwd" else s_id)
            relate_arg = (pred, direction)
            # relate + terminal consume 2 of the budget
            category, filters = _describe(
                src, attempt_rng, min(config.max_filters, m_budget - 2)
            )
            room = m_budget - 2 - len(filters)
            if room >= 1 and dst.attributes and attempt_rng.random() < 0.35:
                mc = attempt_rng.choice(sorted(dst.attributes))
                post_filters = [(mc, dst.attributes[mc])]
            target = dst
        else:
            target = scene.objects[int(attempt_rng.integers(0, len(scene.objects)))]
            exclude = None
            if question_type == "query":
                if not target.attributes:
                    continue
                exclude = attempt_rng.choice(sorted(target.attributes))
            category, filters = _describe(
                target, attempt_rng, min(config.max_filters, m_budget - 1), exclude_mc=exclude
            )

        if question_type == "exist":
            program = _program(category, filters, relate_arg, post_filters, ("exist",))
        elif question_type == "query":
            ref = target
            candidates = sorted(
                mc
                for mc in ref.attributes
                if mc not in {m for m, _ in filters} and mc not in {m for m, _ in post_filters}
            )
            if not candidates:
                continue
            mc = attempt_rng.choice(candidates)
            program = _program(category, filters, relate_arg, post_filters, ("query", mc))
        else:  # verify
            ref = target
            candidates = sorted(
                mc
                for mc in ref.attributes
                if mc not in {m for m, _ in filters} and mc not in {m for m, _ in post_filters}
            )
            if not candidates:
                continue
            mc = attempt_rng.choice(candidates)
            if want_negative:
                others = [v for v in schema.metaconcepts[mc] if v != ref.attributes[mc]]
                value = attempt_rng.choice(others)
            else:
                value = ref.attributes[mc]
            program = _program(category, filters, relate_arg, post_filters, ("verify", mc, value))

        validate_program(program, schema, m_max=config.m_max)
        result = oracle_execute(scene, program, schema, m_max=config.m_max)
        if question_type == "exist":
            if want_negative:
                negative = _negate_exist(program, scene, schema, attempt_rng, config)
                if negative is not None:
                    return negative, "no"
                continue
            if result.short_answer == "yes":
                return program, "yes"
            continue
        if question_type == "query":
            if result.short_answer in ("none", ""):
                continue
            # prefer unambiguous referents
            if len(result.active_ids) != 1 and attempt < 8:
                continue
            return program, result.short_answer
        # verify
        wanted = "no" if want_negative else "yes"
        if result.short_answer != wanted:
            continue
        if len(result.active_ids) > 1 and not want_negative and attempt < 8:
            continue
        return program, result.short_answer

    # graceful fallback: a category-exist question always resolves
    category = scene.objects[0].category
    program = _program(category, [], None, (), ("exist",))
    return program, oracle_execute(scene, program, schema).short_answer


def _negate_exist(
    program: InstructionProgram,
    scene: SymbolicScene,
    schema: WorldSchema,
    rng: RngState,
    config: WorldgenConfig,
) -> InstructionProgram | None:
    """Perturb one argument of a true exist-program so the oracle says no."""
    kinds = []
    steps = list(program.steps)
    filter_positions = [i for i, s in enumerate(steps) if s.opcode == "filter"]
    relate_positions = [i for i, s in enumerate(steps) if s.opcode == "relate"]
    weights = config.negative_kind_weights
    if filter_positions:
        kinds.append(("value", weights.get("value", 0.0)))
    if relate_positions:
        kinds.append(("predicate", weights.get("predicate", 0.0)))
    kinds.append(("category", weights.get("category", 0.0)))
    total = sum(w for _, w in kinds) or 1.0
    rng2 = rng.derive("negate")
    probs = np.asarray([w / total for _, w in kinds])
    first = rng2.choice([k for k, _ in kinds], p=probs)
    order = [first] + [k for k, _ in kinds if k != first]
    for kind in order:
        if kind == "value":
            pos = filter_positions[int(rng2.integers(0, len(filter_positions)))]
            mc, value = steps[pos].args
            alternatives = [v for v in schema.metaconcepts[mc] if v != value]
            rng2.shuffle(alternatives)
            for alt in alternatives:
                trial = steps.copy()
                trial[pos] = SymbolicInstruction("filter", (mc, alt))
                cand = InstructionProgram(tuple(trial))
                if oracle_execute(scene, cand, schema).short_answer == "no":
                    return cand
        elif kind == "predicate":
            pos = relate_positions[0]
            pred, direction = steps[pos].args
            alternatives = [p for p in schema.predicates if p != pred]
            rng2.shuffle(alternatives)
            for alt in alternatives:
                trial = steps.copy()
                trial[pos] = SymbolicInstruction("relate", (alt, direction))
                cand = InstructionProgram(tuple(trial))
                if oracle_execute(scene, cand, schema).short_answer == "no":
                    return cand
        else:  # category: some category is always absent from a small scene
            present = {o.category for o in scene.objects}
            alternatives = [c for c in schema.categories if c not in present]
            rng2.shuffle(alternatives)
            for alt in alternatives:
                trial = steps.copy()
                trial[0] = SymbolicInstruction("select", (alt,))
                cand = InstructionProgram(tuple(trial))
                if oracle_execute(scene, cand, schema).short_answer == "no":
                    return cand
    return None


class _Quota:
    """Deterministic Bresenham-style scheduler: emit True at rate ``fraction``."""

    def __init__(self, fraction: float):
        self.fraction = fraction
        self.acc = 0.0

    def take(self) -> bool:
        self.acc += self.fraction
        if self.acc >= 1.0 - 1e-12:
            self.acc -= 1.0
            return True
        return False


def _type_sequence(n: int, mix: dict[str, float], rng: RngState) -> list[str]:
    """Exact largest-remainder counts per type, order shuffled."""
    types = sorted(mix)
    raw = {t: mix[t] * n for t in types}
    counts = {t: int(raw[t]) for t in types}
    remainder = sorted(types, key=lambda t: -(raw[t] - counts[t]))
    short = n - sum(counts.values())
    for t in remainder[:short]:
        counts[t] += 1
    seq = [t for t in types for _ in range(counts[t])]
    rng.shuffle(seq)
    return seq


def generate_split(
    schema: WorldSchema,
    config: WorldgenConfig,
    split: str,
    n_questions: int,
    seed: int,
) -> tuple[list[SymbolicScene], list[dict]]:
    rng = RngState(seed).derive(f"worldgen/{split}")
    n_scenes = (n_questions + config.questions_per_scene - 1) // config.questions_per_scene
    scenes = [
        sample_scene(
            schema,
            rng.derive(f"scene/{i}"),
            config.scene_size_range,
            config.relation_density,
            config.attr_present_prob,
            scene_id=f"{split}-{i:05d}",
        )
        for i in range(n_scenes)
    ]
    types = _type_sequence(n_questions, config.type_mix, rng.derive("types"))
    relate_quota = _Quota(config.relate_fraction)
    exist_neg_quota = _Quota(config.exist_negative_fraction)
    verify_no_quota = _Quota(config.verify_no_fraction)
    records = []
    for qi in range(n_questions):
        scene = scenes[qi // config.questions_per_scene]
        qtype = types[qi]
        want_relate = relate_quota.take()
        want_negative = False
        if qtype == "exist":
            want_negative = exist_neg_quota.take()
        elif qtype == "verify":
            want_negative = verify_no_quota.take()
        q_rng = rng.derive(f"question/{qi}")
        program, short = sample_program_for(
            scene,
            schema,
            q_rng,
            question_type=qtype,
            want_relate=want_relate,
            want_negative=want_negative,
            config=config,
        )
        result = oracle_execute(scene, program, schema, m_max=config.m_max)
        full = render_full_answer(program, result, scene)
        if full.short_answer != result.short_answer:
            raise ValidationError(
                f"template/oracle inconsistency for question {qi} in {split}"
            )
        question = render_question(program, q_rng)
        records.append(
            {
                "question_id": f"q-{split}-{qi:05d}",
                "scene_id": scene.scene_id,
                "tokens": list(question.tokens),
                "program": program.to_texts(),
                "short_answer": full.short_answer,
                "full_answer": list(full.tokens),
                "bitmaps": result.bitmaps.tolist(),
            }
        )
    _check_balance(records, config.balance_cap, split)
    return scenes, records


def _check_balance(records: list[dict], cap: float, split: str) -> None:
    exist = [r for r in records if r["program"][-1] == "exist"]
    if not exist:
        return
    yes = sum(1 for r in exist if r["short_answer"] == "yes")
    # integer form: with n questions the best achievable majority is ceil(cap*n)
    allowed = int(np.ceil(cap * len(exist)))
    if max(yes, len(exist) - yes) > allowed:
        raise ValidationError(
            f"{split}: exist answer balance {max(yes, len(exist) - yes)}/{len(exist)} "
            f"exceeds cap {cap}"
        )


def build_dataset(
    schema: WorldSchema,
    config: WorldgenConfig,
    out_dir: str | Path,
    seed: int,
) -> dict:
    """Write schema, scenes, questions, and lexicons; returns a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema.save(out / "schema.json")
    manifest = {"seed": seed, "splits": {}}
    for split, n in config.counts.items():
        scenes, records = generate_split(schema, config, split, n, seed)
        write_scenes(out / f"{split}_scenes.jsonl", scenes)
        write_jsonl(out / f"{split}_questions.jsonl", records)
        manifest["splits"][split] = {"scenes": len(scenes), "questions": len(records)}
    _write_lexicons(schema, out / "lexicons")
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _write_lexicons(schema: WorldSchema, lex_dir: Path) -> None:
    from importlib import resources

    lex_dir.mkdir(parents=True, exist_ok=True)
    attrs = sorted(schema.attribute_lexicon())
    (lex_dir / "attributes.txt").write_text("\n".join(attrs) + "\n")
    for name in ("verbs.txt", "prepositions.txt"):
        text = resources.files("scenewalk.data").joinpath(name).read_text()
        (lex_dir / name).write_text(text)
