"""Symbolic world: schema, scenes, JSONL IO, and the GQA-format adapter.

A scene is a directed labeled graph: objects (category, attribute values per
metaconcept, normalized box) plus at most one predicate per ordered object
pair. Scenes are immutable after construction and safe to share.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError

NO_OBJECT = "no object"
NO_RELATION = "no relation"
UNSPECIFIED = "unspecified"


@dataclass(frozen=True)
class WorldSchema:
    categories: tuple[str, ...]
    metaconcepts: dict[str, tuple[str, ...]]
    predicates: tuple[str, ...]

    def __post_init__(self):
        for kind, labels in (
            ("categories", self.categories),
            ("predicates", self.predicates),
            ("metaconcepts", tuple(self.metaconcepts)),
        ):
            if len(set(labels)) != len(labels):
                raise ValidationError(f"duplicate labels in schema {kind}: {labels}")
        for mc, values in self.metaconcepts.items():
            if len(values) < 2:
                raise ValidationError(f"metaconcept {mc!r} needs >= 2 values")
            if len(set(values)) != len(values):
                raise ValidationError(f"duplicate values for metaconcept {mc!r}")

    @classmethod
    def default(cls) -> "WorldSchema":
        return cls(
            categories=(
                "girl",
                "dog",
                "cube",
                "sphere",
                "hamburger",
                "table",
                "robot",
                "lamp",
            ),
            metaconcepts={
                "color": ("red", "blue", "green", "yellow", "purple"),
                "material": ("metal", "wood", "plastic"),
                "size": ("small", "large"),
            },
            predicates=("holding", "wearing", "touching", "chasing", "near", "behind"),
        )

    def attribute_lexicon(self) -> set[str]:
        """Every attribute *value* token (for the perturbation study)."""
        return {v for values in self.metaconcepts.values() for v in values}

    def value_to_metaconcept(self) -> dict[str, str]:
        return {v: mc for mc, values in self.metaconcepts.items() for v in values}

    def to_record(self) -> dict:
        return {
            "categories": list(self.categories),
            "metaconcepts": {mc: list(v) for mc, v in self.metaconcepts.items()},
            "predicates": list(self.predicates),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "WorldSchema":
        return cls(
            categories=tuple(rec["categories"]),
            metaconcepts={mc: tuple(v) for mc, v in rec["metaconcepts"].items()},
            predicates=tuple(rec["predicates"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_record(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "WorldSchema":
        return cls.from_record(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SymbolicObject:
    id: int
    category: str
    attributes: dict[str, str]
    box: tuple[float, float, float, float]


@dataclass(frozen=True)
class SymbolicScene:
    scene_id: str
    objects: tuple[SymbolicObject, ...]
    relations: tuple[tuple[int, str, int], ...] = field(default_factory=tuple)

    def object_by_id(self, oid: int) -> SymbolicObject:
        for obj in self.objects:
            if obj.id == oid:
                return obj
        raise ValidationError(f"scene {self.scene_id}: no object with id {oid}")

    def relation_map(self) -> dict[tuple[int, int], str]:
        return {(s, o): p for s, p, o in self.relations}

    def strip_attributes(self) -> "SymbolicScene":
        return SymbolicScene(
            self.scene_id,
            tuple(
                SymbolicObject(o.id, o.category, {}, o.box) for o in self.objects
            ),
            self.relations,
        )

    def strip_relations(self) -> "SymbolicScene":
        return SymbolicScene(self.scene_id, self.objects, ())


def validate_scene(scene: SymbolicScene, schema: WorldSchema) -> None:
    ids = [o.id for o in scene.objects]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"scene {scene.scene_id}: duplicate object ids {ids}")
    id_set = set(ids)
    for obj in scene.objects:
        if obj.category not in schema.categories:
            raise ValidationError(
                f"scene {scene.scene_id}: unknown category {obj.category!r}"
            )
        for mc, value in obj.attributes.items():
            if mc not in schema.metaconcepts:
                raise ValidationError(
                    f"scene {scene.scene_id}: unknown metaconcept {mc!r}"
                )
            if value not in schema.metaconcepts[mc]:
                raise ValidationError(
                    f"scene {scene.scene_id}: unknown value {value!r} for {mc!r}"
                )
        x, y, w, h = obj.box
        if w <= 0 or h <= 0:
            raise ValidationError(
                f"scene {scene.scene_id}: object {obj.id} has degenerate box"
            )
    seen_pairs: set[tuple[int, int]] = set()
    for s, p, o in scene.relations:
        if s == o:
            raise ValidationError(f"scene {scene.scene_id}: self-relation on {s}")
        if s not in id_set or o not in id_set:
            raise ValidationError(
                f"scene {scene.scene_id}: relation endpoint missing ({s},{p},{o})"
            )
        if p not in schema.predicates:
            raise ValidationError(f"scene {scene.scene_id}: unknown predicate {p!r}")
        if (s, o) in seen_pairs:
            raise ValidationError(
                f"scene {scene.scene_id}: multiple predicates for pair ({s},{o})"
            )
        seen_pairs.add((s, o))


# ------------------------------------------------------------------ JSONL IO


def scene_to_record(scene: SymbolicScene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "objects": [
            {
                "id": o.id,
                "category": o.category,
                "attributes": o.attributes,
                "box": list(o.box),
            }
            for o in scene.objects
        ],
        "relations": [[s, p, o] for s, p, o in scene.relations],
    }


def record_to_scene(rec: dict) -> SymbolicScene:
    return SymbolicScene(
        scene_id=rec["scene_id"],
        objects=tuple(
            SymbolicObject(
                id=int(o["id"]),
                category=o["category"],
                attributes=dict(o["attributes"]),
                box=tuple(float(v) for v in o["box"]),
            )
            for o in rec["objects"]
        ),
        relations=tuple((int(s), p, int(o)) for s, p, o in rec["relations"]),
    )


def write_jsonl(path: str | Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def write_scenes(path: str | Path, scenes: list[SymbolicScene]) -> None:
    write_jsonl(path, [scene_to_record(s) for s in scenes])


def read_scenes(path: str | Path) -> list[SymbolicScene]:
    return [record_to_scene(r) for r in read_jsonl(path)]


# ------------------------------------------------------------- GQA adapter


def load_gqa_scene_graphs(
    data: dict,
    value_to_metaconcept: dict[str, str] | None = None,
) -> list[SymbolicScene]:
    """Adapt GQA-format scene-graph JSON into SymbolicScene records.

    ``data`` maps image id -> {"width", "height", "objects": {obj_id:
    {"name", "x", "y", "w", "h", "attributes": [...], "relations":
    [{"object": id, "name": pred}]}}}. Attribute values without a
    metaconcept mapping are dropped; predicate names keep only their last
    token with spaces collapsed to underscores removed (e.g. "to the left
    of" -> "left_of" is the caller's job via post-processing if needed).
    Format compatibility hook only - no full-scale GQA training here.
    """
    scenes = []
    for image_id in sorted(data):
        entry = data[image_id]
        width = float(entry.get("width", 1.0)) or 1.0
        height = float(entry.get("height", 1.0)) or 1.0
        obj_keys = sorted(entry.get("objects", {}))
        key_to_idx = {k: i for i, k in enumerate(obj_keys)}
        objects = []
        relations = []
        seen_pairs: set[tuple[int, int]] = set()
        for key in obj_keys:
            raw = entry["objects"][key]
            attrs: dict[str, str] = {}
            if value_to_metaconcept:
                for value in raw.get("attributes", []):
                    mc = value_to_metaconcept.get(value)
                    if mc is not None and mc not in attrs:
                        attrs[mc] = value
            box = (
                min(max(float(raw.get("x", 0)) / width, 0.0), 1.0),
                min(max(float(raw.get("y", 0)) / height, 0.0), 1.0),
                max(float(raw.get("w", 1)) / width, 1e-3),
                max(float(raw.get("h", 1)) / height, 1e-3),
            )
            objects.append(
                SymbolicObject(
                    id=key_to_idx[key],
                    category=raw.get("name", "thing"),
                    attributes=attrs,
                    box=box,
                )
            )
            for rel in raw.get("relations", []):
                target = rel.get("object")
                if target in key_to_idx and key_to_idx[target] != key_to_idx[key]:
                    pair = (key_to_idx[key], key_to_idx[target])
                    if pair not in seen_pairs:
                        seen_pairs.add(pair)
                        predicate = str(rel.get("name", "")).replace(" ", "_")
                        relations.append((pair[0], predicate, pair[1]))
        scenes.append(
            SymbolicScene(
                scene_id=f"gqa-{image_id}",
                objects=tuple(objects),
                relations=tuple(relations),
            )
        )
    return scenes
