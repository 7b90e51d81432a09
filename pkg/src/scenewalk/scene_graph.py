"""The "Look" stage: scene embedding, edge vectors, prediction heads,
optimal matching, and the set-prediction loss.

A vector scene graph holds N object vectors and all N(N-1) ordered edge
vectors. Object vectors are sums of category / attribute-value embeddings
plus a box projection; unused slots carry a dedicated learned vector. Edge
vectors are the pair encoding LayerNorm(FF(o_i (+) o_j)) with the symbolic
predicate's embedding added on top - the predicate injection is what makes
relations visible downstream, since there is no pixel backbone here to
infer them from.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ContractError, DimensionError
from .kernels import ops as K
from .nn.layers import Embedding, FeedForwardLayer, LayerNorm, MLP, Module
from .nn.rng import RngState
from .nn.tensor import (
    Tensor,
    abs_,
    add,
    concat,
    cross_entropy_rows,
    gather_rows,
    mul,
    reshape,
    sum_all,
)
from .world import (
    NO_OBJECT,
    NO_RELATION,
    UNSPECIFIED,
    SymbolicObject,
    SymbolicScene,
    WorldSchema,
)

_PAIR_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def ordered_pairs(n: int) -> np.ndarray:
    """All (i, j) with i != j, row-major: row = i*(n-1) + (j - (j > i))."""
    pairs = [(i, j) for i in range(n) for j in range(n) if j != i]
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def pair_row(n: int, i: int, j: int) -> int:
    if i == j:
        raise ContractError(f"no edge from a node to itself ({i},{j})")
    return i * (n - 1) + (j - 1 if j > i else j)


def _pair_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n not in _PAIR_CACHE:
        pairs = ordered_pairs(n)
        _PAIR_CACHE[n] = (
            np.ascontiguousarray(pairs[:, 0]),
            np.ascontiguousarray(pairs[:, 1]),
        )
    return _PAIR_CACHE[n]


@dataclass
class VectorSceneGraph:
    """N object vectors + N(N-1) edge vectors, plus slot bookkeeping."""

    object_matrix: Tensor  # (N, D)
    edge_matrix: Tensor  # (N(N-1), D), ordered_pairs order
    slot_count: int
    slot_objects: tuple[int | None, ...]  # slot -> index into scene.objects
    scene_id: str = ""

    def __post_init__(self):
        n = self.slot_count
        expected = n * (n - 1)
        if self.object_matrix.shape[0] != n or self.edge_matrix.shape[0] != expected:
            raise DimensionError(
                f"vector scene graph needs {n} object vectors and {expected} edge "
                f"vectors, got {self.object_matrix.shape[0]} and "
                f"{self.edge_matrix.shape[0]}"
            )

    @property
    def dim(self) -> int:
        return self.object_matrix.shape[1]

    def object_vector(self, i: int) -> Tensor:
        return reshape(gather_rows(self.object_matrix, np.asarray([i])), (-1,))

    def edge_vector(self, i: int, j: int) -> Tensor:
        row = pair_row(self.slot_count, i, j)
        return reshape(gather_rows(self.edge_matrix, np.asarray([row])), (-1,))


class SceneEmbedder(Module):
    """Learned symbolic-scene encoder (the visual-oracle stand-in)."""

    def __init__(self, schema: WorldSchema, dim: int, rng: RngState, name: str = "embedder"):
        self.schema = schema
        self.dim = dim
        self.category = Embedding(f"{name}/category", len(schema.categories), dim, rng)
        # the engine reads object identity out of summed history vectors;
        # widely separated category directions make that comparison learnable
        self.category.table.data *= 4.0
        self.no_object = Embedding(f"{name}/no_object", 1, dim, rng)
        self.attribute = {
            mc: Embedding(f"{name}/attr_{mc}", len(values) + 1, dim, rng)
            for mc, values in schema.metaconcepts.items()
        }
        self.box_proj = FeedForwardLayer(f"{name}/box_proj", 4, dim, rng)
        self.predicate = Embedding(
            f"{name}/predicate", len(schema.predicates) + 1, dim, rng
        )
        # the predicate signal rides on top of the unit-variance pair
        # encoding; a larger starting scale keeps it readable from step one
        self.predicate.table.data *= 4.0
        self._cat_index = {c: i for i, c in enumerate(schema.categories)}
        self._pred_index = {p: i for i, p in enumerate(schema.predicates)}
        self._value_index = {
            mc: {v: i for i, v in enumerate(values)}
            for mc, values in schema.metaconcepts.items()
        }

    def no_relation_index(self) -> int:
        return len(self.schema.predicates)

    def object_rows(self, objects: tuple[SymbolicObject, ...]) -> Tensor:
        """(n_obj, D) sum of category + attribute-value embeddings + box term."""
        cat_ids = np.asarray(
            [self._cat_index[o.category] for o in objects], dtype=np.int64
        )
        rows = self.category(cat_ids)
        for mc, table in self.attribute.items():
            unspecified = len(self.schema.metaconcepts[mc])
            ids = np.asarray(
                [
                    self._value_index[mc].get(o.attributes.get(mc), unspecified)
                    if o.attributes.get(mc) is not None
                    else unspecified
                    for o in objects
                ],
                dtype=np.int64,
            )
            rows = add(rows, table(ids))
        boxes = np.asarray([o.box for o in objects], dtype=np.float64)
        return add(rows, self.box_proj(Tensor(boxes)))


def embed_scene(
    embedder: SceneEmbedder,
    heads: "SceneGraphHeads",
    scene: SymbolicScene,
    n_slots: int,
    rng: RngState,
    noise_sigma: float = 0.0,
    slot_dropout: float = 0.0,
    strip_attributes: bool = False,
    strip_relations: bool = False,
) -> VectorSceneGraph:
    """Embed a symbolic scene into an order-less N-slot vector graph.

    Slot order is a seeded permutation; unused slots hold the learned
    "no object" vector; noisy mode adds Gaussian noise and may drop slots
    (simulated detector misses). Edge vectors are built for every ordered
    slot pair.
    """
    n_obj = len(scene.objects)
    if n_obj > n_slots:
        raise CapacityError(
            f"scene {scene.scene_id!r} has {n_obj} objects, capacity is {n_slots}"
        )
    if strip_attributes:
        scene = scene.strip_attributes()
    if strip_relations:
        scene = scene.strip_relations()

    # stacked source rows: real objects then the single no-object row
    if n_obj:
        source = concat(
            [embedder.object_rows(scene.objects), embedder.no_object(np.asarray([0]))],
            axis=0,
        )
    else:
        source = embedder.no_object(np.asarray([0]))
    source_of_slot = np.full(n_slots, n_obj, dtype=np.int64)
    source_of_slot[:n_obj] = np.arange(n_obj)
    dropped: set[int] = set()
    if slot_dropout > 0.0 and n_obj:
        drop_draw = rng.random(n_obj)
        for i in range(n_obj):
            if drop_draw[i] < slot_dropout:
                dropped.add(i)
                source_of_slot[i] = n_obj

    order = rng.permutation(n_slots)
    slot_sources = source_of_slot[order]
    objects_t = gather_rows(source, slot_sources)
    if noise_sigma > 0.0:
        objects_t = add(objects_t, Tensor(rng.normal(0.0, noise_sigma, (n_slots, embedder.dim))))

    slot_objects = tuple(
        int(order[s]) if order[s] < n_obj and order[s] not in dropped else None
        for s in range(n_slots)
    )

    # edges: pair encoding (Eq. LayerNorm(FF(o_i (+) o_j))) + predicate embedding
    idx_i, idx_j = _pair_indices(n_slots)
    oi = gather_rows(objects_t, idx_i)
    oj = gather_rows(objects_t, idx_j)
    pair_enc = heads.edge_ln(heads.edge_encoder(concat([oi, oj], axis=1)))

    rel_map = scene.relation_map()
    no_rel = embedder.no_relation_index()
    pred_ids = np.full(idx_i.shape[0], no_rel, dtype=np.int64)
    obj_id_of_slot = {
        s: scene.objects[slot_objects[s]].id
        for s in range(n_slots)
        if slot_objects[s] is not None
    }
    for r in range(idx_i.shape[0]):
        a = obj_id_of_slot.get(int(idx_i[r]))
        b = obj_id_of_slot.get(int(idx_j[r]))
        if a is not None and b is not None:
            pred = rel_map.get((a, b))
            if pred is not None:
                pred_ids[r] = embedder._pred_index[pred]
    edges_t = add(pair_enc, embedder.predicate(pred_ids))
    if noise_sigma > 0.0:
        edges_t = add(
            edges_t, Tensor(rng.normal(0.0, noise_sigma, (idx_i.shape[0], embedder.dim)))
        )

    return VectorSceneGraph(
        object_matrix=objects_t,
        edge_matrix=edges_t,
        slot_count=n_slots,
        slot_objects=slot_objects,
        scene_id=scene.scene_id,
    )


class SceneGraphHeads(Module):
    """Decoders back to symbols: category (+"no object"), per-metaconcept
    attributes (+"unspecified"), box regressor, relation (+"no relation"),
    and the pair/relation encoder feeding the edge vectors."""

    def __init__(self, schema: WorldSchema, dim: int, rng: RngState, name: str = "heads"):
        self.schema = schema
        self.dim = dim
        self.edge_encoder = FeedForwardLayer(f"{name}/edge_ff", 2 * dim, dim, rng)
        self.edge_ln = LayerNorm(f"{name}/edge_ln", dim)
        self.category = FeedForwardLayer(
            f"{name}/category", dim, len(schema.categories) + 1, rng
        )
        self.attribute = {
            mc: FeedForwardLayer(f"{name}/attr_{mc}", dim, len(values) + 1, rng)
            for mc, values in schema.metaconcepts.items()
        }
        self.box = MLP(f"{name}/box", [dim, dim, 4], rng)
        self.relation = FeedForwardLayer(
            f"{name}/relation", dim, len(schema.predicates) + 1, rng
        )

    @property
    def no_object_index(self) -> int:
        return len(self.schema.categories)

    @property
    def no_relation_index(self) -> int:
        return len(self.schema.predicates)


def build_edge_vector(heads: SceneGraphHeads, o_i: Tensor, o_j: Tensor) -> Tensor:
    """Edge vector for one ordered pair: LayerNorm(FeedForward(o_i (+) o_j))."""
    if o_i.shape != o_j.shape:
        raise DimensionError(
            f"object vectors disagree in shape: {o_i.shape} vs {o_j.shape}"
        )
    return heads.edge_ln(heads.edge_encoder(concat([o_i, o_j], axis=0)))


@dataclass
class GraphPredictions:
    category_logits: Tensor  # (N, C+1)
    attribute_logits: dict[str, Tensor]  # mc -> (N, V_mc+1)
    box: Tensor  # (N, 4)
    relation_logits: Tensor  # (N(N-1), P+1)
    slot_count: int

    def readout(self, schema: WorldSchema) -> SymbolicScene:
        """Argmax symbolic readout; "no object" slots and "no relation"
        pairs are dropped."""
        cat_ids = self.category_logits.data.argmax(axis=1)
        keep = [s for s in range(self.slot_count) if cat_ids[s] < len(schema.categories)]
        slot_to_new = {s: n for n, s in enumerate(keep)}
        objects = []
        for s in keep:
            attrs = {}
            for mc, values in schema.metaconcepts.items():
                vid = int(self.attribute_logits[mc].data[s].argmax())
                if vid < len(values):
                    attrs[mc] = values[vid]
            box = tuple(float(v) for v in self.box.data[s])
            objects.append(
                SymbolicObject(
                    id=slot_to_new[s],
                    category=schema.categories[int(cat_ids[s])],
                    attributes=attrs,
                    box=box,
                )
            )
        relations = []
        idx_i, idx_j = _pair_indices(self.slot_count)
        rel_ids = self.relation_logits.data.argmax(axis=1)
        for r in range(idx_i.shape[0]):
            a, b = int(idx_i[r]), int(idx_j[r])
            if a in slot_to_new and b in slot_to_new and rel_ids[r] < len(schema.predicates):
                relations.append(
                    (slot_to_new[a], schema.predicates[int(rel_ids[r])], slot_to_new[b])
                )
        return SymbolicScene("readout", tuple(objects), tuple(relations))


def predict_graph(vsg: VectorSceneGraph, heads: SceneGraphHeads) -> GraphPredictions:
    return GraphPredictions(
        category_logits=heads.category(vsg.object_matrix),
        attribute_logits={
            mc: layer(vsg.object_matrix) for mc, layer in heads.attribute.items()
        },
        box=heads.box(vsg.object_matrix),
        relation_logits=heads.relation(vsg.edge_matrix),
        slot_count=vsg.slot_count,
    )


# ------------------------------------------------------------------ matching


@dataclass(frozen=True)
class Matching:
    """Injective assignment of predicted slots to ground-truth objects."""

    slot_to_target: tuple[int | None, ...]
    total_cost: float

    def matched(self) -> list[tuple[int, int]]:
        return [(s, t) for s, t in enumerate(self.slot_to_target) if t is not None]


def hungarian_match(cost: np.ndarray) -> Matching:
    """Optimal assignment for an (N_pred x N_gt) cost matrix, N_pred >= N_gt."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionError(f"cost must be a matrix, got shape {cost.shape}")
    n_pred, n_gt = cost.shape
    if n_pred < n_gt:
        raise CapacityError(
            f"cannot match {n_gt} ground-truth objects into {n_pred} slots"
        )
    if not np.all(np.isfinite(cost)):
        raise ContractError("matching cost matrix contains non-finite entries")
    if n_gt == 0:
        return Matching(slot_to_target=(None,) * n_pred, total_cost=0.0)
    gt_to_slot = K.solve_assignment(np.ascontiguousarray(cost.T))
    slot_to_target: list[int | None] = [None] * n_pred
    total = 0.0
    for g, s in enumerate(gt_to_slot):
        slot_to_target[int(s)] = g
        total += float(cost[int(s), g])
    return Matching(slot_to_target=tuple(slot_to_target), total_cost=total)


def _tie_break(pred: GraphPredictions, objects) -> np.ndarray:
    """Deterministic pseudo-random (slot, object) jitter in [0, 1), derived
    from slot prediction bytes and object ids - both stable under list
    reordering. Identical slot rows hash identically, so ties between
    loss-equivalent slots survive (harmlessly)."""
    import hashlib

    slot_key = np.concatenate((pred.category_logits.data, pred.box.data), axis=1)
    slot_hash = np.asarray(
        [
            int.from_bytes(hashlib.blake2b(row.tobytes(), digest_size=8).digest(), "little")
            for row in slot_key
        ],
        dtype=np.uint64,
    )
    obj_hash = np.asarray(
        [
            int.from_bytes(
                hashlib.blake2b(str(o.id).encode(), digest_size=8).digest(), "little"
            )
            for o in objects
        ],
        dtype=np.uint64,
    )
    mixed = (slot_hash[:, None] * np.uint64(0x9E3779B97F4A7C15)) ^ obj_hash[None, :]
    return (mixed >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def set_prediction_loss(
    pred: GraphPredictions,
    scene: SymbolicScene,
    schema: WorldSchema,
    lambda_box: float = 1.0,
) -> tuple[Tensor, Matching]:
    """Optimal-matching set loss.

    Matching cost per (slot, object): category NLL + lambda_box * L1(box).
    Total loss: matched slots' category + attribute + box terms, unmatched
    slots' "no object" term, and relation cross-entropy over all ordered
    matched slot pairs (target "no relation" where the scene has no edge).
    """
    n = pred.slot_count
    objects = scene.objects
    n_gt = len(objects)
    if n_gt > n:
        raise CapacityError(f"{n_gt} objects exceed {n} prediction slots")

    cat_index = {c: i for i, c in enumerate(schema.categories)}
    gt_cats = np.asarray([cat_index[o.category] for o in objects], dtype=np.int64)
    gt_boxes = np.asarray([o.box for o in objects], dtype=np.float64)

    if n_gt:
        # matching cost is a pure readout of forward values (no gradient)
        log_probs = K.log_softmax_fwd(np.ascontiguousarray(pred.category_logits.data))
        cost = -log_probs[:, gt_cats]
        if lambda_box != 0.0:
            l1 = np.abs(pred.box.data[:, None, :] - gt_boxes[None, :, :]).sum(axis=2)
            cost = cost + lambda_box * l1
        # exact cost ties are not rare here (L1 is piecewise linear: two
        # same-category objects tie whenever both boxes sit on the same side
        # of both predictions). Break them by content, not list position, so
        # the chosen assignment - and with it the attribute/relation loss -
        # is invariant under any reordering of slots or ground-truth objects.
        match = hungarian_match(cost + 1e-6 * _tie_break(pred, objects))
        match = Matching(
            slot_to_target=match.slot_to_target,
            total_cost=sum(cost[s, t] for s, t in match.matched()),
        )
    else:
        match = Matching(slot_to_target=(None,) * n, total_cost=0.0)

    matched = match.matched()
    matched_slots = np.asarray([s for s, _ in matched], dtype=np.int64)
    matched_targets = [t for _, t in matched]
    unmatched_slots = np.asarray(
        [s for s in range(n) if match.slot_to_target[s] is None], dtype=np.int64
    )

    terms: list[Tensor] = []
    no_obj = len(schema.categories)
    if matched_slots.size:
        terms.append(
            cross_entropy_rows(
                gather_rows(pred.category_logits, matched_slots),
                gt_cats[matched_targets],
            )
        )
        for mc, values in schema.metaconcepts.items():
            unspecified = len(values)
            value_index = {v: i for i, v in enumerate(values)}
            targets = np.asarray(
                [
                    value_index.get(objects[t].attributes.get(mc), unspecified)
                    if objects[t].attributes.get(mc) is not None
                    else unspecified
                    for t in matched_targets
                ],
                dtype=np.int64,
            )
            terms.append(
                cross_entropy_rows(
                    gather_rows(pred.attribute_logits[mc], matched_slots), targets
                )
            )
        if lambda_box != 0.0:
            diff = add(
                gather_rows(pred.box, matched_slots),
                mul(Tensor(gt_boxes[matched_targets]), -1.0),
            )
            terms.append(mul(sum_all(abs_(diff)), lambda_box))
    if unmatched_slots.size:
        terms.append(
            cross_entropy_rows(
                gather_rows(pred.category_logits, unmatched_slots),
                np.full(unmatched_slots.size, no_obj, dtype=np.int64),
            )
        )

    # relation supervision over ordered pairs of matched slots
    if len(matched) >= 2:
        rel_map = scene.relation_map()
        pred_index = {p: i for i, p in enumerate(schema.predicates)}
        no_rel = len(schema.predicates)
        rows = []
        targets = []
        for slot_a, tgt_a in matched:
            for slot_b, tgt_b in matched:
                if slot_a == slot_b:
                    continue
                rows.append(pair_row(n, slot_a, slot_b))
                predicate = rel_map.get((objects[tgt_a].id, objects[tgt_b].id))
                targets.append(
                    pred_index[predicate] if predicate is not None else no_rel
                )
        terms.append(
            cross_entropy_rows(
                gather_rows(pred.relation_logits, np.asarray(rows, dtype=np.int64)),
                np.asarray(targets, dtype=np.int64),
            )
        )

    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total, match
