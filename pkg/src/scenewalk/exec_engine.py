"""The "Think" stage: recurrent neural traversal of the vector scene graph,
plus the exact symbolic executor that defines ground-truth bitmaps.

Per time step m, for every central node c and every neighbor k != c (the
vector graph is complete, so the neighborhood is all other nodes):

    f_k = FeedForward(o_k (+) e_{k,c} (+) h_{m-1} (+) i_m)      (features)
    c_c = mean_k f_k                                            (context)
    s_c = Softmax(FF(o_c (+) c_c (+) i_m))[traverse]            (score)
    h_m = sum_c s_c * o_c                                       (history)

The history is the exact weighted *sum* (scores do not sum to 1, so this
is not a normalized average). Bitmap readout is strict score > 0.5, ties
resolve to 0. h_0 is the zero vector; a singleton graph uses the zero
vector as its context.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, ValidationError
from .instruction import InstructionProgram, validate_program
from .nn.layers import FeedForwardLayer, Module
from .nn.rng import RngState
from .nn.tensor import (
    Tensor,
    add,
    concat,
    cross_entropy_rows,
    gather_rows,
    matmul,
    matmul_t,
    mul,
    narrow,
    relu,
    reshape,
    softmax_rows,
    transpose,
)
from .scene_graph import VectorSceneGraph, pair_row
from .world import SymbolicScene, WorldSchema

_NEIGHBOR_CACHE: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _neighbor_indices(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rows are grouped by central node: for central c, neighbors k != c.

    Returns (neighbor object index, edge row of (k, c), mean-pool matrix
    (n, n(n-1)) with 1/(n-1) at each central's own rows).
    """
    if n not in _NEIGHBOR_CACHE:
        obj_idx = []
        edge_idx = []
        for c in range(n):
            for k in range(n):
                if k != c:
                    obj_idx.append(k)
                    edge_idx.append(pair_row(n, k, c))
        pool = np.zeros((n, n * (n - 1)))
        for c in range(n):
            pool[c, c * (n - 1) : (c + 1) * (n - 1)] = 1.0 / (n - 1)
        _NEIGHBOR_CACHE[n] = (
            np.asarray(obj_idx, dtype=np.int64),
            np.asarray(edge_idx, dtype=np.int64),
            pool,
        )
    return _NEIGHBOR_CACHE[n]


@dataclass
class TraversalState:
    step: int
    scores: np.ndarray  # (N,) in (0, 1)
    bitmap: np.ndarray  # (N,) 0/1, scores > 0.5
    history: np.ndarray  # (D,)


@dataclass
class ExecTrace:
    states: list[TraversalState]
    step_logits: list[Tensor]  # (N, 2) per step, for the traversal loss
    histories: list[Tensor]  # (D,) per step, consumed by the answer stage
    decoded_instructions: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)


class ExecutionEngine(Module):
    def __init__(self, dim: int, rng: RngState, name: str = "engine"):
        self.dim = dim
        # two layers: relate execution is a soft conjunction ("neighbor was
        # active" x "edge matches the instruction"), out of reach for a
        # single affine+relu map
        self.feature_ff = FeedForwardLayer(
            f"{name}/feature", 4 * dim, dim, rng, activation="relu"
        )
        self.feature_out = FeedForwardLayer(f"{name}/feature_out", dim, dim, rng)
        self.classifier_hidden = FeedForwardLayer(
            f"{name}/cls_hidden", 3 * dim, dim, rng, activation="relu"
        )
        self.classifier_out = FeedForwardLayer(f"{name}/cls_out", dim, 2, rng)

    def execute(
        self, vsg: VectorSceneGraph, instruction_vectors: list[Tensor]
    ) -> ExecTrace:
        """Run all M steps over the complete graph; pure in (graph, ivs, params)."""
        if not instruction_vectors:
            raise ContractError("execute() needs at least one instruction vector")
        n, d = vsg.slot_count, vsg.dim
        if d != self.dim:
            raise DimensionError(f"graph dim {d} != engine dim {self.dim}")
        objects = vsg.object_matrix

        # the (o_k, e_{k,c}) half of the feature input never changes across
        # steps, so its product with the matching weight columns is hoisted
        w = self.feature_ff.weight
        w_static = narrow(w, 1, 0, 2 * d)
        w_dynamic = narrow(w, 1, 2 * d, 4 * d)
        if n >= 2:
            nb_obj, nb_edge, pool = _neighbor_indices(n)
            static_in = concat(
                [gather_rows(objects, nb_obj), gather_rows(vsg.edge_matrix, nb_edge)],
                axis=1,
            )
            static_part = matmul_t(static_in, w_static)
            pool_t = Tensor(pool)
        cls_w = self.classifier_hidden.weight
        cls_w_obj = narrow(cls_w, 1, 0, d)
        cls_w_ctx = narrow(cls_w, 1, d, 2 * d)
        cls_w_ins = narrow(cls_w, 1, 2 * d, 3 * d)
        cls_obj_part = matmul_t(objects, cls_w_obj)

        h_prev = Tensor(np.zeros((1, d)))
        states: list[TraversalState] = []
        step_logits: list[Tensor] = []
        histories: list[Tensor] = []
        for m, iv in enumerate(instruction_vectors, start=1):
            iv_row = reshape(iv, (1, d))
            if n >= 2:
                dyn = matmul_t(concat([h_prev, iv_row], axis=1), w_dynamic)
                hidden = relu(add(add(static_part, dyn), self.feature_ff.bias))
                features = self.feature_out(hidden)
                context = matmul(pool_t, features)
            else:
                context = Tensor(np.zeros((n, d)))  # singleton rule
            hidden = relu(
                add(
                    add(
                        add(cls_obj_part, matmul_t(context, cls_w_ctx)),
                        matmul_t(iv_row, cls_w_ins),
                    ),
                    self.classifier_hidden.bias,
                )
            )
            logits = self.classifier_out(hidden)
            probs = softmax_rows(logits)
            score_col = narrow(probs, 1, 1, 2)  # (N, 1) traverse probability
            h_m = matmul(transpose(score_col), objects)  # (1, D) weighted sum
            scores = score_col.data.reshape(-1).copy()
            states.append(
                TraversalState(
                    step=m,
                    scores=scores,
                    bitmap=(scores > 0.5).astype(np.int64),
                    history=h_m.data.reshape(-1).copy(),
                )
            )
            step_logits.append(logits)
            histories.append(reshape(h_m, (-1,)))
            h_prev = h_m
        return ExecTrace(states=states, step_logits=step_logits, histories=histories)


# -------------------------------------------------- single-pair reference ops


def neighbor_feature(
    engine: ExecutionEngine, o_k: Tensor, e_kc: Tensor, h_prev: Tensor, i_m: Tensor
) -> Tensor:
    """Feature of one neighbor: feed-forward over the 4-way concatenation."""
    for name, v in (("o_k", o_k), ("e_kc", e_kc), ("h_prev", h_prev), ("i_m", i_m)):
        if v.shape != (engine.dim,):
            raise DimensionError(
                f"{name} has shape {v.shape}, expected ({engine.dim},)"
            )
    return engine.feature_out(engine.feature_ff(concat([o_k, e_kc, h_prev, i_m], axis=0)))


def context_vector(features: list[Tensor], dim: int | None = None) -> Tensor:
    """Arithmetic mean of neighbor features; empty list = singleton rule."""
    if not features:
        if dim is None:
            raise ContractError("context_vector of zero features needs a dim")
        return Tensor(np.zeros(dim))
    total = features[0]
    for f in features[1:]:
        total = add(total, f)
    return mul(total, 1.0 / len(features))


def classify_node(
    engine: ExecutionEngine, o_c: Tensor, c_c: Tensor, i_m: Tensor
) -> Tensor:
    """Traversal confidence of one node: softmax over 2 logits, class 1."""
    hidden = engine.classifier_hidden(concat([o_c, c_c, i_m], axis=0))
    logits = engine.classifier_out(hidden)
    probs = softmax_rows(reshape(logits, (1, -1)))
    return reshape(narrow(probs, 1, 1, 2), ())


def history_vector(scores: Tensor, object_vectors: Tensor) -> Tensor:
    """Exact weighted sum over object vectors (no renormalization)."""
    if scores.shape[0] != object_vectors.shape[0]:
        raise DimensionError(
            f"{scores.shape[0]} scores vs {object_vectors.shape[0]} object vectors"
        )
    return reshape(matmul(reshape(scores, (1, -1)), object_vectors), (-1,))


def traversal_loss(step_logits: list[Tensor], gold_bitmaps: np.ndarray) -> Tensor:
    """Sum over steps and nodes of two-way cross-entropy vs the gold bits."""
    gold = np.asarray(gold_bitmaps, dtype=np.int64)
    if len(step_logits) != gold.shape[0]:
        raise DimensionError(
            f"{len(step_logits)} predicted steps vs {gold.shape[0]} gold bitmaps"
        )
    total: Tensor | None = None
    for m, logits in enumerate(step_logits):
        if logits.shape[0] != gold.shape[1]:
            raise DimensionError(
                f"step {m + 1}: {logits.shape[0]} nodes vs {gold.shape[1]} gold bits"
            )
        term = cross_entropy_rows(logits, gold[m])
        total = term if total is None else add(total, term)
    return total


# --------------------------------------------------------- symbolic oracle


@dataclass(frozen=True)
class OracleResult:
    bitmaps: np.ndarray  # (M, n_objects) 0/1, scene.objects order
    short_answer: str
    active_ids: tuple[int, ...]  # object ids active after the final step


def oracle_execute(
    scene: SymbolicScene,
    program: InstructionProgram,
    schema: WorldSchema | None = None,
    m_max: int = 5,
) -> OracleResult:
    """Exact set-semantics execution; the source of gold bitmaps.

    select c            -> objects of category c
    filter mc v         -> active objects with attributes[mc] == v
    relate p fwd        -> {t : some active s has (s, p, t)}   (bwd swaps roles)
    exist               -> set unchanged; "yes" iff non-empty
    query mc            -> set unchanged; value of the lowest-id active object
    verify mc v         -> set filtered to attributes[mc] == v for the bitmap;
                           answer follows the lowest-id *pre-verify* object
    Empty set at a terminal: "no" for exist/verify, "none" for query.
    """
    if schema is not None:
        validate_program(program, schema, m_max=m_max)
    objects = scene.objects
    pos_of_id = {o.id: i for i, o in enumerate(objects)}
    by_id = {o.id: o for o in objects}
    active: set[int] = set()
    bitmaps = np.zeros((len(program.steps), len(objects)), dtype=np.int64)
    short = ""
    for m, step in enumerate(program.steps):
        op, args = step.opcode, step.args
        if op == "select":
            active = {o.id for o in objects if o.category == args[0]}
        elif op == "filter":
            mc, value = args
            active = {i for i in active if by_id[i].attributes.get(mc) == value}
        elif op == "relate":
            predicate, direction = args
            if direction == "fwd":
                active = {t for s, p, t in scene.relations if p == predicate and s in active}
            else:
                active = {s for s, p, t in scene.relations if p == predicate and t in active}
        elif op == "exist":
            short = "yes" if active else "no"
        elif op == "query":
            if not active:
                short = "none"
            else:
                lowest = by_id[min(active)]
                short = lowest.attributes.get(args[0]) or "none"
        elif op == "verify":
            mc, value = args
            if not active:
                short = "no"
            else:
                lowest = by_id[min(active)]
                short = "yes" if lowest.attributes.get(mc) == value else "no"
            active = {i for i in active if by_id[i].attributes.get(mc) == value}
        else:
            raise ValidationError(f"oracle cannot execute opcode {op!r}")
        for i in active:
            bitmaps[m, pos_of_id[i]] = 1
    return OracleResult(
        bitmaps=bitmaps,
        short_answer=short,
        active_ids=tuple(sorted(active)),
    )


def expand_bitmaps_to_slots(
    bitmaps: np.ndarray, slot_objects: tuple[int | None, ...]
) -> np.ndarray:
    """Map per-object gold bitmaps onto embedding slots (empty slots -> 0)."""
    bitmaps = np.asarray(bitmaps, dtype=np.int64)
    out = np.zeros((bitmaps.shape[0], len(slot_objects)), dtype=np.int64)
    for s, obj_idx in enumerate(slot_objects):
        if obj_idx is not None:
            out[:, s] = bitmaps[:, obj_idx]
    return out
