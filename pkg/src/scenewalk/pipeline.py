"""End-to-end orchestration: the four-stage model, the summed training
loss, the training loop, evaluation (with scene ablations), perturbation
evaluation, and per-question explanation traces.

Mode contract:
  visual_oracle  - ground-truth scene embeddings feed downstream; the
                   scene-graph heads neither contribute loss nor update.
  reading_oracle - embedded gold programs bypass the parser (train + eval);
                   parser/text-decoder neither contribute loss nor update.
  end_to_end     - all four losses on clean embeddings.
  noisy          - all four losses with slot dropout + Gaussian noise.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .answer_gen import AnswerDecoder, question_type_of, score
from .config import PipelineConfig
from .errors import CheckpointError, ContractError, DataError
from .exec_engine import (
    ExecutionEngine,
    expand_bitmaps_to_slots,
    oracle_execute,
    traversal_loss,
)
from .instruction import (
    EOS,
    InstructionProgram,
    build_answer_vocab,
    build_instruction_vocab,
    build_question_vocab,
)
from .nn import checkpoint as ckpt
from .nn.layers import Module
from .nn.optim import clip_grad_norm, make_optimizer
from .nn.rng import RngState
from .nn.tensor import Tensor, add, backward, mean_all, mul, no_grad
from .parsing import InstructionTextDecoder, ProgramEmbedder, QuestionParser
from .perturb import (
    CueLexicons,
    drop_row,
    mask_question_record,
    question_has_relate,
    question_is_attribute_dependent,
)
from .scene_graph import (
    SceneEmbedder,
    SceneGraphHeads,
    embed_scene,
    predict_graph,
    set_prediction_loss,
)
from .world import SymbolicScene, WorldSchema, read_jsonl, read_scenes

REQUIRED_FIELDS = ("question_id", "scene_id", "tokens", "program", "short_answer", "full_answer", "bitmaps")


class PipelineModel(Module):
    def __init__(self, schema: WorldSchema, config: PipelineConfig):
        config.validate()
        self.schema = schema
        self.config = config
        rng = RngState(config.seed)
        d = config.dim
        self.question_vocab = build_question_vocab(schema)
        self.instruction_vocab = build_instruction_vocab(schema)
        self.answer_vocab = build_answer_vocab(schema)
        self.embedder = SceneEmbedder(schema, d, rng)
        self.heads = SceneGraphHeads(schema, d, rng)
        self.parser = QuestionParser(
            self.question_vocab,
            d,
            config.attn_heads,
            config.enc_blocks,
            config.m_max,
            rng,
            max_len=config.max_question_len,
            ffn_mult=config.ffn_mult,
        )
        self.text_decoder = InstructionTextDecoder(self.instruction_vocab, d, rng)
        self.prog_embedder = ProgramEmbedder(self.instruction_vocab, d, config.m_max, rng)
        self.engine = ExecutionEngine(d, rng)
        self.answerer = AnswerDecoder(
            self.answer_vocab,
            d,
            config.attn_heads,
            config.dec_blocks,
            config.a_max,
            config.m_max,
            rng,
            ffn_mult=config.ffn_mult,
        )

    def trainable_parameters(self) -> list:
        """Parameters updated in the current mode (head freezing etc.)."""
        frozen: set[int] = set()
        mode = self.config.mode
        if mode in ("visual_oracle", "reading_oracle"):
            frozen.update(id(p) for p in self.heads.parameters())
        if mode == "reading_oracle":
            frozen.update(id(p) for p in self.parser.parameters())
            frozen.update(id(p) for p in self.text_decoder.parameters())
        return [p for p in self.parameters() if id(p) not in frozen]

    def embed(
        self,
        scene: SymbolicScene,
        rng: RngState,
        strip_attributes: bool = False,
        strip_relations: bool = False,
        train: bool = False,
    ):
        noisy = self.config.mode == "noisy"
        if noisy:
            sigma = self.config.noise_sigma
        else:
            sigma = self.config.train_noise_sigma if train else 0.0
        return embed_scene(
            self.embedder,
            self.heads,
            scene,
            self.config.n_slots,
            rng,
            noise_sigma=sigma,
            slot_dropout=self.config.slot_dropout if (noisy and train) else 0.0,
            strip_attributes=strip_attributes,
            strip_relations=strip_relations,
        )


@dataclass
class Example:
    record: dict
    scene: SymbolicScene
    program: InstructionProgram
    step_targets: tuple[np.ndarray, ...]
    bitmaps: np.ndarray


def load_examples(
    data_dir: str | Path, split: str, schema: WorldSchema, model: PipelineModel
) -> list[Example]:
    data_dir = Path(data_dir)
    scenes = {s.scene_id: s for s in read_scenes(data_dir / f"{split}_scenes.jsonl")}
    examples = []
    for record in read_jsonl(data_dir / f"{split}_questions.jsonl"):
        for fld in REQUIRED_FIELDS:
            if fld not in record:
                raise DataError(
                    f"question {record.get('question_id', '?')!r} missing "
                    f"supervision field {fld!r}"
                )
        program = InstructionProgram.from_texts(record["program"])
        step_targets = tuple(
            model.instruction_vocab.encode([*step.tokens(), EOS])
            for step in program.steps
        )
        examples.append(
            Example(
                record=record,
                scene=scenes[record["scene_id"]],
                program=program,
                step_targets=step_targets,
                bitmaps=np.asarray(record["bitmaps"], dtype=np.int64),
            )
        )
    return examples


# ------------------------------------------------------------------- losses


def total_loss(
    model: PipelineModel,
    example: Example,
    rng: RngState,
    gold_program_phase: bool = False,
) -> tuple[Tensor, dict]:
    """Summed four-stage loss with teacher forcing.

    Components are reported under look/read/think/answer; their weighted
    values re-sum to the total exactly (same tensors, same order).
    """
    cfg = model.config
    mode = cfg.mode
    vsg = model.embed(example.scene, rng, train=True)

    terms: list[Tensor] = []
    components = {"look": 0.0, "read": 0.0, "think": 0.0, "answer": 0.0}

    if mode in ("end_to_end", "noisy") and cfg.lambda_look > 0:
        look, _ = set_prediction_loss(
            predict_graph(vsg, model.heads), example.scene, model.schema, cfg.lambda_box
        )
        look = mul(look, cfg.lambda_look)
        components["look"] = look.item()
        terms.append(look)

    m = len(example.program)
    use_gold_vectors = mode == "reading_oracle" or gold_program_phase
    gold_vectors = (
        model.prog_embedder(example.program) if use_gold_vectors else None
    )

    if mode != "reading_oracle":
        ivs, stop_logits = model.parser.parse(example.record["tokens"], gold_m=m)
        read = model.parser.stop_loss(stop_logits, m)
        for iv, targets in zip(ivs, example.step_targets):
            read = add(read, model.text_decoder.step_loss(iv, targets))
        read = mul(read, cfg.lambda_read)
        if gold_program_phase and cfg.lambda_align > 0:
            # pull the parser toward the program embedding it will replace
            align = None
            for iv, gold_iv in zip(ivs, gold_vectors):
                diff = add(iv, mul(gold_iv.detach(), -1.0))
                term = mean_all(mul(diff, diff))
                align = term if align is None else add(align, term)
            read = add(read, mul(align, cfg.lambda_align))
        components["read"] = read.item()
        terms.append(read)
    else:
        ivs = None

    engine_inputs = gold_vectors if use_gold_vectors else ivs
    trace = model.engine.execute(vsg, engine_inputs)
    gold_bits = expand_bitmaps_to_slots(example.bitmaps, vsg.slot_objects)
    think = mul(traversal_loss(trace.step_logits, gold_bits), cfg.lambda_think)
    components["think"] = think.item()
    terms.append(think)

    answer = mul(
        model.answerer.loss(trace.histories, engine_inputs, example.record["full_answer"]),
        cfg.lambda_answer,
    )
    components["answer"] = answer.item()
    terms.append(answer)

    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    components["total"] = total.item()
    return total, components


# ------------------------------------------------------------------ training


def train(
    config: PipelineConfig, data_dir: str | Path | None = None, out_dir: str | Path | None = None
) -> dict:
    """Full training run; writes config, best checkpoint, and the train log."""
    data_dir = Path(data_dir or config.data_dir)
    out_dir = Path(out_dir or config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schema = WorldSchema.load(data_dir / "schema.json")
    model = PipelineModel(schema, config)
    train_examples = load_examples(data_dir, "train", schema, model)
    valid_examples = load_examples(data_dir, "valid", schema, model)

    opt = make_optimizer(
        config.optimizer,
        model.trainable_parameters(),
        config.lr,
        momentum=config.momentum,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
    )
    rng = RngState(config.seed)
    decay_epochs = {
        int(tok) for tok in config.lr_decay_epochs.split(",") if tok.strip()
    }
    log: dict = {"config_hash": config.config_hash(), "epochs": []}
    best_acc = -1.0
    best_epoch = -1
    ckpt_path = out_dir / "checkpoint.ckpt"
    config.save(out_dir / "config.json")

    for epoch in range(1, config.epochs + 1):
        t0 = time.monotonic()
        if epoch in decay_epochs:
            opt.lr *= config.lr_decay_factor
        gold_phase = epoch <= config.gold_program_epochs
        order = list(range(len(train_examples)))
        rng.derive(f"shuffle/{epoch}").shuffle(order)
        sums = {"look": 0.0, "read": 0.0, "think": 0.0, "answer": 0.0, "total": 0.0}
        seen = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            for idx in batch:
                ex = train_examples[idx]
                ex_rng = rng.derive(f"embed/{epoch}/{ex.record['question_id']}")
                loss, comps = total_loss(model, ex, ex_rng, gold_program_phase=gold_phase)
                if not np.isfinite(comps["total"]):
                    raise ContractError(
                        f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}, "
                        f"question {ex.record['question_id']}"
                    )
                check = (
                    comps["look"] + comps["read"] + comps["think"] + comps["answer"]
                )
                if abs(check - comps["total"]) > 1e-9:
                    raise ContractError(
                        f"loss components do not re-sum to total: {comps}"
                    )
                backward(mul(loss, 1.0 / len(batch)))
                for key in sums:
                    sums[key] += comps[key]
                seen += 1
            clip_grad_norm(opt.params, config.grad_clip)
            opt.step()
            model.zero_grad()  # clears frozen modules touched by the forward pass
        valid_metrics = evaluate_examples(model, valid_examples)
        entry = {
            "epoch": epoch,
            "gold_program_phase": gold_phase,
            "valid_short_acc": valid_metrics["short_acc"],
            "valid_full_acc": valid_metrics["full_acc"],
            "wall_time_s": round(time.monotonic() - t0, 3),
        }
        for key in ("total", "look", "read", "think", "answer"):
            entry[f"loss_{key}"] = sums[key] / max(seen, 1)
        log["epochs"].append(entry)
        if valid_metrics["short_acc"] > best_acc:
            best_acc = valid_metrics["short_acc"]
            best_epoch = epoch
            ckpt.save_checkpoint(
                ckpt_path,
                model.parameters(),
                config.seed,
                config.config_hash(),
                extra={"epoch": epoch, "valid_short_acc": best_acc},
            )
        log["best_epoch"] = best_epoch
        log["best_valid_short_acc"] = best_acc
        # written every epoch so crashes keep their history
        (out_dir / "train_log.json").write_text(
            json.dumps(log, indent=2, sort_keys=True) + "\n"
        )
    return log


def load_model(checkpoint_path: str | Path, data_dir: str | Path) -> PipelineModel:
    manifest, values = ckpt.load_checkpoint(checkpoint_path)
    run_config = Path(checkpoint_path).parent / "config.json"
    if not run_config.exists():
        raise CheckpointError(f"missing config.json next to {checkpoint_path}")
    config = PipelineConfig.load(run_config)
    schema = WorldSchema.load(Path(data_dir) / "schema.json")
    model = PipelineModel(schema, config)
    try:
        ckpt.apply_checkpoint(model.parameters(), values)
    except CheckpointError as err:
        raise CheckpointError(
            f"checkpoint does not match the current world schema/config: {err}"
        ) from err
    return model


# ---------------------------------------------------------------- evaluation


def _decode_short(tokens: list[str]) -> str:
    if not tokens:
        return ""
    if tokens[0] in ("yes", "no"):
        return tokens[0]
    if len(tokens) >= 2 and tokens[-1] == ".":
        return tokens[-2]
    return tokens[0]


def run_question(
    model: PipelineModel,
    example: Example,
    rng: RngState,
    strip_attributes: bool = False,
    strip_relations: bool = False,
    tokens_override: list[str] | None = None,
):
    """Free-running forward pass for one question; returns (prediction,
    trace, decoded instruction texts, slot bookkeeping)."""
    with no_grad():
        vsg = model.embed(
            example.scene,
            rng,
            strip_attributes=strip_attributes,
            strip_relations=strip_relations,
        )
        if model.config.mode == "reading_oracle":
            ivs = model.prog_embedder(example.program)
        else:
            tokens = tokens_override if tokens_override is not None else example.record["tokens"]
            ivs, _ = model.parser.parse(tokens)
        trace = model.engine.execute(vsg, ivs)
        trace.decoded_instructions = [
            " ".join(model.text_decoder.decode(iv)) for iv in ivs
        ]
        answer_tokens = model.answerer.generate(trace.histories, ivs)
    prediction = {
        "question_id": example.record["question_id"],
        "full_answer": answer_tokens,
        "short_answer": _decode_short(answer_tokens),
    }
    return prediction, trace, vsg


def evaluate_examples(
    model: PipelineModel,
    examples: list[Example],
    strip_attributes: bool = False,
    strip_relations: bool = False,
    masked_tokens: dict[str, list[str]] | None = None,
) -> dict:
    """Answer metrics plus per-step bitmap agreement against the oracle.

    Bitmap agreement: exact = predicted step count equals gold and every
    step's slot bitmap matches; IoU is averaged over aligned steps and
    scaled by min(M)/max(M) when step counts differ (empty vs empty = 1).
    """
    eval_seed = RngState(model.config.seed).derive("eval")
    predictions = []
    exact = 0
    iou_sum = 0.0
    step_hits = 0
    step_total = 0
    for ex in examples:
        rng = eval_seed.derive(
            f"{ex.record['question_id']}/{int(strip_attributes)}{int(strip_relations)}"
        )
        tokens = masked_tokens.get(ex.record["question_id"]) if masked_tokens else None
        pred, trace, vsg = run_question(
            model,
            ex,
            rng,
            strip_attributes=strip_attributes,
            strip_relations=strip_relations,
            tokens_override=tokens,
        )
        predictions.append(pred)
        gold_bits = expand_bitmaps_to_slots(ex.bitmaps, vsg.slot_objects)
        m_pred, m_gold = len(trace), gold_bits.shape[0]
        aligned = min(m_pred, m_gold)
        match_all = m_pred == m_gold
        iou_acc = 0.0
        for m in range(aligned):
            p_bits = trace.states[m].bitmap
            g_bits = gold_bits[m]
            if not np.array_equal(p_bits, g_bits):
                match_all = False
            union = int(np.logical_or(p_bits, g_bits).sum())
            inter = int(np.logical_and(p_bits, g_bits).sum())
            iou_acc += 1.0 if union == 0 else inter / union
        if aligned:
            iou_acc = (iou_acc / aligned) * (aligned / max(m_pred, m_gold))
        exact += int(match_all)
        iou_sum += iou_acc
        gold_texts = ex.record["program"]
        for m in range(m_gold):
            step_total += 1
            if m < len(trace.decoded_instructions) and trace.decoded_instructions[m] == gold_texts[m]:
                step_hits += 1
    metrics = score(predictions, [ex.record for ex in examples])
    metrics["bitmap_exact"] = exact / len(examples) if examples else 0.0
    metrics["bitmap_mean_iou"] = iou_sum / len(examples) if examples else 0.0
    metrics["instruction_step_acc"] = step_hits / step_total if step_total else 0.0
    metrics["ablation"] = {
        "strip_attributes": strip_attributes,
        "strip_relations": strip_relations,
    }
    metrics["_predictions"] = predictions
    return metrics


def evaluate(
    checkpoint_path: str | Path,
    data_dir: str | Path,
    split: str = "testdev",
    strip_attributes: bool = False,
    strip_relations: bool = False,
    out_path: str | Path | None = None,
) -> dict:
    model = load_model(checkpoint_path, data_dir)
    examples = load_examples(data_dir, split, model.schema, model)
    metrics = evaluate_examples(
        model,
        examples,
        strip_attributes=strip_attributes,
        strip_relations=strip_relations,
    )
    predictions = metrics.pop("_predictions")
    metrics["split"] = split
    if out_path is not None:
        write_metrics(out_path, metrics, predictions)
    return metrics


def write_metrics(out_path: str | Path, metrics: dict, predictions: list[dict]) -> None:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    pred_path = out_path.with_suffix(".predictions.jsonl")
    with open(pred_path, "w", encoding="utf-8") as fh:
        for p in predictions:
            fh.write(json.dumps(p, separators=(",", ":"), sort_keys=True) + "\n")


def subset_short_acc(predictions: list[dict], records: list[dict], keep) -> tuple[float, int]:
    by_id = {p["question_id"]: p for p in predictions}
    kept = [r for r in records if keep(r)]
    if not kept:
        return 0.0, 0
    hits = sum(
        1 for r in kept if by_id[r["question_id"]]["short_answer"] == r["short_answer"]
    )
    return hits / len(kept), len(kept)


def perturb_eval(
    checkpoint_path: str | Path,
    data_dir: str | Path,
    split: str,
    mask_kind: str,
    lexicons: CueLexicons | None = None,
    out_path: str | Path | None = None,
) -> dict:
    """Before/after accuracy table for one mask kind (Table-style drops)."""
    model = load_model(checkpoint_path, data_dir)
    if lexicons is None:
        lexicons = CueLexicons.from_schema(model.schema)
    examples = load_examples(data_dir, split, model.schema, model)
    records = [ex.record for ex in examples]

    base = evaluate_examples(model, examples)
    base_preds = base.pop("_predictions")
    masked_tokens = {
        r["question_id"]: mask_question_record(r, mask_kind, lexicons)["tokens"]
        for r in records
    }
    masked = evaluate_examples(model, examples, masked_tokens=masked_tokens)
    masked_preds = masked.pop("_predictions")

    subsets = {
        "all": lambda r: True,
        "relate": question_has_relate,
        "attribute_dependent": question_is_attribute_dependent,
    }
    rows = []
    for name, keep in subsets.items():
        b_acc, n = subset_short_acc(base_preds, records, keep)
        a_acc, _ = subset_short_acc(masked_preds, records, keep)
        rows.append(drop_row(mask_kind, name, b_acc, a_acc, n))
    report = {
        "split": split,
        "mask_kind": mask_kind,
        "copulas_masked": lexicons.include_copulas,
        "rows": rows,
        "base_metrics": {k: v for k, v in base.items() if not k.startswith("_")},
        "masked_metrics": {k: v for k, v in masked.items() if not k.startswith("_")},
    }
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


# --------------------------------------------------------------- explanation


def explain(
    checkpoint_path: str | Path,
    data_dir: str | Path,
    question_id: str,
    split: str = "testdev",
) -> dict:
    """Human-readable per-step trace for one question."""
    model = load_model(checkpoint_path, data_dir)
    examples = load_examples(data_dir, split, model.schema, model)
    matching = [ex for ex in examples if ex.record["question_id"] == question_id]
    if not matching:
        raise DataError(f"unknown question id {question_id!r} in split {split!r}")
    ex = matching[0]
    rng = RngState(model.config.seed).derive(f"eval/{question_id}/00")
    pred, trace, vsg = run_question(model, ex, rng)
    slot_names = [
        f"{ex.scene.objects[obj].category}#{ex.scene.objects[obj].id}"
        if obj is not None
        else "(empty)"
        for obj in vsg.slot_objects
    ]
    steps = []
    for state, decoded in zip(trace.states, trace.decoded_instructions):
        active = [slot_names[i] for i in np.flatnonzero(state.bitmap)]
        steps.append(
            {
                "step": state.step,
                "instruction": decoded,
                "scores": [round(float(s), 6) for s in state.scores],
                "bitmap": state.bitmap.tolist(),
                "active_objects": active,
            }
        )
    return {
        "question_id": question_id,
        "question": ex.record["tokens"],
        "slots": slot_names,
        "steps": steps,
        "full_answer": pred["full_answer"],
        "short_answer": pred["short_answer"],
        "reference_short_answer": ex.record["short_answer"],
    }
