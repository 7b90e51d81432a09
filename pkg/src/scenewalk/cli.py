"""Command-line entry point.

Subcommands: gen-data, train, eval, perturb, perturb-eval, explain,
report, bench. Training/eval config comes from an optional JSON file; any
config field can be overridden with ``--key value``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .config import PipelineConfig
from .errors import SceneWalkError, ValidationError
from .perturb import CueLexicons, mask_question_record
from .world import WorldSchema, read_jsonl, write_jsonl
from .worldgen import WorldgenConfig, build_dataset


def _config_from_args(args, overrides: list[str]) -> PipelineConfig:
    config = (
        PipelineConfig.load(args.config) if args.config else PipelineConfig()
    )
    if len(overrides) % 2 != 0:
        raise ValidationError(f"dangling config override in {overrides}")
    pairs = {}
    for key, value in zip(overrides[::2], overrides[1::2]):
        if not key.startswith("--"):
            raise ValidationError(f"expected --key value overrides, got {key!r}")
        pairs[key[2:].replace("-", "_")] = value
    return config.apply_overrides(pairs)


def cmd_gen_data(args) -> int:
    schema = (
        WorldSchema.load(args.schema) if args.schema else WorldSchema.default()
    )
    config = WorldgenConfig(
        counts={"train": args.train, "valid": args.valid, "testdev": args.testdev},
        questions_per_scene=args.questions_per_scene,
        relate_fraction=args.relate_fraction,
        exist_negative_fraction=args.negative_fraction,
    )
    manifest = build_dataset(schema, config, args.out, args.seed)
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


def cmd_train(args, overrides: list[str]) -> int:
    from . import pipeline

    config = _config_from_args(args, overrides)
    if args.data:
        config.data_dir = args.data
    if args.out:
        config.out_dir = args.out
    log = pipeline.train(config)
    print(
        json.dumps(
            {
                "best_epoch": log["best_epoch"],
                "best_valid_short_acc": log["best_valid_short_acc"],
            },
            sort_keys=True,
        )
    )
    return 0


def cmd_eval(args) -> int:
    from . import pipeline

    out = args.out or (
        Path(args.checkpoint).parent
        / f"eval_{args.split}"
        f"{'_noattr' if args.strip_attributes else ''}"
        f"{'_norel' if args.strip_relations else ''}.json"
    )
    metrics = pipeline.evaluate(
        args.checkpoint,
        args.data,
        split=args.split,
        strip_attributes=args.strip_attributes,
        strip_relations=args.strip_relations,
        out_path=out,
    )
    view = {k: v for k, v in metrics.items() if k != "by_type"}
    print(json.dumps(view, indent=2, sort_keys=True))
    return 0


def cmd_perturb(args) -> int:
    records = read_jsonl(args.infile)
    lexicons = CueLexicons.load(args.lexicons, include_copulas=args.mask_copulas)
    masked = [mask_question_record(r, args.mask, lexicons) for r in records]
    write_jsonl(args.out, masked)
    n_changed = sum(1 for r in masked if r["masked_positions"])
    print(f"masked {n_changed}/{len(masked)} questions -> {args.out}")
    return 0


def cmd_perturb_eval(args) -> int:
    from . import pipeline

    lexicons = (
        CueLexicons.load(args.lexicons, include_copulas=args.mask_copulas)
        if args.lexicons
        else None
    )
    out = args.out or (
        Path(args.checkpoint).parent / f"perturb_{args.mask}_{args.split}.json"
    )
    report = pipeline.perturb_eval(
        args.checkpoint,
        args.data,
        split=args.split,
        mask_kind=args.mask,
        lexicons=lexicons,
        out_path=out,
    )
    for row in report["rows"]:
        print(f"{args.mask:>11} {row['subset']:<20} {row['formatted']}")
    return 0


def cmd_explain(args) -> int:
    from . import pipeline

    trace = pipeline.explain(args.checkpoint, args.data, args.question_id, split=args.split)
    print(json.dumps(trace, indent=2))
    return 0


def cmd_report(args) -> int:
    """Collect perturbation reports from a run directory into one CSV drop
    table ("drop (from -> to)" rows), plus any ablation eval summaries."""
    run = Path(args.run)
    rows = []
    for path in sorted(run.glob("perturb_*.json")):
        report = json.loads(path.read_text())
        for row in report["rows"]:
            rows.append(
                {
                    "kind": "mask",
                    "name": report["mask_kind"],
                    "subset": row["subset"],
                    "drop": f"{row['drop'] * 100:.2f}",
                    "from": f"{row['short_acc_before'] * 100:.2f}",
                    "to": f"{row['short_acc_after'] * 100:.2f}",
                    "formatted": row["formatted"],
                    "n": row["n"],
                }
            )
    for path in sorted(run.glob("eval_*.json")):
        metrics = json.loads(path.read_text())
        ablation = metrics.get("ablation", {})
        name = "base"
        if ablation.get("strip_attributes"):
            name = "strip_attributes"
        if ablation.get("strip_relations"):
            name = "strip_relations" if name == "base" else name + "+strip_relations"
        rows.append(
            {
                "kind": "eval",
                "name": name,
                "subset": "all",
                "drop": "",
                "from": "",
                "to": f"{metrics['short_acc'] * 100:.2f}",
                "formatted": f"short {metrics['short_acc'] * 100:.2f}% / full {metrics['full_acc'] * 100:.2f}%",
                "n": metrics["n"],
            }
        )
    out = Path(args.out or run / "report.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["kind", "name", "subset", "drop", "from", "to", "formatted", "n"]
        )
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows -> {out}")
    return 0


def cmd_bench(args) -> int:
    from .bench import format_table, run_engine_benchmark, run_kernel_benchmarks

    rows = run_kernel_benchmarks(repeats=args.repeats)
    rows.append(run_engine_benchmark(repeats=max(args.repeats // 10, 3)))
    print(format_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenewalk")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--schema", default=None, help="schema JSON (default world if omitted)")
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--valid", type=int, default=500)
    p.add_argument("--testdev", type=int, default=500)
    p.add_argument("--questions-per-scene", type=int, default=4)
    p.add_argument("--relate-fraction", type=float, default=0.45)
    p.add_argument("--negative-fraction", type=float, default=0.45)

    p = sub.add_parser(
        "train",
        help="train a pipeline (any config field: --key value)",
    )
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="testdev")
    p.add_argument("--strip-attributes", action="store_true")
    p.add_argument("--strip-relations", action="store_true")
    p.add_argument("--out", default=None)

    p = sub.add_parser("perturb", help="mask linguistic cues in a question file")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--mask", choices=("attributes", "vb_prpn"), required=True)
    p.add_argument("--lexicons", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-copulas", action="store_true")

    p = sub.add_parser("perturb-eval", help="before/after accuracy under masking")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="testdev")
    p.add_argument("--mask", choices=("attributes", "vb_prpn"), required=True)
    p.add_argument("--lexicons", default=None)
    p.add_argument("--mask-copulas", action="store_true")
    p.add_argument("--out", default=None)

    p = sub.add_parser("explain", help="per-step trace for one question")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--question-id", required=True)
    p.add_argument("--split", default="testdev")

    p = sub.add_parser("report", help="CSV drop table from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("bench", help="compare numba vs numpy kernels")
    p.add_argument("--repeats", type=int, default=200)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "train":
            return cmd_train(args, extra)
        if extra:
            parser.error(f"unrecognized arguments: {extra}")
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "perturb":
            return cmd_perturb(args)
        if args.command == "perturb-eval":
            return cmd_perturb_eval(args)
        if args.command == "explain":
            return cmd_explain(args)
        if args.command == "report":
            return cmd_report(args)
        if args.command == "bench":
            return cmd_bench(args)
    except SceneWalkError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
