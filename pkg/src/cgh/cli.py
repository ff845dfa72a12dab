"""Command-line entry point: ``cgh <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from cgh.config import ConfigError, from_mapping, load_config

COMMANDS = ("pretrain", "knn-eval", "linear-eval", "semi-eval", "pr-analysis", "export-embeddings", "ablate")


def _emit(records, summary: str) -> None:
    for rec in records:
        print(json.dumps(rec))
    print(summary, file=sys.stderr)


def _data_for(ckpt_path: str, overrides: list[str]):
    from cgh.checkpoint import load_checkpoint
    from cgh.data import load_dataset

    ckpt = load_checkpoint(ckpt_path)
    cfg = from_mapping(ckpt.config.to_dict(), overrides)
    return ckpt, load_dataset(cfg, "train"), load_dataset(cfg, "val")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_pretrain(args) -> int:
    from cgh.engine import pretrain
    from cgh.runs import make_run_dir

    cfg = load_config(args.config, args.set)
    run_dir = Path(args.run_dir) if args.run_dir else make_run_dir(args.runs_root, cfg)
    final = pretrain(cfg, run_dir, resume=not args.no_resume)
    _emit([{"run_dir": str(run_dir), "checkpoint": str(final)}], f"pretraining finished: {final}")
    return 0


def cmd_knn(args) -> int:
    from cgh.evaluation import knn_eval, load_encoder

    ckpt, train, val = _data_for(args.checkpoint, args.set)
    net, _ = load_encoder(ckpt, args.role)
    res = knn_eval(net, train, val, _int_list(args.k))
    records = [{"k": k, "acc": acc} for k, acc in res["per_k"].items()]
    records.append({"best_k": res["best_k"], "best_acc": res["best_acc"]})
    _emit(records, f"KNN best accuracy {100 * res['best_acc']:.2f}% at k={res['best_k']}")
    return 0


def cmd_linear(args) -> int:
    from cgh.evaluation import LinearRecipe, linear_eval, load_encoder

    ckpt, train, val = _data_for(args.checkpoint, args.set)
    net, _ = load_encoder(ckpt, args.role)
    recipe = LinearRecipe(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                          weight_decay=args.weight_decay, momentum=args.momentum)
    res = linear_eval(net, train, val, recipe, input_mode=args.input_mode, seed=args.seed)
    _emit([dict(res, input_mode=args.input_mode)], f"linear ({args.input_mode}) top-1 {100 * res['top1']:.2f}%")
    return 0


def cmd_semi(args) -> int:
    from cgh.evaluation import load_encoder, semi_supervised_finetune

    ckpt, train, val = _data_for(args.checkpoint, args.set)
    net, _ = load_encoder(ckpt, args.role)
    res = semi_supervised_finetune(net, train, val, args.fraction, seed=args.seed)
    _emit([dict(res, fraction=args.fraction)], f"semi-supervised ({args.fraction:g}) top-1 {100 * res['top1']:.2f}%")
    return 0


def cmd_pr(args) -> int:
    from cgh.evaluation import teacher_pr_analysis

    ckpt, train, val = _data_for(args.checkpoint, args.set)
    data = val if args.split == "val" else train
    if args.limit:
        data = data.subset(range(min(args.limit, len(data))))
    records = teacher_pr_analysis(ckpt, data, args.context)
    lines = [f"alpha={r['alpha']:g}: precision={r['precision']:.3f} recall={r['recall']:.3f}" for r in records]
    _emit(records, "\n".join(lines))
    return 0


def cmd_export(args) -> int:
    from cgh.evaluation import export_embeddings, load_encoder

    ckpt, train, val = _data_for(args.checkpoint, args.set)
    net, _ = load_encoder(ckpt, args.role)
    data = val if args.split == "val" else train
    path = export_embeddings(net, data, args.layer, args.out)
    _emit([{"path": str(path), "rows": len(data), "layer": args.layer}], f"wrote {len(data)} rows to {path}")
    return 0


def cmd_ablate(args) -> int:
    from cgh.ablation import format_table, run_ablation, write_report

    cfg = load_config(args.config, args.set)
    values = None
    if args.values:
        # a layer set itself contains commas, so layer sets are ';'-separated
        is_layers = args.field.replace("-", "_") in ("layers", "layer_set")
        values = [v.strip() for v in args.values.split(";" if is_layers else ",") if v.strip()]
    seeds = _int_list(args.seeds)
    root = Path(args.runs_root) / f"ablate-{args.field}-{time.strftime('%Y%m%d-%H%M%S')}"
    rows = run_ablation(cfg, args.field, values, seeds, root, probe=args.probe, parallel=args.parallel)
    metric = "linear_acc" if args.probe == "linear" else "knn_acc"
    write_report(rows, args.field, root, metric)
    _emit(rows, format_table(rows, args.field, metric))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgh", description="Cross-context global/hypercolumn SSL")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def with_overrides(p):
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, applied after defaults and before validation")
        return p

    def with_checkpoint(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--role", choices=("student", "teacher"), default="student")
        return with_overrides(p)

    p = with_overrides(sub.add_parser("pretrain", help="run self-supervised pretraining"))
    p.add_argument("--config")
    p.add_argument("--runs-root", default="runs")
    p.add_argument("--run-dir", help="explicit run directory (resumes if it holds a checkpoint)")
    p.add_argument("--no-resume", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = with_checkpoint(sub.add_parser("knn-eval", help="KNN probe on pooled features"))
    p.add_argument("--k", default="10,20,100,200")
    p.set_defaults(func=cmd_knn)

    p = with_checkpoint(sub.add_parser("linear-eval", help="linear probe on frozen features"))
    p.add_argument("--input-mode", choices=("global", "hypercolumn"), default="global")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=3.0)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_linear)

    p = with_checkpoint(sub.add_parser("semi-eval", help="fine-tune on a labeled fraction"))
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_semi)

    p = with_overrides(sub.add_parser("pr-analysis", help="precision/recall of the teacher distribution"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--context", choices=("global", "hypercolumn"), default="hypercolumn")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--limit", type=int, default=0, help="use only the first N labeled images")
    p.set_defaults(func=cmd_pr)

    p = with_checkpoint(sub.add_parser("export-embeddings", help="dump (id, label, vector) records"))
    p.add_argument("--layer", choices=("pooled", "hypercolumn", "projected"), default="pooled")
    p.add_argument("--split", choices=("train", "val"), default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = with_overrides(sub.add_parser("ablate", help="sweep one config field"))
    p.add_argument("--config")
    p.add_argument("--field", required=True, choices=("context-variant", "context_variant", "tau_h", "tau-h",
                                                      "layers", "layer-set", "layer_set"))
    p.add_argument("--values", help="comma-separated values (layer sets: ';'-separated, e.g. '4;1,4;1,2,3,4')")
    p.add_argument("--seeds", default="0")
    p.add_argument("--runs-root", default="runs")
    p.add_argument("--probe", choices=("knn", "linear"), default="knn")
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=cmd_ablate)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
