"""One-field sweeps over pretraining configs, each run scored by a frozen probe."""

from __future__ import annotations

import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

from cgh.config import TrainConfig, from_mapping
from cgh.data import load_dataset
from cgh.engine import pretrain
from cgh.evaluation import LinearRecipe, knn_eval, linear_eval
from cgh.runs import make_run_dir

log = logging.getLogger(__name__)

DEFAULT_VALUES: dict[str, list[Any]] = {
    "context_variant": ["cross", "same", "global"],
    "tau_h": [0.02, 0.04, 0.06, 0.08, 0.1],
    "layers": ["4", "1,4", "2,4", "3,4", "1,2,3,4"],
}


def variant_config(base: TrainConfig, field: str, value: Any, seed: int) -> TrainConfig:
    data = base.to_dict()
    data[field] = value
    data["seed"] = seed
    return from_mapping(data)


def run_one(cfg: TrainConfig, runs_root: str | Path, probe: str = "knn", tag: str | None = None,
            run_dir: str | Path | None = None) -> dict:
    run_dir = Path(run_dir) if run_dir is not None else make_run_dir(runs_root, cfg, tag)
    train_data = load_dataset(cfg, "train")
    val_data = load_dataset(cfg, "val")
    start = time.time()
    ckpt = pretrain(cfg, run_dir, train_data, val_data)
    row = {"run_dir": str(run_dir), "seed": cfg.seed, "train_seconds": round(time.time() - start, 1)}
    knn = knn_eval(ckpt, train_data, val_data)
    row["knn_acc"] = knn["best_acc"]
    row["knn_per_k"] = {str(k): v for k, v in knn["per_k"].items()}
    if probe == "linear":
        row["linear_acc"] = linear_eval(ckpt, train_data, val_data, LinearRecipe())["top1"]
    (run_dir / "eval.json").write_text(json.dumps(row, indent=2) + "\n")
    return row


def _job(args):
    cfg_dict, runs_root, probe, tag = args
    return run_one(from_mapping(cfg_dict), runs_root, probe, tag)


def run_ablation(base: TrainConfig, field: str, values: Sequence[Any] | None, seeds: Sequence[int],
                 runs_root: str | Path, probe: str = "knn", parallel: int = 1) -> list[dict]:
    """Pretrain + probe once per (value, seed); runs go to separate directories."""
    field = field.replace("-", "_")
    if field == "layer_set":
        field = "layers"
    values = list(values) if values is not None else DEFAULT_VALUES.get(field)
    if not values:
        raise ValueError(f"no values given for field {field!r}")
    jobs, meta = [], []
    for value in values:
        for seed in seeds:
            cfg = variant_config(base, field, value, seed)
            tag = f"{field}={value}-seed{seed}".replace(",", "_").replace(" ", "")
            jobs.append((cfg.to_dict(), str(runs_root), probe, tag))
            meta.append({"field": field, "value": value})
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(job) for job in jobs]
    return [dict(m, **r) for m, r in zip(meta, results)]


def summarize(rows: list[dict], metric: str = "knn_acc") -> list[dict]:
    out = []
    for value in dict.fromkeys(str(r["value"]) for r in rows):
        scores = [100.0 * r[metric] for r in rows if str(r["value"]) == value and metric in r]
        out.append({"value": value, "mean": statistics.fmean(scores),
                    "std": statistics.stdev(scores) if len(scores) > 1 else 0.0, "n": len(scores),
                    "scores": scores})
    return out


def format_table(rows: list[dict], field: str, metric: str = "knn_acc") -> str:
    lines = [f"| {field} | {metric} mean | std | per seed |", "|---|---|---|---|"]
    for s in summarize(rows, metric):
        per_seed = ", ".join(f"{v:.2f}" for v in s["scores"])
        lines.append(f"| {s['value']} | {s['mean']:.2f} | {s['std']:.2f} | {per_seed} |")
    return "\n".join(lines)


def write_report(rows: list[dict], field: str, out_dir: str | Path, metric: str = "knn_acc") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    (out_dir / "ablation.md").write_text(format_table(rows, field, metric) + "\n")
    return out_dir
