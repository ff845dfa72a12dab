"""Small-scale trend experiments: run the variant grid and score the expected orderings.

    python -m cgh.trends run --out results/trends
    python -m cgh.trends check --out results/trends

Every case shares the reduced base config below and differs in one field.
Finished runs (``eval.json`` present) are skipped, unfinished ones resume.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import statistics
import sys
from pathlib import Path

import numpy as np
import yaml

from cgh.ablation import run_one
from cgh.config import TrainConfig, from_mapping
from cgh.runs import read_jsonl

log = logging.getLogger(__name__)

BASE = {
    "dataset": "synthetic-shapes",
    "synthetic_classes": 20,
    "synthetic_train_per_class": 64,
    "synthetic_val_per_class": 50,
    "backbone": "resnet-mini",
    "embed_dim": 256,
    "hidden_dim": 1024,
    "bank_size": 1024,
    "epochs": 100,
    "batch_size": 128,
    "base_lr": 0.03,
    "ema_m": 0.99,
    # at 32 px a 0.2-area crop rarely keeps the object
    "crop_scale": [0.5, 1.0],
    "weak_crop_scale": [0.5, 1.0],
    "knn_monitor": True,
    "knn_monitor_k": 20,
    "pr_analysis": True,
    "checkpoint_every": 5,
}

CASES = {
    "cross": {},
    "same": {"context_variant": "same"},
    "global": {"context_variant": "global"},
    "tau_h=0.02": {"tau_h": 0.02},
    "tau_h=0.1": {"tau_h": 0.1},
    "layers=1,4": {"layers": [1, 4]},
    "layers=2,4": {"layers": [2, 4]},
    "layers=1,2,3,4": {"layers": [1, 2, 3, 4]},
}
SEEDS = (0, 1, 2)
METRIC = "knn_acc"
WARMUP_FRACTION = 0.1
SMOOTH_WINDOW = 10


def case_config(case: str, seed: int, **base_overrides) -> TrainConfig:
    data = dict(BASE, **base_overrides)
    data.update(CASES[case])
    data["seed"] = seed
    return from_mapping(data)


def run_dir_for(out: Path, case: str, seed: int) -> Path:
    return out / case.replace("=", "_").replace(",", "-") / f"seed{seed}"


def run_grid(out: str | Path, seeds=SEEDS, cases=None, **base_overrides) -> None:
    out = Path(out)
    for seed in seeds:  # seed-major so partial grids already cover whole comparisons
        for case in cases or CASES:
            run_dir = run_dir_for(out, case, seed)
            if (run_dir / "eval.json").exists():
                continue
            log.info("running %s seed %d", case, seed)
            cfg = case_config(case, seed, **base_overrides)
            row = run_one(cfg, out, probe="linear", run_dir=run_dir)
            log.info("%s seed %d: knn %.4f linear %.4f", case, seed, row["knn_acc"], row["linear_acc"])


def load_results(out: str | Path) -> dict:
    """``{case: {seed: {"eval": ..., "metrics": [...], "pr": [...]}}}`` for finished runs."""
    out = Path(out)
    results: dict = {}
    for case in CASES:
        for seed in SEEDS:
            run_dir = run_dir_for(out, case, seed)
            if not (run_dir / "eval.json").exists():
                continue
            entry = {"eval": json.loads((run_dir / "eval.json").read_text()),
                     "config": yaml.safe_load((run_dir / "config.yaml").read_text()),
                     "metrics": list(read_jsonl(run_dir / "metrics.jsonl"))}
            pr_path = run_dir / "pr.jsonl"
            entry["pr"] = list(read_jsonl(pr_path)) if pr_path.exists() else []
            results.setdefault(case, {})[seed] = entry
    return results


# ----------------------------------------------------------------------
# criteria; each returns (passed, details)
# ----------------------------------------------------------------------
def _acc(results: dict, case: str, seed: int) -> float:
    return 100.0 * results[case][seed]["eval"][METRIC]


def _seeds(results: dict, cases) -> list[int]:
    return [s for s in SEEDS if all(s in results.get(c, {}) for c in cases)]


def _majority(flags: list[bool]) -> bool:
    return len(flags) == len(SEEDS) and sum(flags) >= 2


def _means(results: dict, cases, seeds) -> dict:
    return {c: round(statistics.fmean(_acc(results, c, s) for s in seeds), 2) for c in cases} if seeds else {}


def check_context_ordering(results: dict) -> tuple[bool, dict]:
    cases = ("cross", "same", "global")
    seeds = _seeds(results, cases)
    flags = [_acc(results, "cross", s) - _acc(results, "global", s) >= 1.0
             and _acc(results, "cross", s) >= _acc(results, "same", s) for s in seeds]
    return _majority(flags), {"per_seed": dict(zip(seeds, flags)), "mean": _means(results, cases, seeds)}


def check_temperature_peak(results: dict) -> tuple[bool, dict]:
    cases = ("tau_h=0.02", "cross", "tau_h=0.1")
    seeds = _seeds(results, cases)
    flags = [_acc(results, "cross", s) > max(_acc(results, "tau_h=0.02", s), _acc(results, "tau_h=0.1", s))
             for s in seeds]
    return _majority(flags), {"per_seed": dict(zip(seeds, flags)), "mean": _means(results, cases, seeds)}


def check_layer_sets(results: dict) -> tuple[bool, dict]:
    # the global-context run is the {4} layer set: no hypercolumn branch at all
    multi = ("layers=1,4", "layers=2,4", "cross", "layers=1,2,3,4")
    seeds = _seeds(results, multi + ("global",))
    flags = [all(_acc(results, c, s) > _acc(results, "global", s) for c in multi) for s in seeds]
    return _majority(flags), {"per_seed": dict(zip(seeds, flags)),
                              "mean": _means(results, multi + ("global",), seeds)}


def _pr_curve(results: dict, case: str, context: str) -> dict:
    """Seed-averaged ``{(epoch, alpha): (precision, recall)}``."""
    acc: dict = {}
    for entry in results.get(case, {}).values():
        for rec in entry["pr"]:
            if rec["context"] == context:
                acc.setdefault((rec["epoch"], rec["alpha"]), []).append((rec["precision"], rec["recall"]))
    return {k: tuple(float(np.mean(col)) for col in zip(*v)) for k, v in acc.items()
            if len(v) == len(results[case])}


def check_teacher_recall(results: dict) -> tuple[bool, dict]:
    if len(_seeds(results, ("cross", "global"))) < len(SEEDS):
        return False, {"error": "cross/global runs missing"}
    cross = _pr_curve(results, "cross", "hypercolumn")
    base = _pr_curve(results, "global", "global")
    epochs = next(iter(results["cross"].values()))["config"]["epochs"]
    start = math.ceil(WARMUP_FRACTION * epochs)
    keys = sorted(k for k in cross if k in base and k[0] >= start)
    recall_fail, precision_fail = [], []
    for key in keys:
        (p_c, r_c), (p_g, r_g) = cross[key], base[key]
        if not r_c > r_g:
            recall_fail.append(key)
        if abs(p_c - p_g) > 0.1 * p_g:
            precision_fail.append(key)
    summary = {f"alpha={a:g}": {"recall_cross": round(cross[(e, a)][1], 4), "recall_global": round(base[(e, a)][1], 4),
                                "precision_cross": round(cross[(e, a)][0], 4),
                                "precision_global": round(base[(e, a)][0], 4)}
               for e, a in keys if e == keys[-1][0]} if keys else {}
    details = {"compared": len(keys), "recall_failures": len(recall_fail),
               "precision_failures": len(precision_fail), "last_epoch": summary}
    return bool(keys) and not recall_fail and not precision_fail, details


def smoothed(values, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    v = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(len(v))
    lo = np.maximum(0, idx + 1 - window)
    return (c[idx + 1] - c[lo]) / (idx + 1 - lo)


def knn_curve(metrics: list[dict]) -> list[float]:
    return [r["knn_acc"] for r in metrics if "knn_acc" in r]


def step0_ratio(entry: dict) -> float:
    """Step-0 loss per cross-entropy term divided by ln M."""
    cfg = entry["config"]
    terms = 1 if cfg["context_variant"] == "global" else 2
    return entry["metrics"][0]["L"] / terms / math.log(cfg["bank_size"])


def check_training_sanity(results: dict, val_size: int | None = None) -> tuple[bool, dict]:
    val_size = val_size or BASE["synthetic_classes"] * BASE["synthetic_val_per_class"]
    ratios, monotone = {}, {}
    # random banks put the step-0 loss at ln M + 1/(2 d tau^2) per term, so only
    # runs at the default temperatures are expected near ln M
    for case, runs in results.items():
        if case.startswith("tau_h"):
            continue
        for seed, entry in runs.items():
            ratios[f"{case}/seed{seed}"] = round(step0_ratio(entry), 4)
    for seed, entry in results.get("cross", {}).items():
        curve = smoothed(knn_curve(entry["metrics"]))
        half = curve[: max(2, len(curve) // 2)]
        monotone[seed] = bool(np.all(np.diff(half) >= -1.0 / val_size))
    ok = bool(ratios) and all(abs(r - 1) <= 0.1 for r in ratios.values()) \
        and len(monotone) == len(SEEDS) and all(monotone.values())
    return ok, {"step0_ratio_range": [min(ratios.values()), max(ratios.values())] if ratios else None,
                "knn_monotone_first_half": monotone}


CRITERIA = {
    "context ordering": check_context_ordering,
    "temperature peak": check_temperature_peak,
    "layer sets": check_layer_sets,
    "teacher recall": check_teacher_recall,
    "training sanity": check_training_sanity,
}


def check_all(out: str | Path) -> dict:
    results = load_results(out)
    return {name: fn(results) for name, fn in CRITERIA.items()}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m cgh.trends")
    parser.add_argument("command", choices=("run", "check"))
    parser.add_argument("--out", default="results/trends")
    parser.add_argument("--seeds", default=",".join(map(str, SEEDS)))
    parser.add_argument("--epochs", type=int, default=BASE["epochs"])
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    if args.command == "run":
        run_grid(args.out, [int(s) for s in args.seeds.split(",")], epochs=args.epochs)
    report = check_all(args.out)
    for name, (ok, details) in report.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}: {json.dumps(details)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
