"""Run directories, manifests and line-delimited metric logs."""

from __future__ import annotations

import json
import subprocess
import time
from pathlib import Path
from typing import Any, Callable, Iterator

from cgh.config import TrainConfig

METRICS_SCHEMA = {
    "type": "object",
    "required": ["step", "epoch", "L", "L_gh", "L_hg", "lr"],
    "properties": {
        "step": {"type": "integer", "minimum": 0},
        "epoch": {"type": "integer", "minimum": 0},
        "L": {"type": "number"},
        "L_gh": {"type": "number"},
        "L_hg": {"type": "number"},
        "lr": {"type": "number", "minimum": 0},
        "step_time": {"type": "number", "minimum": 0},
        "knn_acc": {"type": "number", "minimum": 0, "maximum": 1},
    },
    "additionalProperties": False,
}

PR_SCHEMA = {
    "type": "object",
    "required": ["epoch", "context", "threshold", "alpha", "precision", "recall", "predicted", "true_positive",
                 "positives"],
    "properties": {
        "epoch": {"type": "integer"},
        "context": {"enum": ["global", "hypercolumn"]},
        "threshold": {"type": "number"},
        "alpha": {"type": "number"},
        "precision": {"type": "number"},
        "recall": {"type": "number"},
        "predicted": {"type": "integer"},
        "true_positive": {"type": "integer"},
        "positives": {"type": "integer"},
        "zero_support": {"type": "boolean"},
    },
}


def code_version() -> str:
    from cgh import __version__

    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def make_run_dir(root: str | Path, cfg: TrainConfig, tag: str | None = None) -> Path:
    """Create ``<root>/<config digest>-<timestamp>[-tag]`` with the config snapshot and manifest."""
    stamp = time.strftime("%Y%m%d-%H%M%S")
    name = f"{cfg.digest()}-{stamp}" + (f"-{tag}" if tag else "")
    run_dir = Path(root) / name
    suffix = 1
    while run_dir.exists():
        run_dir = Path(root) / f"{name}.{suffix}"
        suffix += 1
    run_dir.mkdir(parents=True)
    init_run_dir(run_dir, cfg)
    return run_dir


def init_run_dir(run_dir: str | Path, cfg: TrainConfig) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    cfg.save(run_dir / "config.yaml")
    manifest = {
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "code_version": code_version(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return run_dir


class JsonlLog:
    """Append-only JSON-lines file, flushed after each record."""

    def __init__(self, path: str | Path, keep: Callable[[dict], bool] | None = None):
        self.path = Path(path)
        if keep is not None and self.path.exists():
            # drop records written after the checkpoint we resume from
            kept = [line for line in self.path.read_text().splitlines() if line.strip() and keep(json.loads(line))]
            self.path.write_text("".join(line + "\n" for line in kept))
        self._fh = open(self.path, "a")

    def write(self, record: dict[str, Any]) -> None:
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "JsonlLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
