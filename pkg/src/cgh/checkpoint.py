"""Single-file checkpoints.

Layout is a safetensors file: 8-byte little-endian header length, a JSON
header mapping tensor name -> {dtype, shape, data_offsets}, then raw
little-endian bytes.  Tensor names:

    student/<param or buffer>      teacher/<param or buffer>
    bank/global/entries            bank/global/labels
    bank/hypercolumn/entries       bank/hypercolumn/labels
    optim/<param index>/momentum_buffer

String metadata (``__metadata__`` in the header) holds ``format``
(``cgh-checkpoint``), ``format_version``, ``config`` (YAML), ``epoch``,
``step``, the bank cursors and the optimizer's param-group hyperparameters
(JSON).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import torch
import yaml
from safetensors import safe_open
from safetensors.torch import save_file

from cgh.bank import MemoryBank
from cgh.config import TrainConfig, from_mapping

FORMAT = "cgh-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    tensors: dict[str, torch.Tensor]
    epoch: int
    step: int
    meta: dict[str, str]

    def module_state(self, role: str) -> dict[str, torch.Tensor]:
        prefix = f"{role}/"
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def bank(self, name: str) -> MemoryBank | None:
        key = f"bank/{name}/entries"
        if key not in self.tensors:
            return None
        return MemoryBank(self.tensors[key].clone(), int(self.meta[f"bank/{name}/cursor"]),
                          self.tensors[f"bank/{name}/labels"].clone())


def save_checkpoint(path: str | Path, cfg: TrainConfig, student, teacher, banks: dict[str, MemoryBank],
                    optimizer: torch.optim.Optimizer | None, epoch: int, step: int,
                    extra: dict[str, str] | None = None) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tensors: dict[str, torch.Tensor] = {}
    for role, module in (("student", student), ("teacher", teacher)):
        for name, t in module.state_dict().items():
            tensors[f"{role}/{name}"] = t.detach().contiguous().clone()
    meta = {
        "format": FORMAT,
        "format_version": str(FORMAT_VERSION),
        "config": cfg.dumps(),
        "epoch": str(epoch),
        "step": str(step),
    }
    for name, bank in banks.items():
        if bank is None:
            continue
        tensors[f"bank/{name}/entries"] = bank.entries.contiguous().clone()
        tensors[f"bank/{name}/labels"] = bank.labels.contiguous().clone()
        meta[f"bank/{name}/cursor"] = str(bank.cursor)
    if optimizer is not None:
        state = optimizer.state_dict()
        for idx, pstate in state["state"].items():
            for key, value in pstate.items():
                if isinstance(value, torch.Tensor):
                    tensors[f"optim/{idx}/{key}"] = value.contiguous().clone()
        meta["optim/param_groups"] = json.dumps(state["param_groups"])
    if extra:
        meta.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    save_file(tensors, str(tmp), metadata=meta)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    tensors = {}
    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata() or {}
        for key in fh.keys():
            tensors[key] = fh.get_tensor(key)
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} file")
    if int(meta.get("format_version", -1)) != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
    cfg = from_mapping(yaml.safe_load(meta["config"]))
    return Checkpoint(cfg, tensors, int(meta["epoch"]), int(meta["step"]), meta)


def restore_optimizer(optimizer: torch.optim.Optimizer, ckpt: Checkpoint) -> None:
    groups = json.loads(ckpt.meta["optim/param_groups"])
    state: dict[int, dict] = {}
    for key, value in ckpt.tensors.items():
        if key.startswith("optim/"):
            _, idx, name = key.split("/", 2)
            state.setdefault(int(idx), {})[name] = value.clone()
    optimizer.load_state_dict({"state": state, "param_groups": groups})
