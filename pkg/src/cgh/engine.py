"""Pretraining loop: dual forward, cross-context loss, one backward, EMA, enqueue."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader

from cgh import augment
from cgh.bank import MemoryBank, init_bank
from cgh.checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from cgh.config import TrainConfig
from cgh.data import LabeledImages, PairDataset, collate, load_dataset
from cgh.ema import ema_update
from cgh.evaluation import extract_features, knn_accuracy, pr_counts, pr_from_counts, pr_thresholds
from cgh.losses import cgh_loss
from cgh.models import CGHNetwork, build_networks
from cgh.runs import JsonlLog, init_run_dir

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass
class StepMetrics:
    step: int
    epoch: int
    loss: float
    loss_gh: float
    loss_hg: float
    lr: float
    step_time: float

    def record(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "L": self.loss, "L_gh": self.loss_gh,
                "L_hg": self.loss_hg, "lr": self.lr, "step_time": self.step_time}


@dataclass
class TrainState:
    cfg: TrainConfig
    student: CGHNetwork
    teacher: CGHNetwork
    optimizer: torch.optim.Optimizer
    bank: MemoryBank
    hyper_bank: MemoryBank | None
    step: int = 0
    epoch: int = 0
    # per-context PR counts accumulated over the current epoch
    pr_accum: dict = field(default_factory=dict)

    @property
    def banks(self) -> dict[str, MemoryBank | None]:
        return {"global": self.bank, "hypercolumn": self.hyper_bank}


def create_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    student, teacher = build_networks(cfg)
    optimizer = torch.optim.SGD(student.parameters(), lr=cfg.base_lr, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    bank = init_bank(cfg.bank_size, cfg.embed_dim, gen)
    hyper_bank = init_bank(cfg.bank_size, cfg.embed_dim, gen) if cfg.context_variant != "global" else None
    return TrainState(cfg, student, teacher, optimizer, bank, hyper_bank)


def cosine_lr(base_lr: float, step: int, total_steps: int, warmup_steps: int = 0) -> float:
    """Linear warmup to ``base_lr``, then half-cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))


def _diagnostics(out1, out2, state: TrainState) -> dict:
    diag = {"tau_s": state.cfg.tau_s, "tau_t": state.cfg.tau_t, "tau_h": state.cfg.tau_h}
    with torch.no_grad():
        for name, z, bank in (("z_g1", out1.z_g, state.bank), ("z_g2", out2.z_g, state.bank),
                              ("z_h1", out1.z_h, state.hyper_bank), ("z_h2", out2.z_h, state.hyper_bank)):
            if z is None:
                continue
            norms = z.norm(dim=1)
            diag[f"{name}_norm_min"] = float(norms.min())
            diag[f"{name}_norm_max"] = float(norms.max())
            diag[f"{name}_max_sim"] = float((z @ bank.entries.T.to(z.dtype)).max())
    return diag


def train_step(state: TrainState, x1: torch.Tensor, x2: torch.Tensor, lr: float,
               labels: torch.Tensor | None = None) -> StepMetrics:
    """One optimisation step on a batch of (contrastive view, weak view) pairs.

    The banks are read before and written after the update, so the current
    batch never appears in its own comparison set.
    """
    cfg = state.cfg
    start = time.perf_counter()
    state.student.train()
    state.teacher.train()  # batch statistics; BN buffers follow the student via EMA
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    out1 = state.student(x1)
    with torch.no_grad():
        out2 = state.teacher(x2)
    bundle = cgh_loss(out1.z_g, out1.z_h, out2.z_g, out2.z_h, state.bank, state.hyper_bank,
                      cfg.tau_s, cfg.tau_t, cfg.tau_h, cfg.context_variant)
    if not torch.isfinite(bundle.loss):
        raise NonFiniteLossError(f"non-finite loss at step {state.step}", _diagnostics(out1, out2, state))

    state.optimizer.zero_grad(set_to_none=True)
    bundle.loss.backward()
    state.optimizer.step()
    ema_update(state.teacher, state.student, cfg.ema_m)

    if labels is not None and cfg.pr_analysis:
        _accumulate_pr(state, bundle.teacher_dists, labels)
    state.bank.enqueue(out2.z_g.detach(), labels)
    if state.hyper_bank is not None:
        state.hyper_bank.enqueue(out2.z_h.detach(), labels)

    metrics = StepMetrics(step=state.step, epoch=state.epoch, loss=bundle.loss.item(),
                          loss_gh=bundle.loss_gh.item(), loss_hg=bundle.loss_hg.item(), lr=float(lr),
                          step_time=time.perf_counter() - start)
    state.step += 1
    return metrics


def _accumulate_pr(state: TrainState, dists: dict, labels: torch.Tensor) -> None:
    thresholds = [t for _, t in pr_thresholds(state.cfg.bank_size)]
    for context, bank in state.banks.items():
        if bank is None or context not in dists or not bank.is_labeled:
            continue
        counts = pr_counts(dists[context], labels, bank.labels, thresholds)
        acc = state.pr_accum.setdefault(context, [dict(c, predicted=0, true_positive=0, positives=0)
                                                  for c in counts])
        for a, c in zip(acc, counts):
            for key in ("predicted", "true_positive", "positives"):
                a[key] += c[key]


def pop_pr_records(state: TrainState) -> list[dict]:
    alphas = [a for a, _ in pr_thresholds(state.cfg.bank_size)]
    records = []
    for context, acc in sorted(state.pr_accum.items()):
        for alpha, counts in zip(alphas, acc):
            rec = pr_from_counts(counts)
            rec.update({"epoch": state.epoch, "context": context, "alpha": alpha})
            records.append(rec)
    state.pr_accum = {}
    return records


# ----------------------------------------------------------------------
# full runs
# ----------------------------------------------------------------------
def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Shuffled index batches for one epoch (incomplete last batch dropped)."""
    gen = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, epoch, 7]).generate_state(1)[0]))
    perm = torch.randperm(n, generator=gen).tolist()
    return [perm[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def view_specs(cfg: TrainConfig, data: LabeledImages) -> tuple[augment.ViewSpec, augment.ViewSpec]:
    return (augment.contrastive_spec(cfg, data.image_size, data.mean, data.std),
            augment.weak_spec(cfg, data.image_size, data.mean, data.std))


def knn_monitor(state: TrainState, train_data: LabeledImages, val_data: LabeledImages) -> float:
    """KNN accuracy of the student's projected embeddings (monitoring only)."""
    train_f, train_y = extract_features(state.student, train_data, "projected")
    val_f, val_y = extract_features(state.student, val_data, "projected")
    k = min(state.cfg.knn_monitor_k, len(train_f))
    return knn_accuracy(train_f, train_y, val_f, val_y, [k], num_classes=train_data.num_classes)["best_acc"]


def save_state(state: TrainState, path: Path) -> Path:
    return save_checkpoint(path, state.cfg, state.student, state.teacher, state.banks, state.optimizer,
                           epoch=state.epoch, step=state.step)


def load_state(path: str | Path) -> TrainState:
    ckpt = load_checkpoint(path)
    state = create_state(ckpt.config)
    state.student.load_state_dict(ckpt.module_state("student"))
    state.teacher.load_state_dict(ckpt.module_state("teacher"))
    restore_optimizer(state.optimizer, ckpt)
    state.bank = ckpt.bank("global")
    state.hyper_bank = ckpt.bank("hypercolumn")
    state.step = ckpt.step
    state.epoch = ckpt.epoch
    return state


def pretrain(cfg: TrainConfig, run_dir: str | Path, train_data: LabeledImages | None = None,
             val_data: LabeledImages | None = None, stop_after_epoch: int | None = None,
             resume: bool = True) -> Path:
    """Run (or resume) pretraining in ``run_dir``; returns the final checkpoint path.

    ``stop_after_epoch`` ends the run early after that many epochs, leaving
    ``checkpoints/last.safetensors`` to resume from.
    """
    run_dir = init_run_dir(run_dir, cfg)
    last = run_dir / "checkpoints" / "last.safetensors"
    if train_data is None:
        train_data = load_dataset(cfg, "train")
    if val_data is None and cfg.knn_monitor:
        val_data = load_dataset(cfg, "val")
    if len(train_data) < cfg.batch_size:
        raise ValueError(f"dataset of {len(train_data)} images is smaller than one batch ({cfg.batch_size})")

    if resume and last.exists():
        state = load_state(last)
        if state.cfg != cfg:
            raise ValueError(f"{last} was written with a different config")
        log.info("resuming from %s at epoch %d (step %d)", last, state.epoch, state.step)
    else:
        state = create_state(cfg)
    resumed_step, resumed_epoch = state.step, state.epoch
    metrics_log = JsonlLog(run_dir / "metrics.jsonl", keep=lambda r: r["step"] < resumed_step)
    pr_log = JsonlLog(run_dir / "pr.jsonl", keep=lambda r: r["epoch"] < resumed_epoch) if cfg.pr_analysis else None

    strong, weak = view_specs(cfg, train_data)
    dataset = PairDataset(train_data, strong, weak, cfg.seed)
    steps_per_epoch = len(train_data) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    final = run_dir / "checkpoints" / "final.safetensors"

    try:
        while state.epoch < cfg.epochs:
            dataset.set_epoch(state.epoch)
            batches = epoch_batches(len(train_data), cfg.batch_size, cfg.seed, state.epoch)
            loader = DataLoader(dataset, batch_sampler=batches, num_workers=cfg.num_workers, collate_fn=collate)
            for i, (x1, x2, labels, _) in enumerate(loader):
                lr = cosine_lr(cfg.base_lr, state.step, total_steps, warmup_steps)
                metrics = train_step(state, x1, x2, lr, labels)
                record = metrics.record()
                if i == len(batches) - 1 and cfg.knn_monitor and val_data is not None:
                    record["knn_acc"] = knn_monitor(state, train_data, val_data)
                metrics_log.write(record)
            if pr_log is not None:
                for rec in pop_pr_records(state):
                    pr_log.write(rec)
            state.epoch += 1
            log.info("epoch %d/%d done, L=%.4f", state.epoch, cfg.epochs, metrics.loss)
            if state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs:
                save_state(state, last)
            if stop_after_epoch is not None and state.epoch >= stop_after_epoch and state.epoch < cfg.epochs:
                save_state(state, last)
                return last
        save_state(state, final)
    finally:
        metrics_log.close()
        if pr_log is not None:
            pr_log.close()
    return final
