"""Frozen-representation probes and teacher-distribution analysis."""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader

from cgh import augment
from cgh.bank import MemoryBank
from cgh.checkpoint import Checkpoint, load_checkpoint
from cgh.data import AugmentedLabeledDataset, EvalDataset, LabeledImages, collate
from cgh.losses import similarity_distribution
from cgh.models import CGHNetwork, build_networks

KNN_K = (10, 20, 100, 200)
PR_ALPHAS = (1, 2, 5, 10, 20, 50)
LAYERS = ("pooled", "hypercolumn", "projected")


# ----------------------------------------------------------------------
# encoders and features
# ----------------------------------------------------------------------
def load_encoder(checkpoint: str | Path | Checkpoint, role: str = "student") -> tuple[CGHNetwork, Checkpoint]:
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if role not in ("student", "teacher"):
        raise ValueError(f"role must be 'student' or 'teacher', got {role!r}")
    student, teacher = build_networks(ckpt.config)
    net = student if role == "student" else teacher
    net.load_state_dict(ckpt.module_state(role))
    net.eval()
    return net, ckpt


@torch.no_grad()
def extract_features(net: CGHNetwork, data: LabeledImages, layer: str = "pooled",
                     batch_size: int = 256) -> tuple[torch.Tensor, torch.Tensor]:
    """Features of every image under the deterministic eval view, in dataset order."""
    if layer not in LAYERS:
        raise ValueError(f"layer must be one of {LAYERS}, got {layer!r}")
    if layer == "hypercolumn" and net.hyper_head is None:
        raise ValueError("this encoder has no hypercolumn head (global-context run)")
    was_training = net.training
    net.eval()
    loader = DataLoader(EvalDataset(data), batch_size=batch_size, shuffle=False, collate_fn=collate)
    feats, labels = [], []
    for x, y, _ in loader:
        _, h_g, h_h = net.contexts(x)
        if layer == "pooled":
            f = h_g
        elif layer == "hypercolumn":
            f = h_h
        else:
            f = net.projector(h_g)
        feats.append(f)
        labels.append(y)
    net.train(was_training)
    return torch.cat(feats), torch.cat(labels)


# ----------------------------------------------------------------------
# KNN
# ----------------------------------------------------------------------
@torch.no_grad()
def knn_predict(train_feats: torch.Tensor, train_labels: torch.Tensor, query_feats: torch.Tensor,
                k_list: Sequence[int], num_classes: int, temperature: float = 0.07,
                weighting: str = "exp", chunk: int = 1024) -> dict[int, torch.Tensor]:
    """Cosine-similarity KNN; each of the k neighbours votes for its class.

    ``weighting="exp"`` weights a vote by exp(sim / temperature), ``"uniform"``
    counts votes.  Ties go to the lowest class index.
    """
    if len(train_feats) == 0 or len(query_feats) == 0:
        raise ValueError("KNN needs nonempty train and query sets")
    if max(k_list) > len(train_feats):
        raise ValueError(f"k={max(k_list)} exceeds the {len(train_feats)} training samples")
    if weighting not in ("exp", "uniform"):
        raise ValueError(f"unknown weighting {weighting!r}")
    bank = F.normalize(train_feats.double(), dim=1)
    kmax = max(k_list)
    preds: dict[int, list[torch.Tensor]] = {k: [] for k in k_list}
    for start in range(0, len(query_feats), chunk):
        q = F.normalize(query_feats[start:start + chunk].double(), dim=1)
        sims = q @ bank.T
        top_sim, top_idx = sims.topk(kmax, dim=1)
        top_lab = train_labels[top_idx]
        for k in k_list:
            w = (top_sim[:, :k] / temperature).exp() if weighting == "exp" else torch.ones_like(top_sim[:, :k])
            votes = torch.zeros(q.shape[0], num_classes, dtype=torch.float64)
            votes.scatter_add_(1, top_lab[:, :k], w)
            preds[k].append(votes.argmax(dim=1))
    return {k: torch.cat(v) for k, v in preds.items()}


def knn_accuracy(train_feats, train_labels, query_feats, query_labels, k_list=KNN_K, num_classes=None,
                 **kwargs) -> dict:
    num_classes = num_classes or int(max(train_labels.max(), query_labels.max())) + 1
    k_list = [k for k in k_list if k <= len(train_feats)] or [len(train_feats)]
    preds = knn_predict(train_feats, train_labels, query_feats, k_list, num_classes, **kwargs)
    per_k = {k: float((p == query_labels).double().mean()) for k, p in preds.items()}
    best_k = max(per_k, key=lambda k: (per_k[k], -k))
    return {"best_acc": per_k[best_k], "best_k": best_k, "per_k": per_k}


def knn_eval(checkpoint, train_data: LabeledImages, val_data: LabeledImages, k_list=KNN_K,
             role: str = "student", layer: str = "pooled") -> dict:
    """KNN on pooled backbone features; reports accuracy per k and the best."""
    net = checkpoint if isinstance(checkpoint, nn.Module) else load_encoder(checkpoint, role)[0]
    tr_f, tr_y = extract_features(net, train_data, layer)
    va_f, va_y = extract_features(net, val_data, layer)
    return knn_accuracy(tr_f, tr_y, va_f, va_y, k_list, num_classes=train_data.num_classes)


# ----------------------------------------------------------------------
# linear probe
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class LinearRecipe:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 3.0
    weight_decay: float = 0.0
    momentum: float = 0.9


def cosine_schedule(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def train_linear_classifier(train_feats: torch.Tensor, train_labels: torch.Tensor, num_classes: int,
                            recipe: LinearRecipe = LinearRecipe(), seed: int = 0) -> nn.Linear:
    """SGD + per-step cosine decay on fixed features."""
    gen = torch.Generator().manual_seed(seed)
    clf = nn.Linear(train_feats.shape[1], num_classes)
    with torch.no_grad():
        clf.weight.normal_(0.0, 0.01, generator=gen)
        clf.bias.zero_()
    opt = torch.optim.SGD(clf.parameters(), lr=recipe.lr, momentum=recipe.momentum,
                          weight_decay=recipe.weight_decay)
    n = len(train_feats)
    steps_per_epoch = math.ceil(n / recipe.batch_size)
    total = recipe.epochs * steps_per_epoch
    step = 0
    for _ in range(recipe.epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, recipe.batch_size):
            idx = perm[start:start + recipe.batch_size]
            for g in opt.param_groups:
                g["lr"] = cosine_schedule(recipe.lr, step, total)
            loss = F.cross_entropy(clf(train_feats[idx]), train_labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
    return clf


def _standardize(train: torch.Tensor, *others: torch.Tensor) -> list[torch.Tensor]:
    # per-dimension statistics of the training features, as a parameter-free BN
    mean = train.mean(0, keepdim=True)
    std = train.std(0, keepdim=True).clamp_min(1e-6)
    return [(t - mean) / std for t in (train, *others)]


def linear_eval(checkpoint, train_data: LabeledImages, val_data: LabeledImages,
                recipe: LinearRecipe = LinearRecipe(), input_mode: str = "global", role: str = "student",
                seed: int = 0) -> dict:
    """Linear classifier on frozen features; ``input_mode`` is "global" or "hypercolumn"."""
    if input_mode not in ("global", "hypercolumn"):
        raise ValueError(f"input_mode must be 'global' or 'hypercolumn', got {input_mode!r}")
    if train_data.num_classes != val_data.num_classes:
        raise ValueError("train and val label spaces differ")
    net = checkpoint if isinstance(checkpoint, nn.Module) else load_encoder(checkpoint, role)[0]
    layer = "pooled" if input_mode == "global" else "hypercolumn"
    tr_f, tr_y = extract_features(net, train_data, layer)
    va_f, va_y = extract_features(net, val_data, layer)
    return linear_probe(tr_f, tr_y, va_f, va_y, train_data.num_classes, recipe, seed)


def linear_probe(tr_f, tr_y, va_f, va_y, num_classes: int, recipe: LinearRecipe = LinearRecipe(),
                 seed: int = 0) -> dict:
    tr_f, va_f = _standardize(tr_f.float(), va_f.float())
    clf = train_linear_classifier(tr_f, tr_y, num_classes, recipe, seed)
    with torch.no_grad():
        logits = clf(va_f)
    return topk_accuracy(logits, va_y)


def topk_accuracy(logits: torch.Tensor, labels: torch.Tensor) -> dict:
    out = {"top1": float((logits.argmax(1) == labels).double().mean())}
    if logits.shape[1] >= 5:
        top5 = logits.topk(5, dim=1).indices
        out["top5"] = float((top5 == labels[:, None]).any(1).double().mean())
    return out


# ----------------------------------------------------------------------
# semi-supervised fine-tuning
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class SemiRecipe:
    head_lr: float
    backbone_lr: float
    epochs: int = 50
    batch_size: int = 256
    milestones: tuple[int, ...] = (30, 40)
    gamma: float = 0.1
    weight_decay: float = 0.0
    momentum: float = 0.9


SEMI_RECIPES = {
    0.01: SemiRecipe(head_lr=0.5, backbone_lr=1e-4),
    0.10: SemiRecipe(head_lr=0.2, backbone_lr=2e-4),
}


def recipe_for_fraction(fraction: float) -> SemiRecipe:
    """The 1% recipe up to 1% labels, the 10% recipe above."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"labeled fraction must be in (0, 1], got {fraction}")
    return SEMI_RECIPES[0.01] if fraction <= 0.01 else SEMI_RECIPES[0.10]


def labeled_subset(num_samples: int, fraction: float, seed: int = 0) -> np.ndarray:
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"labeled fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return np.arange(num_samples)
    rng = np.random.default_rng(seed)
    count = max(1, int(round(fraction * num_samples)))
    return np.sort(rng.permutation(num_samples)[:count])


class _Classifier(nn.Module):
    def __init__(self, net: CGHNetwork, num_classes: int):
        super().__init__()
        self.backbone = net.backbone
        self.head = nn.Linear(net.feat_dim, num_classes)

    def forward(self, x):
        return self.head(self.backbone(x)[1])


def semi_supervised_finetune(checkpoint, train_data: LabeledImages, val_data: LabeledImages,
                             fraction: float, recipe: SemiRecipe | None = None,
                             indices: Sequence[int] | None = None, role: str = "student", seed: int = 0) -> dict:
    """Fine-tune backbone + linear head on a labeled subset with two learning-rate groups."""
    recipe = recipe or recipe_for_fraction(fraction)
    if indices is None:
        indices = labeled_subset(len(train_data), fraction, seed)
    net = checkpoint if isinstance(checkpoint, nn.Module) else load_encoder(checkpoint, role)[0]
    model = _Classifier(copy.deepcopy(net), train_data.num_classes)
    torch.manual_seed(seed)
    model.head.reset_parameters()
    opt = torch.optim.SGD(
        [{"params": model.backbone.parameters(), "lr": recipe.backbone_lr},
         {"params": model.head.parameters(), "lr": recipe.head_lr}],
        momentum=recipe.momentum, weight_decay=recipe.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(recipe.milestones), gamma=recipe.gamma)
    subset = train_data.subset(indices)
    spec = augment.ViewSpec(size=subset.image_size, mean=subset.mean, std=subset.std, scale=(0.2, 1.0))
    dataset = AugmentedLabeledDataset(subset, spec, seed)
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(recipe.epochs):
        dataset.set_epoch(epoch)
        model.train()
        loader = DataLoader(dataset, batch_size=recipe.batch_size, shuffle=True, generator=gen,
                            collate_fn=collate, drop_last=len(dataset) > recipe.batch_size)
        for x, y, _ in loader:
            if len(y) < 2:
                continue  # BN needs more than one sample
            loss = F.cross_entropy(model(x), y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        sched.step()
    model.eval()
    logits, labels = [], []
    with torch.no_grad():
        for x, y, _ in DataLoader(EvalDataset(val_data), batch_size=256, collate_fn=collate):
            logits.append(model(x))
            labels.append(y)
    return topk_accuracy(torch.cat(logits), torch.cat(labels))


# ----------------------------------------------------------------------
# teacher-distribution precision / recall
# ----------------------------------------------------------------------
def pr_thresholds(bank_size: int, alphas: Sequence[float] = PR_ALPHAS) -> list[tuple[float, float]]:
    return [(float(a), float(a) / bank_size) for a in alphas]


def pr_counts(dists: torch.Tensor, query_labels: torch.Tensor, bank_labels: torch.Tensor,
              thresholds: Sequence[float]) -> list[dict]:
    """Counts for 'bank entry i is predicted positive iff p[i] > threshold'.

    Ground truth: entry i is positive for a query iff it has the query's class.
    """
    if bool((bank_labels < 0).any()):
        raise ValueError("bank contains unlabeled entries")
    positive = query_labels[:, None] == bank_labels[None, :]
    n_pos = int(positive.sum())
    out = []
    for thr in thresholds:
        predicted = dists > thr
        out.append({"threshold": float(thr), "predicted": int(predicted.sum()),
                    "true_positive": int((predicted & positive).sum()), "positives": n_pos})
    return out


def pr_from_counts(rec: dict) -> dict:
    """Add precision/recall; zero-support ratios are reported as 1.0 and flagged."""
    rec = dict(rec)
    rec["zero_support"] = rec["predicted"] == 0
    rec["precision"] = rec["true_positive"] / rec["predicted"] if rec["predicted"] else 1.0
    rec["recall"] = rec["true_positive"] / rec["positives"] if rec["positives"] else 1.0
    return rec


@torch.no_grad()
def teacher_pr_analysis(checkpoint, labeled: LabeledImages, context: str = "hypercolumn",
                        alphas: Sequence[float] = PR_ALPHAS) -> list[dict]:
    """Score the teacher's bank distribution for each labeled query against class labels."""
    if context not in ("global", "hypercolumn"):
        raise ValueError(f"context must be 'global' or 'hypercolumn', got {context!r}")
    net, ckpt = load_encoder(checkpoint, role="teacher")
    cfg = ckpt.config
    bank = ckpt.bank(context)
    if bank is None:
        raise ValueError(f"checkpoint has no {context} bank")
    if not bank.is_labeled:
        raise ValueError("unlabeled bank: train with labels attached to bank entries")
    if context == "hypercolumn":
        feats, labels = extract_features(net, labeled, "hypercolumn")
        z = net.hyper_projector(feats)
        tau = cfg.tau_h
    else:
        feats, labels = extract_features(net, labeled, "pooled")
        z = net.projector(feats)
        tau = cfg.tau_t
    dists = similarity_distribution(z, bank, tau)
    thresholds = pr_thresholds(bank.size, alphas)
    counts = pr_counts(dists, labels, bank.labels, [t for _, t in thresholds])
    records = []
    for (alpha, _), rec in zip(thresholds, counts):
        rec = pr_from_counts(rec)
        rec.update({"epoch": ckpt.epoch, "context": context, "alpha": alpha})
        records.append(rec)
    return records


# ----------------------------------------------------------------------
# embedding export
# ----------------------------------------------------------------------
EMBED_MAGIC = b"CGHEMB01"


def write_embeddings(path: str | Path, ids: np.ndarray, labels: np.ndarray, vectors: np.ndarray,
                     layer: str) -> Path:
    """Binary layout: magic(8) | header_len uint32 LE | JSON header | ids int64[N] | labels int64[N] |
    vectors float32[N, dim] (all little-endian, row-major)."""
    path = Path(path)
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    header = json.dumps({"count": int(vectors.shape[0]), "dim": int(vectors.shape[1]), "dtype": "float32",
                         "layer": layer}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(ids, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(labels, dtype="<i8").tobytes())
        fh.write(vectors.tobytes())
    return path


def read_embeddings(path: str | Path) -> tuple[dict, np.ndarray, np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != EMBED_MAGIC:
        raise ValueError(f"{path} is not an embedding file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    n, d = header["count"], header["dim"]
    off = 12 + hlen
    ids = np.frombuffer(raw, dtype="<i8", count=n, offset=off)
    labels = np.frombuffer(raw, dtype="<i8", count=n, offset=off + 8 * n)
    vectors = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off + 16 * n).reshape(n, d)
    return header, ids, labels, vectors


def export_embeddings(checkpoint, data: LabeledImages, layer: str, path: str | Path,
                      role: str = "student") -> Path:
    net = checkpoint if isinstance(checkpoint, nn.Module) else load_encoder(checkpoint, role)[0]
    feats, labels = extract_features(net, data, layer)
    return write_embeddings(path, np.arange(len(data)), labels.numpy(), feats.numpy(), layer)
