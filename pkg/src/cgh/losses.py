"""Similarity distributions over memory banks and the cross-context objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from cgh.bank import MemoryBank

VARIANTS = ("cross", "same", "global")


@dataclass
class LossBundle:
    """Loss terms for one step.

    ``loss_gh`` supervises the student's global distribution and ``loss_hg``
    the student's hypercolumn distribution.  For ``variant="cross"`` their
    targets come from the other context; for ``"same"`` from the same one;
    ``"global"`` has no hypercolumn term (``loss_hg`` is zero).
    """

    loss: torch.Tensor
    loss_gh: torch.Tensor
    loss_hg: torch.Tensor
    teacher_dists: dict[str, torch.Tensor] = field(default_factory=dict)


def _entries(bank) -> torch.Tensor:
    return bank.entries if isinstance(bank, MemoryBank) else bank


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    nu, nv = u.norm(dim=-1), v.norm(dim=-1)
    if bool((nu == 0).any()) or bool((nv == 0).any()):
        raise ValueError("cosine similarity is undefined for a zero vector")
    return ((u * v).sum(dim=-1) / (nu * nv)).clamp(-1.0, 1.0)


def similarity_logits(z: torch.Tensor, bank, tau: float) -> torch.Tensor:
    """sim(z, bank_i) / tau for every bank entry; ``z`` may be (dim,) or (B, dim)."""
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    entries = _entries(bank)
    zn = z / z.norm(dim=-1, keepdim=True)
    en = entries / entries.norm(dim=-1, keepdim=True)
    return (zn @ en.T.to(zn.dtype)) / tau


def similarity_distribution(z: torch.Tensor, bank, tau: float) -> torch.Tensor:
    logits = similarity_logits(z, bank, tau)
    logits = logits - logits.max(dim=-1, keepdim=True).values
    expd = logits.exp()
    return expd / expd.sum(dim=-1, keepdim=True)


def log_similarity_distribution(z: torch.Tensor, bank, tau: float) -> torch.Tensor:
    return F.log_softmax(similarity_logits(z, bank, tau), dim=-1)


def cross_entropy(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """-sum_k target[k] log pred[k]; the target is treated as a constant."""
    target = target.detach()
    if bool(((pred <= 0) & (target > 0)).any()):
        raise ValueError("prediction has zero probability where the target has mass")
    logp = torch.where(target > 0, pred.clamp_min(torch.finfo(pred.dtype).tiny).log(), torch.zeros_like(pred))
    return -(target * logp).sum(dim=-1)


def _ce_logits(student_logp: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return -(target * student_logp).sum(dim=-1).mean()


def cgh_loss(z_g1: torch.Tensor, z_h1: torch.Tensor | None, z_g2: torch.Tensor, z_h2: torch.Tensor | None,
             bank: MemoryBank | torch.Tensor, hyper_bank: MemoryBank | torch.Tensor | None,
             tau_s: float, tau_t: float, tau_h: float, variant: str = "cross") -> LossBundle:
    """Relational distillation loss for one batch (mean over the batch).

    ``*_1`` are student embeddings of the contrastive view and ``*_2`` teacher
    embeddings of the weak view.  Teacher distributions carry no gradient.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    for name, tau in (("tau_s", tau_s), ("tau_t", tau_t), ("tau_h", tau_h)):
        if not tau > 0:
            raise ValueError(f"{name} must be > 0")

    with torch.no_grad():
        y_g2 = similarity_distribution(z_g2.detach(), bank, tau_t)
    logp_g1 = log_similarity_distribution(z_g1, bank, tau_s)

    if variant == "global":
        loss_gh = _ce_logits(logp_g1, y_g2)
        zero = torch.zeros((), dtype=loss_gh.dtype)
        return LossBundle(loss=loss_gh, loss_gh=loss_gh, loss_hg=zero, teacher_dists={"global": y_g2})

    if z_h1 is None or z_h2 is None or hyper_bank is None:
        raise ValueError(f"variant {variant!r} needs hypercolumn embeddings and a hypercolumn bank")
    with torch.no_grad():
        y_h2 = similarity_distribution(z_h2.detach(), hyper_bank, tau_h)
    logp_h1 = log_similarity_distribution(z_h1, hyper_bank, tau_h)

    if variant == "cross":
        loss_gh = _ce_logits(logp_g1, y_h2)
        loss_hg = _ce_logits(logp_h1, y_g2)
    else:
        loss_gh = _ce_logits(logp_g1, y_g2)
        loss_hg = _ce_logits(logp_h1, y_h2)
    return LossBundle(loss=loss_gh + loss_hg, loss_gh=loss_gh, loss_hg=loss_hg,
                      teacher_dists={"global": y_g2, "hypercolumn": y_h2})
