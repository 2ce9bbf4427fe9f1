"""Training objectives.

Per-example terms are reduced to batch means; reconstruction is a mean over
non-pad target tokens. The stage objective is

    lambda * (KL_c + KL) + L_M + L_z + L_bow + L_cls  [+ L_zc at stages >= 2]
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import torch
from torch import nn

from .numerics import GaussianParams, Tensor, log_softmax

log = logging.getLogger(__name__)

NORM_EPS = 1e-8


def kl_diag_gaussian(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ValueError("KL between Gaussians of different widths")
    var_q, var_p = q.logvar.exp(), p.logvar.exp()
    terms = p.logvar - q.logvar + (var_q + (q.mean - p.mean) ** 2) / var_p - 1.0
    return 0.5 * terms.sum(dim=-1)


def reconstruction_loss(log_probs: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Mean negative log-likelihood per non-pad target token."""
    n = mask.sum()
    if int(n) == 0:
        raise ValueError("reconstruction loss over an all-pad target")
    nll = -log_probs.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    return (nll * mask).sum() / n


def latent_dissimilarity_loss(z_c: Tensor, z_i: Tensor) -> Tensor:
    """cos(z_c, z_i) + (|z_c| - |z_i|)^2 per example."""
    if z_c.shape[-1] != z_i.shape[-1]:
        raise ValueError("latents of different widths")
    n_c, n_i = z_c.norm(dim=-1), z_i.norm(dim=-1)
    if bool((n_c < NORM_EPS).any() or (n_i < NORM_EPS).any()):
        log.warning("near-zero latent norm in dissimilarity loss")
    cos = (z_c * z_i).sum(dim=-1) / (n_c.clamp_min(NORM_EPS) * n_i.clamp_min(NORM_EPS))
    return cos + (n_c - n_i) ** 2


def zc_smoothness_loss(prev: GaussianParams, curr: GaussianParams) -> Tensor:
    """Squared 2-Wasserstein distance between diagonal Gaussians; ``prev`` is a constant."""
    if prev.mean.shape[-1] != curr.mean.shape[-1]:
        raise ValueError("Gaussians of different widths")
    prev = prev.detach()
    return ((prev.mean - curr.mean) ** 2).sum(dim=-1) + ((prev.std - curr.std) ** 2).sum(dim=-1)


def bag_of_words(target: Tensor, mask: Tensor, vocab_size: int) -> Tensor:
    """0/1 indicator of the distinct non-pad tokens of each row."""
    bag = torch.zeros(target.shape[0], vocab_size, dtype=torch.get_default_dtype())
    bag.scatter_add_(1, target * mask, mask.to(bag.dtype))
    return (bag > 0).to(bag.dtype)


def bow_log_probs(h: Tensor, h_mask: Tensor, z_c: Tensor, head: nn.Module) -> Tensor:
    m = h_mask.unsqueeze(-1).to(h.dtype)
    pooled = (h * m).sum(dim=1) / m.sum(dim=1).clamp_min(1.0)
    return log_softmax(head(torch.cat([pooled, z_c], dim=-1)), axis=-1)


def bow_loss(h: Tensor, h_mask: Tensor, z_c: Tensor, target: Tensor, target_mask: Tensor, head: nn.Module) -> Tensor:
    """Mean negative log-probability of each distinct response token, per example."""
    counts = target_mask.sum(dim=-1)
    if bool((counts == 0).any()):
        raise ValueError("bag-of-words loss over an all-pad target")
    logp = bow_log_probs(h, h_mask, z_c, head)
    bag = bag_of_words(target, target_mask, logp.shape[-1])
    return -(bag * logp).sum(dim=-1) / bag.sum(dim=-1)


def attribute_cls_loss(z_i: Tensor, head: nn.Module, label: Tensor) -> Tensor:
    logits = head(z_i)
    n = logits.shape[-1]
    if int(label.min()) < 0 or int(label.max()) >= n:
        raise ValueError(f"label outside 0..{n - 1}")
    return -log_softmax(logits, axis=-1).gather(-1, label.unsqueeze(-1)).squeeze(-1)


@dataclass
class AnnealSchedule:
    warmup_steps: int

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be positive")

    def __call__(self, step: int) -> float:
        return min(1.0, max(0, step) / self.warmup_steps)


@dataclass
class LossFlags:
    drop_cls: bool = False
    drop_zdissim: bool = False
    drop_zc_losses: bool = False


@dataclass
class LossBreakdown:
    L_KL_c: float
    L_KL: float
    L_M: float
    L_z: float
    L_bow: float
    L_cls: float
    L_zc_fid: float
    lam: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def combine(parts: dict[str, Tensor], lam: float) -> Tensor:
    """The stage objective, summed in a fixed order."""
    total = lam * (parts["L_KL_c"] + parts["L_KL"])
    for key in ("L_M", "L_z", "L_bow", "L_cls", "L_zc_fid"):
        total = total + parts[key]
    return total


def stage_loss_terms(record, model, flags: LossFlags | None = None) -> dict[str, Tensor]:
    """Every component of the stage objective as a scalar tensor."""
    flags = flags or LossFlags()
    i = record.stage
    stage = model.stage(i)
    batch = record.batch
    post, prior = record.posterior[-1], record.prior
    zero = torch.zeros(())
    parts = {
        "L_KL_c": kl_diag_gaussian(post.common, prior.common).mean(),
        "L_KL": kl_diag_gaussian(post.specific, prior.specific).mean(),
        "L_M": reconstruction_loss(record.log_probs, batch.y_out, batch.out_mask),
        "L_z": zero if flags.drop_zdissim else latent_dissimilarity_loss(post.z_c, post.z_i).mean(),
        "L_bow": zero
        if flags.drop_zc_losses
        else bow_loss(record.h_final, batch.x_mask, post.z_c, batch.y, batch.y_mask, stage.bow_head).mean(),
        "L_cls": zero if flags.drop_cls else attribute_cls_loss(post.z_i, stage.classifier, batch.labels[:, i - 1]).mean(),
        "L_zc_fid": zero
        if (i == 1 or flags.drop_zc_losses)
        else zc_smoothness_loss(record.prev_common, post.common).mean(),
    }
    return parts


def stage_loss(record, model, schedule: AnnealSchedule, step: int, flags: LossFlags | None = None):
    """Return ``(total tensor, LossBreakdown)`` for a stage-``i`` forward record."""
    lam = schedule(step)
    parts = stage_loss_terms(record, model, flags)
    total = combine(parts, lam)
    values = {k: float(v.detach()) for k, v in parts.items()}
    if values["L_KL_c"] < -1e-12 or values["L_KL"] < -1e-12 or values["L_zc_fid"] < -1e-12:
        raise FloatingPointError(f"negative divergence in stage loss: {values}")
    return total, LossBreakdown(lam=lam, total=float(total.detach()), **values)
