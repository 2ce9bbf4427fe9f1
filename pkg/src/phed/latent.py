"""CVAE sampler and the per-stage recognition / prior networks.

A :class:`LatentNetwork` attends from a learned context vector over a memory
sequence, maps the attended feature to ``(mean, logvar)`` and draws a
reparameterized sample. Each stage owns four of them: recognition and prior
networks for the common latent ``z_c`` and for the attribute latent ``z_i``.
Recognition networks see ``[h_x^0; h_y^0]``; prior networks see ``h_x^0`` only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import nn

from .numerics import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    GaussianParams,
    RngState,
    Tensor,
    sample_gaussian,
)
from .transformer import MultiHeadAttention

log = logging.getLogger(__name__)

LABEL_INJECTIONS = ("query", "query+value")


class LatentNetwork(nn.Module):
    def __init__(
        self,
        hidden: int,
        num_heads: int,
        d_z: int,
        num_labels: int | None = None,
        label_injection: str = "query",
    ):
        super().__init__()
        if label_injection not in LABEL_INJECTIONS:
            raise ValueError(f"label_injection must be one of {LABEL_INJECTIONS}")
        self.d_z = d_z
        self.alpha = nn.Parameter(torch.zeros(hidden))
        self.attention = MultiHeadAttention(hidden, num_heads)
        self.mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.Tanh(), nn.Linear(hidden, 2 * d_z))
        self.label_embedding = nn.Embedding(num_labels, hidden) if num_labels else None
        self.label_injection = label_injection
        self.clamp_hits = 0
        self.last_clamped: Tensor | None = None

    @property
    def conditions_on_label(self) -> bool:
        return self.label_embedding is not None

    def params(self, memory: Tensor, mask: Tensor | None, labels: Tensor | None = None) -> GaussianParams:
        if self.conditions_on_label != (labels is not None):
            raise ValueError(
                "label required for a label-conditioned network"
                if self.conditions_on_label
                else "unexpected label for an unconditioned network"
            )
        b = memory.shape[0]
        query = self.alpha.expand(b, 1, -1)
        if labels is not None:
            label_vec = self.label_embedding(labels)[:, None, :]
            query = query + label_vec
        v = self.attention(query, memory, memory, key_mask=mask)
        if labels is not None and self.label_injection == "query+value":
            v = v + label_vec
        out = self.mlp(v[:, 0, :])
        mean, raw_logvar = out[:, : self.d_z], out[:, self.d_z :]
        clamped = (raw_logvar < LOGVAR_MIN) | (raw_logvar > LOGVAR_MAX)
        self.last_clamped = clamped.detach()
        hits = int(clamped.sum())
        if hits:
            self.clamp_hits += hits
            log.warning("logvar clamp active on %d entries", hits)
        return GaussianParams(mean, torch.clamp(raw_logvar, LOGVAR_MIN, LOGVAR_MAX))

    def forward(
        self, memory: Tensor, mask: Tensor | None, labels: Tensor | None, rng: RngState
    ) -> tuple[GaussianParams, Tensor]:
        p = self.params(memory, mask, labels)
        return p, sample_gaussian(p, rng)


def latent_forward(net: LatentNetwork, a: Tensor, label: Tensor | None, rng: RngState, mask: Tensor | None = None):
    return net(a, mask, label, rng)


@dataclass
class StageLatents:
    z_c: Tensor
    z_i: Tensor
    common: GaussianParams
    specific: GaussianParams


def _check_width(stage, *tensors: Tensor) -> None:
    width = stage.rec_common.alpha.shape[0]
    for t in tensors:
        if t.shape[-1] != width:
            raise ValueError(f"memory width {t.shape[-1]} != hidden size {width}")


def recognition_forward(
    stage, h_x0: Tensor, x_mask: Tensor, h_y0: Tensor, y_mask: Tensor, labels: Tensor, rng: RngState
) -> StageLatents:
    """Posterior latents from the stage-0 message and response encodings."""
    _check_width(stage, h_x0, h_y0)
    memory = torch.cat([h_x0, h_y0], dim=1)
    mask = torch.cat([x_mask, y_mask], dim=1)
    common, z_c = stage.rec_common(memory, mask, None, rng)
    specific, z_i = stage.rec_specific(memory, mask, labels, rng)
    return StageLatents(z_c, z_i, common, specific)


def prior_forward(stage, h_x0: Tensor, x_mask: Tensor, labels: Tensor, rng: RngState) -> StageLatents:
    """Prior latents from the stage-0 message encoding alone."""
    _check_width(stage, h_x0)
    common, z_c = stage.prior_common(h_x0, x_mask, None, rng)
    specific, z_i = stage.prior_specific(h_x0, x_mask, labels, rng)
    return StageLatents(z_c, z_i, common, specific)
