"""Progressive hierarchical encoder-decoder.

Stage 0 is a plain Transformer encoder/decoder. Stage ``i`` (1..K) owns a new
encoder block and decoder block, four latent networks, a latent-to-hidden
projection, an attribute classifier and a bag-of-words head. At stage ``i``
the sampled latents are projected to width ``H`` and appended to the previous
encoder output as extra sequence positions::

    stage 1:   memory = [h^0; z_c^1; z_1]
    stage i:   memory = [h^{i-1}; z_i]
    h^i   = encoder block(memory) with the latent positions dropped
    dec^i = decoder block(dec^{i-1}, memory)

Generation at depth ``k`` draws latents from the prior networks and runs
stages 1..k only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .data import BOS, EOS, PAD, DialoguePair, Vocabulary
from .latent import LatentNetwork, StageLatents, prior_forward, recognition_forward
from .numerics import GaussianParams, RngState, Tensor, log_softmax
from .transformer import DecoderLayer, EmbeddingTable, EncoderLayer


@dataclass
class ModelConfig:
    vocab_size: int
    labels_per_aspect: list[int] = field(default_factory=lambda: [3, 2, 2])
    hidden: int = 32
    num_heads: int = 2
    base_layers: int = 1
    layers_per_stage: int = 1
    d_z: int = 8
    max_response_len: int = 30
    max_len: int = 128
    dropout: float = 0.1
    label_injection: str = "query"
    embedding_scale: float = 0.5

    def __post_init__(self):
        self.labels_per_aspect = [int(n) for n in self.labels_per_aspect]
        if self.num_aspects < 1:
            raise ValueError("need at least one aspect (K >= 1)")
        if self.layers_per_stage < 1 or self.base_layers < 1:
            raise ValueError("layer counts must be positive")
        if self.hidden % self.num_heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.num_heads} heads")
        if any(n < 2 for n in self.labels_per_aspect):
            raise ValueError("every aspect needs at least two labels")

    @property
    def num_aspects(self) -> int:
        return len(self.labels_per_aspect)

    def decoder_depth(self, stage: int) -> int:
        return self.base_layers + stage * self.layers_per_stage


class Stage(nn.Module):
    def __init__(self, index: int, cfg: ModelConfig):
        super().__init__()
        h, heads, dz = cfg.hidden, cfg.num_heads, cfg.d_z
        n_labels = cfg.labels_per_aspect[index - 1]
        self.index = index
        self.encoder = nn.ModuleList(EncoderLayer(h, heads, cfg.dropout) for _ in range(cfg.layers_per_stage))
        self.decoder = nn.ModuleList(DecoderLayer(h, heads, cfg.dropout) for _ in range(cfg.layers_per_stage))
        self.rec_common = LatentNetwork(h, heads, dz)
        self.rec_specific = LatentNetwork(h, heads, dz, n_labels, cfg.label_injection)
        self.prior_common = LatentNetwork(h, heads, dz)
        self.prior_specific = LatentNetwork(h, heads, dz, n_labels, cfg.label_injection)
        self.latent_proj = nn.Linear(dz, h)
        self.classifier = nn.Sequential(nn.Linear(dz, h), nn.Tanh(), nn.Linear(h, n_labels))
        self.bow_head = nn.Linear(h + dz, cfg.vocab_size)
        self.frozen = False

    @property
    def num_latent_positions(self) -> int:
        return 2 if self.index == 1 else 1


@dataclass
class Batch:
    x: Tensor
    x_mask: Tensor
    y: Tensor
    y_mask: Tensor
    y_in: Tensor
    y_out: Tensor
    out_mask: Tensor
    labels: Tensor

    def __len__(self) -> int:
        return self.x.shape[0]


def _pad(seqs: Sequence[Sequence[int]], min_len: int = 1) -> tuple[Tensor, Tensor]:
    width = max([min_len] + [len(s) for s in seqs])
    ids = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = torch.tensor(list(s), dtype=torch.long)
    return ids, ids != PAD


def make_batch(pairs: Sequence[DialoguePair], vocab: Vocabulary) -> Batch:
    xs = [vocab.tokenize(p.message) for p in pairs]
    ys = [vocab.tokenize(p.response) for p in pairs]
    x, x_mask = _pad(xs)
    y, y_mask = _pad(ys)
    y_in, _ = _pad([[BOS] + s for s in ys])
    y_out, out_mask = _pad([s + [EOS] for s in ys])
    labels = torch.tensor([list(p.attributes) for p in pairs], dtype=torch.long)
    return Batch(x, x_mask, y, y_mask, y_in, y_out, out_mask, labels)


@dataclass
class ForwardRecord:
    stage: int
    log_probs: Tensor
    h_x0: Tensor
    h_y0: Tensor
    hs: list[Tensor]
    decs: list[Tensor]
    posterior: list[StageLatents]
    prior: StageLatents | None
    prev_common: GaussianParams | None
    batch: Batch

    @property
    def probs(self) -> Tensor:
        return self.log_probs.exp()

    @property
    def h_final(self) -> Tensor:
        return self.hs[-1]


class PhedModel(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: RngState | None = None):
        super().__init__()
        self.config = cfg
        h, heads = cfg.hidden, cfg.num_heads
        self.embedding = EmbeddingTable(cfg.vocab_size, h, cfg.max_len)
        self.base_encoder = nn.ModuleList(EncoderLayer(h, heads, cfg.dropout) for _ in range(cfg.base_layers))
        self.base_decoder = nn.ModuleList(DecoderLayer(h, heads, cfg.dropout) for _ in range(cfg.base_layers))
        self.stages = nn.ModuleList(Stage(i, cfg) for i in range(1, cfg.num_aspects + 1))
        self.init_parameters(rng or RngState(0))

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def stage(self, i: int) -> Stage:
        if not 1 <= i <= self.num_stages:
            raise IndexError(f"stage {i} outside 1..{self.num_stages}")
        return self.stages[i - 1]

    @torch.no_grad()
    def init_parameters(self, rng: RngState) -> None:
        g = rng.generator
        h = self.config.hidden
        for name, p in self.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if name == "embedding.weight":
                p.copy_(torch.randn(p.shape, generator=g) * self.config.embedding_scale / math.sqrt(h))
            elif leaf == "alpha":
                p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(h))
            elif "label_embedding" in name:
                p.copy_(torch.randn(p.shape, generator=g))
            elif leaf == "gain":
                p.fill_(1.0)
            elif p.dim() == 1:
                p.zero_()
            else:
                fan_out, fan_in = p.shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                p.copy_((torch.rand(p.shape, generator=g) * 2 - 1) * bound)

    def stage_tag(self, name: str) -> int:
        if name.startswith("stages."):
            return int(name.split(".")[1]) + 1
        return 0

    def stage_parameters(self, i: int) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if self.stage_tag(n) == i]

    # -- encoder side -------------------------------------------------------

    def encode_base(self, tokens: Tensor, mask: Tensor, rng: RngState | None = None) -> Tensor:
        h = self.embedding(tokens)
        for layer in self.base_encoder:
            h = layer(h, mask=mask, rng=rng)
        return h

    def decode_base(self, y_in: Tensor, y_mask: Tensor, h_x0: Tensor, x_mask: Tensor, rng=None) -> Tensor:
        d = self.embedding(y_in)
        for layer in self.base_decoder:
            d = layer(d, h_x0, self_mask=y_mask, memory_mask=x_mask, rng=rng)
        return d

    def stage_forward(
        self,
        i: int,
        h_prev: Tensor,
        h_mask: Tensor,
        dec_prev: Tensor,
        dec_mask: Tensor,
        latents: StageLatents,
        rng: RngState | None = None,
    ) -> tuple[Tensor, Tensor]:
        stage = self.stage(i)
        memory, mem_mask = build_stage_memory(h_prev, h_mask, latents, i, stage.latent_proj)
        out = memory
        for layer in stage.encoder:
            out = layer(out, mask=mem_mask, rng=rng)
        h_i = out[:, : h_prev.shape[1]]
        d = dec_prev
        for layer in stage.decoder:
            d = layer(d, memory, self_mask=dec_mask, memory_mask=mem_mask, rng=rng)
        return h_i, d

    def output_log_probs(self, dec: Tensor) -> Tensor:
        return log_softmax(self.embedding.logits(dec), axis=-1)

    # -- training -----------------------------------------------------------

    def forward_base(self, batch: Batch, rng: RngState | None = None) -> Tensor:
        h_x0 = self.encode_base(batch.x, batch.x_mask, rng)
        d0 = self.decode_base(batch.y_in, batch.out_mask, h_x0, batch.x_mask, rng)
        return self.output_log_probs(d0)

    def forward_train(self, batch: Batch, stage: int, rng: RngState) -> ForwardRecord:
        if stage > self.num_stages:
            raise ValueError(f"model has only {self.num_stages} stages")
        for j in range(1, stage + 1):
            n = self.config.labels_per_aspect[j - 1]
            lab = batch.labels[:, j - 1]
            if int(lab.min()) < 0 or int(lab.max()) >= n:
                raise ValueError(f"label for aspect {j} outside 0..{n - 1}")
        h_x0 = self.encode_base(batch.x, batch.x_mask, rng)
        h_y0 = self.encode_base(batch.y, batch.y_mask, rng)
        dec = self.decode_base(batch.y_in, batch.out_mask, h_x0, batch.x_mask, rng)
        h, hs, decs, posts = h_x0, [h_x0], [dec], []
        prior = None
        for j in range(1, stage + 1):
            st = self.stage(j)
            lat = recognition_forward(st, h_x0, batch.x_mask, h_y0, batch.y_mask, batch.labels[:, j - 1], rng)
            posts.append(lat)
            if j == stage:
                prior = prior_forward(st, h_x0, batch.x_mask, batch.labels[:, j - 1], rng)
            h, dec = self.stage_forward(j, h, batch.x_mask, dec, batch.out_mask, lat, rng)
            hs.append(h)
            decs.append(dec)
        prev_common = posts[-2].common.detach() if stage >= 2 else None
        return ForwardRecord(stage, self.output_log_probs(dec), h_x0, h_y0, hs, decs, posts, prior, prev_common, batch)

    # -- generation ---------------------------------------------------------

    def forward_generate(self, message: Tensor, controls, rng: RngState, message_mask: Tensor | None = None):
        """Prepare decoder state for generating at depth ``k = len(controls)``.

        ``message`` is ``(B, L)`` token ids (or a single 1-D sequence);
        ``controls`` is a length-``k`` list of label ids or a ``(B, k)`` tensor.
        """
        if message.dim() == 1:
            message = message[None]
        if message_mask is None:
            message_mask = message != PAD
        b = message.shape[0]
        controls = torch.as_tensor(controls, dtype=torch.long)
        if controls.dim() == 1:
            controls = controls[None].expand(b, -1)
        k = controls.shape[1]
        if k > self.num_stages:
            raise ValueError(f"{k} controls given but the model has {self.num_stages} stages")
        if k < 1:
            raise ValueError("need at least one control")
        h_x0 = self.encode_base(message, message_mask)
        layers: list[tuple[DecoderLayer, Tensor, Tensor]] = [(layer, h_x0, message_mask) for layer in self.base_decoder]
        h = h_x0
        latents = []
        for j in range(1, k + 1):
            st = self.stage(j)
            lat = prior_forward(st, h_x0, message_mask, controls[:, j - 1], rng)
            latents.append(lat)
            memory, mem_mask = build_stage_memory(h, message_mask, lat, j, st.latent_proj)
            out = memory
            for layer in st.encoder:
                out = layer(out, mask=mem_mask)
            h = out[:, : h_x0.shape[1]]
            layers.extend((layer, memory, mem_mask) for layer in st.decoder)
        return GenerationState(self, layers, k, latents)


def build_stage_memory(
    h_prev: Tensor, h_mask: Tensor, latents: StageLatents, stage_index: int, proj: nn.Module
) -> tuple[Tensor, Tensor]:
    """Append the stage's projected latents to ``h_prev`` along the sequence axis."""
    if latents.z_i.shape[-1] != proj.in_features or h_prev.shape[-1] != proj.out_features:
        raise ValueError("latent or hidden width does not match the stage projection")
    zs = [latents.z_c, latents.z_i] if stage_index == 1 else [latents.z_i]
    extra = torch.stack([proj(z) for z in zs], dim=1)
    memory = torch.cat([h_prev, extra], dim=1)
    mask = torch.cat([h_mask, torch.ones(h_mask.shape[0], len(zs), dtype=torch.bool)], dim=1)
    return memory, mask


class GenerationState:
    """Decoder stack with fixed memories, ready for autoregressive decoding."""

    def __init__(self, model: PhedModel, layers, depth: int, latents):
        self.model = model
        self.layers = layers
        self.depth = depth
        self.latents = latents

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def batch_size(self) -> int:
        return self.layers[0][1].shape[0]

    @property
    def vocab_size(self) -> int:
        return self.model.config.vocab_size

    def select(self, index: Tensor) -> "GenerationState":
        """Reindex the batch axis (e.g. to replicate one message across beams)."""
        layers = [(layer, mem[index], mask[index]) for layer, mem, mask in self.layers]
        return GenerationState(self.model, layers, self.depth, self.latents)

    def expand(self, n: int) -> "GenerationState":
        """Broadcast a single-row state to ``n`` rows."""
        layers = [(layer, mem.expand(n, -1, -1), mask.expand(n, -1)) for layer, mem, mask in self.layers]
        return GenerationState(self.model, layers, self.depth, self.latents)

    def _mask_special(self, logp: Tensor) -> Tensor:
        logits = logp.clone()
        logits[..., PAD] = float("-inf")
        return log_softmax(logits, axis=-1)

    def full_logprobs(self, tokens: Tensor) -> Tensor:
        """Next-token log-probabilities at every position of ``tokens`` (B, T)."""
        d = self.model.embedding(tokens)
        for layer, mem, mask in self.layers:
            d = layer(d, mem, memory_mask=mask)
        return self._mask_special(self.model.output_log_probs(d))

    def step(self, tokens: Tensor, cache: list[Tensor] | None) -> tuple[Tensor, list[Tensor]]:
        """Incremental step on the last token of ``tokens`` (B, t).

        ``cache`` holds, per layer, the self-attention inputs of earlier
        positions; returns last-position log-probabilities and the new cache.
        """
        t = tokens.shape[1] - 1
        x = self.model.embedding(tokens[:, -1:], offset=t)
        new_cache = []
        for n, (layer, mem, mask) in enumerate(self.layers):
            x, keys = layer.step(x, mem, mask, None if cache is None else cache[n])
            new_cache.append(keys)
        return self._mask_special(self.model.output_log_probs(x))[:, 0], new_cache


def kink_signature(model: nn.Module) -> bytes:
    """Bytes identifying every ReLU active set and logvar clamp pattern of the
    latest forward; two evaluations with equal signatures lie on the same
    smooth piece of the loss."""
    parts = []
    for m in model.modules():
        mask = getattr(m, "last_active", None)
        if mask is None:
            mask = getattr(m, "last_clamped", None)
        if mask is not None:
            parts.append(mask.numpy().tobytes())
    return b"|".join(parts)


def parameter_checksums(model: PhedModel) -> dict[int, str]:
    import hashlib

    digests: dict[int, "hashlib._Hash"] = {}
    for name, p in model.named_parameters():
        d = digests.setdefault(model.stage_tag(name), hashlib.sha256())
        d.update(name.encode())
        d.update(p.detach().cpu().contiguous().numpy().tobytes())
    return {k: v.hexdigest() for k, v in sorted(digests.items())}


__all__ = [
    "BOS",
    "EOS",
    "Batch",
    "ForwardRecord",
    "GenerationState",
    "ModelConfig",
    "PhedModel",
    "Stage",
    "build_stage_memory",
    "make_batch",
    "parameter_checksums",
]
