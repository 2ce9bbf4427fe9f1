"""Transformer building blocks: multi-head attention, encoder and decoder layers,
and the token + sinusoidal position embedding front end.

All tensors are batch-first ``(B, L, H)``. Masks are boolean ``(B, L)`` with
``True`` marking real (non-pad) positions.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .numerics import RngState, Tensor, dropout, layer_norm, softmax

NEG_INF = -1e30


class LayerNorm(nn.Module):
    def __init__(self, size: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(size))
        self.bias = nn.Parameter(torch.zeros(size))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        if hidden % num_heads:
            raise ValueError(f"hidden size {hidden} not divisible by {num_heads} heads")
        self.hidden = hidden
        self.num_heads = num_heads
        self.head_dim = hidden // num_heads
        self.dropout = dropout
        self.q_proj = nn.Linear(hidden, hidden)
        self.k_proj = nn.Linear(hidden, hidden)
        self.v_proj = nn.Linear(hidden, hidden)
        self.out_proj = nn.Linear(hidden, hidden)
        self.last_weights: Tensor | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        key_mask: Tensor | None = None,
        causal: bool = False,
        rng: RngState | None = None,
    ) -> Tensor:
        """Scaled dot-product attention over ``key``/``value``.

        ``key_mask`` hides padded keys; ``causal`` additionally hides keys whose
        index exceeds the query index (query and key lengths must match).
        """
        b, lq, _ = query.shape
        lk = key.shape[1]
        if key_mask is not None and key_mask.shape != (b, lk):
            raise ValueError(f"key mask shape {tuple(key_mask.shape)} != {(b, lk)}")
        q, k, v = self._split(self.q_proj(query)), self._split(self.k_proj(key)), self._split(self.v_proj(value))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        allowed = torch.ones(b, 1, lq, lk, dtype=torch.bool)
        if key_mask is not None:
            allowed = allowed & key_mask[:, None, None, :]
        if causal:
            if lq != lk:
                raise ValueError("causal attention needs equal query and key lengths")
            allowed = allowed & torch.ones(lq, lk, dtype=torch.bool).tril()
        scores = scores.masked_fill(~allowed, NEG_INF)
        weights = softmax(scores, axis=-1)
        self.last_weights = weights.detach()
        weights = dropout(weights, self.dropout, rng, self.training)
        ctx = (weights @ v).transpose(1, 2).reshape(b, lq, self.hidden)
        return self.out_proj(ctx)


class FeedForward(nn.Module):
    def __init__(self, hidden: int, inner: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(hidden, inner or 4 * hidden)
        self.fc2 = nn.Linear(inner or 4 * hidden, hidden)
        # ReLU active set of the latest call, read by gradient checks to spot kinks
        self.last_active: Tensor | None = None

    def forward(self, x: Tensor) -> Tensor:
        pre = self.fc1(x)
        self.last_active = (pre > 0).detach()
        return self.fc2(torch.relu(pre))


class EncoderLayer(nn.Module):
    """Post-norm self-attention layer.

    A = MH(h, h, h); B = LN(h + A); out = LN(FFN(B) + B).
    """

    def __init__(self, hidden: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(hidden, num_heads, dropout)
        self.ffn = FeedForward(hidden)
        self.norm1 = LayerNorm(hidden)
        self.norm2 = LayerNorm(hidden)
        self.dropout = dropout

    def forward(
        self, h: Tensor, mask: Tensor | None = None, causal: bool = False, rng: RngState | None = None
    ) -> Tensor:
        if mask is not None and mask.shape != h.shape[:2]:
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match sequence {tuple(h.shape[:2])}")
        a = self.self_attn(h, h, h, key_mask=mask, causal=causal, rng=rng)
        b = self.norm1(h + a)
        return self.norm2(dropout(self.ffn(b), self.dropout, rng, self.training) + b)

    def step(self, x: Tensor, past: Tensor | None) -> tuple[Tensor, Tensor]:
        """Causal single-position update. ``past`` holds earlier inputs ``(B, t, H)``."""
        keys = x if past is None else torch.cat([past, x], dim=1)
        a = self.self_attn(x, keys, keys)
        b = self.norm1(x + a)
        return self.norm2(self.ffn(b) + b), keys


class DecoderLayer(nn.Module):
    """Cross-attention first, then a causal encoder layer over the result.

    f = MH(h_d, h_e, h_e); g = LN(h_d + f); out = T_e(g).
    """

    def __init__(self, hidden: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.cross_attn = MultiHeadAttention(hidden, num_heads, dropout)
        self.norm = LayerNorm(hidden)
        self.inner = EncoderLayer(hidden, num_heads, dropout)

    def forward(
        self,
        h: Tensor,
        memory: Tensor,
        self_mask: Tensor | None = None,
        memory_mask: Tensor | None = None,
        rng: RngState | None = None,
    ) -> Tensor:
        if memory.shape[-1] != h.shape[-1]:
            raise ValueError("memory width differs from decoder width")
        f = self.cross_attn(h, memory, memory, key_mask=memory_mask, rng=rng)
        g = self.norm(h + f)
        return self.inner(g, mask=self_mask, causal=True, rng=rng)

    def step(
        self, x: Tensor, memory: Tensor, memory_mask: Tensor | None, past: Tensor | None
    ) -> tuple[Tensor, Tensor]:
        f = self.cross_attn(x, memory, memory, key_mask=memory_mask)
        g = self.norm(x + f)
        return self.inner.step(g, past)


def sinusoid_table(length: int, hidden: int) -> Tensor:
    """PE[t, 2k] = sin(t / 10000^(2k/H)), PE[t, 2k+1] = cos(t / 10000^(2k/H))."""
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    rate = torch.exp(torch.arange(0, hidden, 2, dtype=torch.float64) * (-math.log(10000.0) / hidden))
    table = torch.zeros(length, hidden, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * rate)
    table[:, 1::2] = torch.cos(pos * rate)[:, : hidden // 2]
    return table.to(torch.get_default_dtype())


class EmbeddingTable(nn.Module):
    """Token embeddings ``WE`` plus a fixed sinusoidal position table.

    ``WE`` is also the output projection (``logits = h @ WE.T``).
    """

    def __init__(self, vocab_size: int, hidden: int, max_len: int = 256):
        super().__init__()
        self.vocab_size = vocab_size
        self.hidden = hidden
        self.weight = nn.Parameter(torch.zeros(vocab_size, hidden))
        self.register_buffer("pe", sinusoid_table(max_len, hidden), persistent=False)

    def forward(self, tokens: Tensor, offset: int = 0) -> Tensor:
        if tokens.numel() and (int(tokens.max()) >= self.vocab_size or int(tokens.min()) < 0):
            raise ValueError("token id outside the vocabulary (map unknowns to UNK first)")
        length = tokens.shape[-1]
        return self.weight[tokens] + self.pe[offset : offset + length]

    def logits(self, h: Tensor) -> Tensor:
        return h @ self.weight.t()


def embed(tokens: Tensor, table: EmbeddingTable) -> Tensor:
    return table(tokens)
