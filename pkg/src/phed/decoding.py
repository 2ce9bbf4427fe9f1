"""Greedy and beam-search decoding from a :class:`~phed.model.GenerationState`.

Scores are unnormalized sums of token log-probabilities. A hypothesis that
reaches ``max_len`` tokens without emitting EOS is finished as is.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .data import BOS, EOS
from .model import GenerationState
from .numerics import Tensor


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    finished: bool = False


@torch.no_grad()
def step_logprobs(state: GenerationState, partial) -> Tensor:
    """Log-probabilities of the next token after ``partial`` (which starts with BOS)."""
    tokens = torch.as_tensor(partial, dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens[None]
    if int(tokens[0, 0]) != BOS:
        raise ValueError("partial sequence must begin with BOS")
    if state.batch_size != tokens.shape[0]:
        state = state.expand(tokens.shape[0])
    return state.full_logprobs(tokens)[:, -1]


@torch.no_grad()
def greedy_batch(state: GenerationState, max_len: int) -> list[Hypothesis]:
    """Greedy decoding of every row in the state's batch at once."""
    b = state.batch_size
    tokens = torch.full((b, 1), BOS, dtype=torch.long)
    scores = torch.zeros(b)
    done = torch.zeros(b, dtype=torch.bool)
    out: list[list[int]] = [[] for _ in range(b)]
    cache = None
    for _ in range(max_len):
        logp, cache = state.step(tokens, cache)
        best = logp.argmax(dim=-1)
        gain = logp.gather(1, best[:, None])[:, 0]
        scores = scores + torch.where(done, torch.zeros_like(gain), gain)
        for r in range(b):
            if not done[r]:
                if int(best[r]) == EOS:
                    done[r] = True
                else:
                    out[r].append(int(best[r]))
        if bool(done.all()):
            break
        tokens = torch.cat([tokens, best[:, None]], dim=1)
    return [Hypothesis(out[r], float(scores[r]), bool(done[r])) for r in range(b)]


@torch.no_grad()
def beam_search(state: GenerationState, width: int, max_len: int) -> list[Hypothesis]:
    """Beam search for a single message; returns finished hypotheses, best first.

    Each step ranks all (hypothesis, token) extensions by score, ties going to
    the lower token id. Extensions ending in EOS are set aside as finished.
    The search stops at ``max_len`` or once ``width`` hypotheses have finished
    and the best of them outscores every live one; extending a hypothesis
    never raises its score, so no live hypothesis could still win.
    """
    if width < 1:
        raise ValueError("beam width must be at least 1")
    if state.vocab_size < 1:
        raise ValueError("empty vocabulary")
    if state.batch_size != 1:
        raise ValueError("beam_search decodes one message at a time")
    live = [Hypothesis([], 0.0)]
    finished: list[Hypothesis] = []
    cache = None
    tokens = torch.full((1, 1), BOS, dtype=torch.long)
    for t in range(max_len + 1):
        if t == max_len:
            finished.extend(Hypothesis(h.tokens, h.score, False) for h in live)
            break
        logp, cache = state.expand(len(live)).step(tokens, cache)
        totals = torch.tensor([h.score for h in live])[:, None] + logp
        flat = totals.reshape(-1)
        vocab = logp.shape[1]
        candidates = [
            (-float(flat[j]), j % vocab, j // vocab)
            for j in range(flat.numel())
            if flat[j] > float("-inf")
        ]
        candidates.sort()
        new_live, parents = [], []
        for neg, tok, src in candidates:
            if len(new_live) >= width:
                break
            if tok == EOS:
                finished.append(Hypothesis(live[src].tokens, -neg, True))
            else:
                new_live.append(Hypothesis(live[src].tokens + [tok], -neg))
                parents.append(src)
        if not new_live:
            break
        if len(finished) >= width and max(h.score for h in finished) >= new_live[0].score:
            break
        idx = torch.tensor(parents, dtype=torch.long)
        cache = [c[idx] for c in cache]
        tokens = torch.cat([tokens[idx], torch.tensor([[h.tokens[-1]] for h in new_live])], dim=1)
        live = new_live
    finished.sort(key=lambda h: -h.score)
    return finished


def decode(state: GenerationState, method: str = "beam", width: int = 5, max_len: int = 30) -> Hypothesis:
    """Best hypothesis for a single-message state (BOS/EOS stripped)."""
    if method == "greedy":
        return greedy_batch(state, max_len)[0]
    if method == "beam":
        return beam_search(state, width, max_len)[0]
    raise ValueError(f"unknown decoding method {method!r}")


@torch.no_grad()
def generate(model, vocab, message: str, controls, seed: int = 0, method="beam", width=5, max_len=None, latent_samples=1):
    """Generate a response string for ``message`` under ``controls``.

    With ``latent_samples > 1`` several prior draws are decoded and the
    highest-scoring hypothesis wins.
    """
    from .numerics import RngState

    model.eval()
    max_len = max_len or model.config.max_response_len
    rng = RngState(seed)
    x = torch.tensor(vocab.tokenize(message), dtype=torch.long)
    best = None
    for _ in range(latent_samples):
        state = model.forward_generate(x, list(controls), rng)
        hyp = decode(state, method, width, max_len)
        if best is None or hyp.score > best.score:
            best = hyp
    return vocab.detokenize(best.tokens), best
