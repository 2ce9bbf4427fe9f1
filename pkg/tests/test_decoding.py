import itertools
import math

import pytest
import torch

from phed.data import BOS, EOS, PAD
from phed.decoding import beam_search, decode, generate, greedy_batch, step_logprobs
from phed.model import ModelConfig, PhedModel
from phed.numerics import RngState


def small_model(seed, vocab_size=5 + 4):
    cfg = ModelConfig(vocab_size=vocab_size, labels_per_aspect=[2], hidden=8, num_heads=2, d_z=2, dropout=0.0)
    m = PhedModel(cfg, RngState(seed)).eval()
    with torch.no_grad():
        m.embedding.weight.mul_(6.0)  # sharpen the output distribution
    return m


def state_for(model, seed=0):
    msg = torch.tensor([4, 4, 4]) if model.config.vocab_size == 5 else torch.tensor([4, 5, 6])
    return model.forward_generate(msg, [seed % 2], RngState(seed))


def exhaustive_best(state, max_len):
    """Best finished sequence (EOS within max_len steps, or truncated at max_len)."""
    v = state.vocab_size
    content = [t for t in range(v) if t not in (EOS, PAD)]
    best = (-math.inf, None)
    for n in range(max_len + 1):
        for seq in itertools.product(content, repeat=n):
            full = state.full_logprobs(torch.tensor([[BOS, *seq]]))[0].detach()
            score = sum(float(full[t, seq[t]]) for t in range(n))
            if n < max_len:
                score += float(full[n, EOS])
            if score > best[0]:
                best = (score, list(seq))
    return best


def test_exhaustive_agreement_small_vocab():
    for seed in range(20):
        model = small_model(seed, vocab_size=5)
        state = state_for(model, seed)
        score, seq = exhaustive_best(state, 3)
        width = 5**3
        hyp = beam_search(state, width, 3)[0]
        assert hyp.tokens == seq and hyp.score == pytest.approx(score, abs=1e-9)


def test_beam_score_at_least_greedy():
    for seed in range(100):
        state = state_for(small_model(seed + 100, vocab_size=12), seed)
        g = greedy_batch(state, 6)[0]
        b = beam_search(state, 5, 6)[0]
        assert b.score >= g.score - 1e-9


def test_beam_width_one_equals_greedy():
    for seed in range(10):
        state = state_for(small_model(seed, vocab_size=12), seed)
        g = greedy_batch(state, 6)[0]
        b = beam_search(state, 1, 6)[0]
        assert b.tokens == g.tokens and b.score == pytest.approx(g.score, abs=1e-9)


def test_beam_rejects_bad_width():
    with pytest.raises(ValueError):
        beam_search(state_for(small_model(0)), 0, 3)


def test_greedy_batch_matches_single():
    model = small_model(3, vocab_size=12)
    msgs = torch.tensor([[4, 5, 6], [7, 8, 9]])
    batch_state = model.forward_generate(msgs, [1], RngState(0))
    both = greedy_batch(batch_state, 5)
    for r in range(2):
        one = greedy_batch(batch_state.select(torch.tensor([r])), 5)[0]
        assert one.tokens == both[r].tokens
        assert one.score == pytest.approx(both[r].score, abs=1e-10)


def test_pad_never_generated():
    for seed in range(5):
        state = state_for(small_model(seed, vocab_size=12), seed)
        lp = step_logprobs(state, [[BOS, 5]])
        assert lp[0, PAD] == -math.inf
        assert abs(lp.exp().sum().item() - 1) < 1e-12
        for h in beam_search(state, 4, 5):
            assert PAD not in h.tokens


def test_partial_must_start_with_bos():
    with pytest.raises(ValueError):
        step_logprobs(state_for(small_model(0)), [[5, 6]])


def test_generate_is_deterministic(vocab):
    from conftest import tiny_model

    model = tiny_model(len(vocab))
    a = generate(model, vocab, "abcdefghijklmnop", [0, 1, 0], seed=3, max_len=8)
    b = generate(model, vocab, "abcdefghijklmnop", [0, 1, 0], seed=3, max_len=8)
    assert a[0] == b[0] and a[1].score == b[1].score
    with pytest.raises(ValueError):
        decode(model.forward_generate(torch.tensor([4]), [0], RngState(0)), method="sample")


class Chain:
    """Stub decoder state: emits 7, 8, 9 then EOS with probability 1."""

    vocab_size = 10
    batch_size = 1
    script = [7, 8, 9, EOS]

    def expand(self, n):
        out = Chain()
        out.batch_size = n
        return out

    def step(self, tokens, cache):
        t = tokens.shape[1] - 1
        logp = torch.full((tokens.shape[0], self.vocab_size), -math.inf)
        logp[:, self.script[min(t, 3)]] = 0.0
        return logp, [torch.zeros(tokens.shape[0], 1)]


def test_deterministic_chain_both_methods():
    for method in ("greedy", "beam"):
        hyp = decode(Chain(), method, width=3, max_len=10)
        assert hyp.tokens == [7, 8, 9] and hyp.score == 0.0 and hyp.finished
