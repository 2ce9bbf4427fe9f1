"""Automatic metrics: corpus BLEU-1..4, Dist-1/2, oracle attribute accuracy,
response length statistics, and batch evaluation of a trained model.

BLEU is corpus-level with clipped n-gram counts, uniform weights and the
standard brevity penalty. Zero higher-order precisions are smoothed to
``BLEU_EPSILON / total`` (NLTK's "method1"); a corpus with no matching
unigram at all scores exactly 0.
"""

from __future__ import annotations

import json
import logging
import math
import statistics
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch

from .data import OTHER, DialoguePair, SyntheticSpec, Vocabulary, oracle_classify

log = logging.getLogger(__name__)

BLEU_EPSILON = 0.1


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu_n(candidates: Sequence[Sequence], references: Sequence[Sequence], n: int) -> float:
    """Corpus BLEU with uniform weights over 1..n-gram precisions."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in number")
    if not candidates:
        raise ValueError("BLEU over an empty corpus")
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    matches, totals = [0] * n, [0] * n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for k in range(1, n + 1):
            c_counts, r_counts = _ngrams(cand, k), _ngrams(ref, k)
            matches[k - 1] += sum(min(c, r_counts[g]) for g, c in c_counts.items())
            totals[k - 1] += max(len(cand) - k + 1, 0)
    if matches[0] == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        p = m / t if m else BLEU_EPSILON / max(t, 1)
        log_p += math.log(p) / n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def dist_n(candidates: Sequence[Sequence], n: int) -> float:
    """Distinct n-grams over total n-grams, pooled over the whole corpus."""
    if not candidates:
        raise ValueError("Dist-n over an empty corpus")
    grams: Counter = Counter()
    for cand in candidates:
        grams.update(_ngrams(cand, n))
    total = sum(grams.values())
    if total == 0:
        log.warning("all candidates shorter than %d; Dist-%d is 0", n, n)
        return 0.0
    return len(grams) / total


def attribute_accuracy(candidates: Sequence[str], labels: Sequence[int], aspect: int, spec: SyntheticSpec) -> float:
    """Fraction of candidates the oracle assigns the requested label; empty ones miss."""
    if not candidates:
        return 0.0
    hits = 0
    for cand, lab in zip(candidates, labels):
        if cand and oracle_classify(cand, aspect, spec) == lab != OTHER:
            hits += 1
    return hits / len(candidates)


@dataclass
class EvalReport:
    bleu: list[float]
    dist1: float
    dist2: float
    accuracy: list[float]
    avg_len: float
    std_len: float
    n_examples: int
    candidates: list[str] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("candidates")
        return d

    def render(self, title: str = "PHED") -> str:
        acc_heads = [f"Acc-{i + 1}" for i in range(len(self.accuracy))]
        heads = ["Method", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "Dist-1", "Dist-2", *acc_heads, "Len."]
        row = [
            title,
            *(f"{100 * b:.2f}" for b in self.bleu),
            f"{100 * self.dist1:.2f}",
            f"{100 * self.dist2:.2f}",
            *(f"{100 * a:.1f}" for a in self.accuracy),
            f"{self.avg_len:.1f}±{self.std_len:.1f}",
        ]
        widths = [max(len(h), len(r)) for h, r in zip(heads, row)]
        line = lambda cells: " | ".join(c.rjust(w) for c, w in zip(cells, widths))
        table = "\n".join([line(heads), "-+-".join("-" * w for w in widths), line(row)])
        return f"{table}\n\n# metrics\n{json.dumps(self.summary(), sort_keys=True)}\n"


def metrics_report(candidates: Sequence[str], references: Sequence[str], requested, spec: SyntheticSpec | None) -> EvalReport:
    """Score generated strings against references; ``requested`` is a per-example label list."""
    bleu = [bleu_n(candidates, references, n) for n in range(1, 5)]
    lengths = [len(c) for c in candidates]
    acc = []
    if spec is not None and requested:
        k = len(requested[0])
        acc = [attribute_accuracy(candidates, [r[a] for r in requested], a, spec) for a in range(k)]
    return EvalReport(
        bleu=bleu,
        dist1=dist_n(candidates, 1),
        dist2=dist_n(candidates, 2),
        accuracy=acc,
        avg_len=statistics.fmean(lengths) if lengths else 0.0,
        std_len=statistics.pstdev(lengths) if lengths else 0.0,
        n_examples=len(candidates),
        candidates=list(candidates),
    )


@torch.no_grad()
def generate_batch(
    model,
    vocab: Vocabulary,
    messages: Sequence[str],
    controls: Sequence[Sequence[int]],
    seed: int = 0,
    method: str = "beam",
    width: int = 5,
    max_len: int | None = None,
    batch_size: int = 64,
) -> list[str]:
    """Generate one response per message; ``controls[r]`` is the label list for row ``r``."""
    from .decoding import beam_search, greedy_batch
    from .model import _pad
    from .numerics import RngState

    model.eval()
    max_len = max_len or model.config.max_response_len
    out: list[str] = []
    rng = RngState(seed)
    for start in range(0, len(messages), batch_size):
        chunk = messages[start : start + batch_size]
        x, mask = _pad([vocab.tokenize(m) for m in chunk])
        ctrl = torch.tensor([list(c) for c in controls[start : start + batch_size]], dtype=torch.long)
        state = model.forward_generate(x, ctrl, rng, message_mask=mask)
        if method == "greedy":
            hyps = greedy_batch(state, max_len)
        else:
            hyps = [beam_search(state.select(torch.tensor([r])), width, max_len)[0] for r in range(len(chunk))]
        out.extend(vocab.detokenize(h.tokens) for h in hyps)
    return out


def resolve_controls(policy, pairs: Sequence[DialoguePair], depth: int) -> list[list[int]]:
    """``"gold"`` copies each pair's labels; a label list fixes them for every pair."""
    if policy == "gold":
        return [list(p.attributes[:depth]) for p in pairs]
    fixed = list(policy)
    if len(fixed) != depth:
        raise ValueError(f"fixed controls need {depth} labels, got {len(fixed)}")
    return [fixed for _ in pairs]


def evaluate(
    model,
    vocab: Vocabulary,
    pairs: Sequence[DialoguePair],
    spec: SyntheticSpec | None,
    controls="gold",
    depth: int | None = None,
    method: str = "beam",
    width: int = 5,
    seed: int = 0,
) -> EvalReport:
    depth = depth or model.num_stages
    requested = resolve_controls(controls, pairs, depth)
    cands = generate_batch(model, vocab, [p.message for p in pairs], requested, seed, method, width)
    return metrics_report(cands, [p.response for p in pairs], requested, spec)


def validation_bleu(model, pairs: Sequence[DialoguePair], vocab: Vocabulary, stage: int, limit: int = 200) -> float:
    """BLEU-4 of greedy gold-controlled generations at depth ``stage``."""
    if stage < 1:
        raise ValueError("BLEU selection needs a stage >= 1")
    pairs = list(pairs)[:limit]
    requested = resolve_controls("gold", pairs, stage)
    was_training = model.training
    cands = generate_batch(model, vocab, [p.message for p in pairs], requested, 0, "greedy")
    model.train(was_training)
    return bleu_n(cands, [p.response for p in pairs], 4)


__all__ = [
    "BLEU_EPSILON",
    "EvalReport",
    "attribute_accuracy",
    "bleu_n",
    "dist_n",
    "evaluate",
    "generate_batch",
    "metrics_report",
]
