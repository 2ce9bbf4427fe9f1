"""Character vocabulary, dialogue corpus, and the synthetic attribute-labelled
corpus with its rule-based attribute oracles.

Synthetic responses carry three aspects, in training order:

1. marker class: the response holds a marker character from one of three
   disjoint marker sets;
2. tone: the final character is ``.`` (declarative) or ``?`` (interrogative);
3. length: short (at most ``short_max`` characters) or long (at least
   ``long_min``).
"""

from __future__ import annotations

import json
import random
import string
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

UNK, EOS, BOS, PAD = 0, 1, 2, 3
SPECIALS = ("<UNK>", "<EOS>", "<BOS>", "<PAD>")
UNK_CHAR = "�"
OTHER = -1

MARKER, TONE, LENGTH = 0, 1, 2
ASPECT_NAMES = ("marker", "tone", "length")


class CorpusError(ValueError):
    pass


class Vocabulary:
    """Character-level vocabulary with the four special tokens at ids 0-3."""

    def __init__(self, chars: Iterable[str]):
        chars = list(chars)
        if len(set(chars)) != len(chars):
            raise ValueError("duplicate characters in vocabulary")
        if any(len(c) != 1 for c in chars):
            raise ValueError("vocabulary entries must be single characters")
        self.chars = chars
        self.tokens = list(SPECIALS) + chars
        self._index = {c: i + len(SPECIALS) for i, c in enumerate(chars)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.chars == other.chars

    def id(self, ch: str) -> int:
        return self._index.get(ch, UNK)

    def tokenize(self, text: str) -> list[int]:
        return [self._index.get(ch, UNK) for ch in text]

    def detokenize(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if i in (EOS, BOS, PAD):
                continue
            out.append(UNK_CHAR if i == UNK else self.tokens[i])
        return "".join(out)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        return cls(sorted(set("".join(texts))))


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.tokenize(text)


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return vocab.detokenize(ids)


@dataclass(frozen=True)
class DialoguePair:
    message: str
    response: str
    attributes: tuple[int, ...]


@dataclass
class CorpusSplit:
    train: list[DialoguePair]
    validation: list[DialoguePair]
    test: list[DialoguePair]
    ratios: tuple[float, float, float] = (0.90, 0.05, 0.05)

    @property
    def num_aspects(self) -> int:
        for part in (self.train, self.validation, self.test):
            if part:
                return len(part[0].attributes)
        return 0

    def all_pairs(self) -> list[DialoguePair]:
        return self.train + self.validation + self.test

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.from_texts(p.message + p.response for p in self.all_pairs())


def split_corpus(
    pairs: Sequence[DialoguePair], ratios=(0.90, 0.05, 0.05), seed: int = 0
) -> CorpusSplit:
    order = list(range(len(pairs)))
    random.Random(seed).shuffle(order)
    n_train = round(ratios[0] * len(pairs))
    n_val = round(ratios[1] * len(pairs))
    picked = [pairs[i] for i in order]
    return CorpusSplit(
        picked[:n_train], picked[n_train : n_train + n_val], picked[n_train + n_val :], tuple(ratios)
    )


CONTENT_CHARS = string.ascii_lowercase + string.ascii_uppercase[:24]
MARKER_CHARS = "123456789"
TERMINALS = ".?"


@dataclass
class SyntheticSpec:
    n_pairs: int = 10_000
    seed: int = 0
    n_content: int = 50
    n_marker_classes: int = 3
    markers_per_class: int = 3
    short_min: int = 3
    short_max: int = 6
    long_min: int = 10
    long_max: int = 16
    message_min: int = 16
    message_max: int = 20
    noise: float = 0.1
    content_shift: int = 0

    def __post_init__(self):
        if self.n_content > len(CONTENT_CHARS):
            raise ValueError(f"at most {len(CONTENT_CHARS)} content tokens available")
        if self.n_marker_classes * self.markers_per_class > len(MARKER_CHARS):
            raise ValueError(f"at most {len(MARKER_CHARS)} marker tokens available")

    @property
    def content(self) -> str:
        return CONTENT_CHARS[: self.n_content]

    def markers(self, cls: int) -> str:
        k = self.markers_per_class
        return MARKER_CHARS[cls * k : (cls + 1) * k]

    @property
    def labels_per_aspect(self) -> list[int]:
        return [self.n_marker_classes, 2, 2]

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.content + MARKER_CHARS[: self.n_marker_classes * self.markers_per_class] + TERMINALS)

    def validate(self) -> None:
        # marker + at least one content character + terminal
        if self.short_min < 3:
            raise ValueError("infeasible spec: short responses need at least 3 tokens")
        if not self.short_min <= self.short_max < self.long_min <= self.long_max:
            raise ValueError("infeasible spec: length bands must be ordered and disjoint")
        if self.message_min < 1:
            raise ValueError("infeasible spec: messages need at least one character")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError("noise must be in [0, 1)")


def _respond(message: str, labels: Sequence[int], spec: SyntheticSpec, rnd: random.Random) -> str:
    marker_cls, tone, length = labels
    if length == 0:
        n = rnd.randint(spec.short_min, spec.short_max)
    else:
        n = rnd.randint(spec.long_min, spec.long_max)
    content = spec.content
    topic = content[(content.index(message[0]) + spec.content_shift) % len(content)]
    body = [rnd.choice(content) if rnd.random() < spec.noise else topic for _ in range(n - 2)]
    return rnd.choice(spec.markers(marker_cls)) + "".join(body) + TERMINALS[tone]


def generate_synthetic_corpus(spec: SyntheticSpec) -> CorpusSplit:
    """Messages are random content strings. Each response starts with a marker
    of its class, repeats the message's topic token (its first character,
    shifted by ``content_shift``) with a fraction ``noise`` of positions
    replaced at random, and ends with the tone terminal; its total length
    falls in the requested band.
    """
    spec.validate()
    rnd = random.Random(spec.seed)
    pairs = []
    for _ in range(spec.n_pairs):
        m_len = rnd.randint(spec.message_min, spec.message_max)
        message = "".join(rnd.choice(spec.content) for _ in range(m_len))
        labels = (rnd.randrange(spec.n_marker_classes), rnd.randrange(2), rnd.randrange(2))
        pairs.append(DialoguePair(message, _respond(message, labels, spec, rnd), labels))
    return split_corpus(pairs, seed=spec.seed + 1)


def oracle_classify(response: str, aspect: int, spec: SyntheticSpec) -> int:
    """Rule-based attribute label of ``response``; ``OTHER`` when undecidable."""
    if aspect == MARKER:
        present = {c for c in range(spec.n_marker_classes) if any(ch in spec.markers(c) for ch in response)}
        return present.pop() if len(present) == 1 else OTHER
    if aspect == TONE:
        if response and response[-1] in TERMINALS:
            return TERMINALS.index(response[-1])
        return OTHER
    if aspect == LENGTH:
        if len(response) <= spec.short_max:
            return 0
        if len(response) >= spec.long_min:
            return 1
        return OTHER
    raise ValueError(f"aspect {aspect} has no oracle")


def save_corpus(split: CorpusSplit, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in ("train", "validation", "test"):
            for p in getattr(split, name):
                rec = {"split": name, "message": p.message, "response": p.response, "attributes": list(p.attributes)}
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_corpus(path: str | Path, num_aspects: int | None = None) -> CorpusSplit:
    parts: dict[str, list[DialoguePair]] = {"train": [], "validation": [], "test": []}
    arity = num_aspects
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                attrs = tuple(int(a) for a in rec["attributes"])
                pair = DialoguePair(str(rec["message"]), str(rec["response"]), attrs)
                split = rec.get("split", "train")
                if split not in parts:
                    raise CorpusError(f"unknown split {split!r}")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed record ({exc})") from None
            if arity is None:
                arity = len(attrs)
            elif len(attrs) != arity:
                raise CorpusError(f"{path}:{lineno}: expected {arity} attributes, got {len(attrs)}")
            parts[split].append(pair)
    return CorpusSplit(parts["train"], parts["validation"], parts["test"])


def spec_to_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
