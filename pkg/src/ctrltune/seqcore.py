"""Vocabulary, token sequences, corpora, and the scalar probability helpers
every other module builds on.

Probabilities over sequences are carried in log space (nats) internally and
only exponentiated at interface boundaries such as example weights.
"""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import DimensionMismatch, ParseError, SupportMismatch, UnknownToken

logger = logging.getLogger(__name__)

#: Probability floor used when clamping predictions/references before logs.
PROB_FLOOR = 1e-7

#: Tolerance for "sums to one" checks on categorical distributions.
SUM_TOL = 1e-9


# --------------------------------------------------------------------------
# vocabulary and sequences
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Vocabulary:
    """An ordered token inventory.

    The begin-of-sequence marker is *not* a token: it lives at the reserved
    index ``size`` (one past the user tokens) and can never appear in data.
    An end-of-sequence token, when present, is an ordinary vocabulary entry.
    """

    tokens: tuple[str, ...]
    eos: str | None = None

    def __post_init__(self) -> None:
        if len(self.tokens) < 2:
            raise ValueError("vocabulary needs at least two tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        if self.eos is not None and self.eos not in self.tokens:
            raise ValueError(f"eos token {self.eos!r} not in vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def bos_index(self) -> int:
        return len(self.tokens)

    @property
    def eos_index(self) -> int | None:
        return None if self.eos is None else self.tokens.index(self.eos)

    def index(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise UnknownToken(f"unknown token {token!r}") from None

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.index(t) for t in tokens)

    def decode(self, indices: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.tokens[i] for i in indices)


@dataclass(frozen=True)
class Sequence:
    """A prompt/completion pair of token indices."""

    prompt: tuple[int, ...] = ()
    completion: tuple[int, ...] = ()

    @property
    def full(self) -> tuple[int, ...]:
        return self.prompt + self.completion

    def validate(self, vocab: Vocabulary) -> None:
        for i in self.full:
            if not 0 <= i < vocab.size:
                raise UnknownToken(f"token index {i} out of range for V={vocab.size}")
        eos = vocab.eos_index
        if eos is not None and eos in self.completion:
            if self.completion.index(eos) != len(self.completion) - 1:
                raise ParseError("tokens follow the end-of-sequence marker")


@dataclass
class Example:
    """A sequence with optional probability weight, oracle label, and an
    in-memory source tag used by subset rules (the tag is never serialized
    and never takes part in identity)."""

    seq: Sequence
    weight: float | None = None
    label: float | None = None
    tag: str | None = None

    @property
    def key(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return (self.seq.prompt, self.seq.completion)


@dataclass
class Corpus:
    examples: list[Example] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def __getitem__(self, i: int) -> Example:
        return self.examples[i]

    def dedup(self) -> tuple["Corpus", int]:
        """Drop later examples with a (prompt, completion) pair already seen.

        Returns the deduplicated corpus and the number of records removed.
        """
        seen: set[tuple] = set()
        kept: list[Example] = []
        for ex in self.examples:
            if ex.key in seen:
                continue
            seen.add(ex.key)
            kept.append(ex)
        return Corpus(kept), len(self.examples) - len(kept)

    def subset(self, pred: Callable[[Example], bool]) -> "Corpus":
        return Corpus([ex for ex in self.examples if pred(ex)])

    def prompts(self) -> list[tuple[int, ...]]:
        """Unique prompts in first-appearance order."""
        out: list[tuple[int, ...]] = []
        seen: set[tuple[int, ...]] = set()
        for ex in self.examples:
            if ex.seq.prompt not in seen:
                seen.add(ex.seq.prompt)
                out.append(ex.seq.prompt)
        return out


# --------------------------------------------------------------------------
# corpus file format
# --------------------------------------------------------------------------
#
# One record per line, tab-separated fields:
#   <prompt tokens, space separated>  <completion tokens>  [weight]  [label]
# An empty field means "absent".  Lines starting with '#' and blank lines are
# skipped.  Files are UTF-8.

def _parse_float_field(raw: str, what: str, path: str, line_no: int) -> float | None:
    if raw == "":
        return None
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(f"bad {what} field {raw!r}", path, line_no) from None
    if not (0.0 <= value <= 1.0):
        raise ParseError(f"{what} {value} outside [0, 1]", path, line_no)
    return value


def load_corpus(path: str, vocab: Vocabulary) -> Corpus:
    """Read a corpus file, validating tokens and dropping duplicate records.

    The number of duplicates removed is logged at INFO level.
    """
    examples: list[Example] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw_line in enumerate(fh, start=1):
            line = raw_line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if not 2 <= len(fields) <= 4:
                raise ParseError(
                    f"expected 2-4 tab-separated fields, got {len(fields)}",
                    path, line_no,
                )
            try:
                prompt = vocab.encode(fields[0].split())
                completion = vocab.encode(fields[1].split())
            except UnknownToken as exc:
                raise ParseError(str(exc), path, line_no) from None
            weight = _parse_float_field(fields[2], "weight", path, line_no) if len(fields) > 2 else None
            label = _parse_float_field(fields[3], "label", path, line_no) if len(fields) > 3 else None
            seq = Sequence(prompt, completion)
            seq.validate(vocab)
            examples.append(Example(seq, weight=weight, label=label))
    corpus, dropped = Corpus(examples).dedup()
    if dropped:
        logger.info("load_corpus(%s): removed %d duplicate records", path, dropped)
    return corpus


def save_corpus(path: str, corpus: Corpus, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus:
            fields = [
                " ".join(vocab.decode(ex.seq.prompt)),
                " ".join(vocab.decode(ex.seq.completion)),
            ]
            if ex.weight is not None or ex.label is not None:
                fields.append("" if ex.weight is None else repr(ex.weight))
            if ex.label is not None:
                fields.append(repr(ex.label))
            fh.write("\t".join(fields) + "\n")


# --------------------------------------------------------------------------
# vocabulary file format
# --------------------------------------------------------------------------
#
# Two lines: the space-separated token inventory, then "eos=<token>" (empty
# value when there is no end-of-sequence token).

def save_vocab(path: str, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(" ".join(vocab.tokens) + "\n")
        fh.write(f"eos={vocab.eos or ''}\n")


def load_vocab(path: str) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if len(lines) < 2 or not lines[1].startswith("eos="):
        raise ParseError("expected token line followed by an eos= line", path)
    tokens = tuple(lines[0].split())
    eos = lines[1][len("eos="):] or None
    try:
        return Vocabulary(tokens, eos)
    except ValueError as exc:
        raise ParseError(str(exc), path) from None


# --------------------------------------------------------------------------
# categorical distributions
# --------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically safe softmax (max-shifted, renormalized)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True, eq=False)
class Categorical:
    """A validated probability vector over a fixed-size alphabet."""

    probs: np.ndarray

    @staticmethod
    def from_probs(values) -> "Categorical":
        p = np.asarray(values, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise DimensionMismatch("categorical needs a non-empty 1-d vector")
        if (p < 0).any():
            raise ValueError("negative probability")
        if abs(float(p.sum()) - 1.0) > SUM_TOL:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        return Categorical(p)

    @staticmethod
    def from_logits(logits) -> "Categorical":
        return Categorical(softmax(logits))

    def __len__(self) -> int:
        return self.probs.size


def _as_probs(dist) -> np.ndarray:
    return np.asarray(getattr(dist, "probs", dist), dtype=np.float64)


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats.  Zero p-mass terms contribute nothing; q-mass
    missing under p-mass raises SupportMismatch."""
    pa, qa = _as_probs(p), _as_probs(q)
    if pa.shape != qa.shape:
        raise DimensionMismatch(f"KL shapes differ: {pa.shape} vs {qa.shape}")
    live = pa > 0.0
    if (qa[live] == 0.0).any():
        raise SupportMismatch("reference assigns zero mass inside p's support")
    val = float(np.sum(pa[live] * (np.log(pa[live]) - np.log(qa[live]))))
    # exact KL is non-negative; rounding can leave a ~1e-16 residue
    return max(val, 0.0)


def binary_cross_entropy(pred: float, target: float, eps: float = PROB_FLOOR) -> float:
    """Cross-entropy of a Bernoulli prediction clamped into [eps, 1-eps]."""
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"target {target} outside [0, 1]")
    p = min(max(float(pred), eps), 1.0 - eps)
    return -(target * math.log(p) + (1.0 - target) * math.log(1.0 - p))


def sample_categorical(rng: np.random.Generator, dist) -> int:
    """Draw one index.  Contract: a single uniform draw mapped through the
    cumulative distribution, so equal seeds give equal indices."""
    p = _as_probs(dist)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return min(idx, p.size - 1)


# --------------------------------------------------------------------------
# seeded stream derivation
# --------------------------------------------------------------------------

def derive_rng(seed: int, *path) -> np.random.Generator:
    """A generator whose stream depends only on (seed, path).

    Path components may be ints or strings; strings are hashed with crc32 so
    the derivation is stable across runs and platforms.
    """
    words = [int(seed)]
    for part in path:
        if isinstance(part, int):
            words.append(part & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(part).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(words))


__all__ = [
    "PROB_FLOOR", "SUM_TOL", "Vocabulary", "Sequence", "Example", "Corpus",
    "load_corpus", "save_corpus", "load_vocab", "save_vocab", "softmax",
    "Categorical", "kl_divergence", "binary_cross_entropy",
    "sample_categorical", "derive_rng",
]
