"""Metrics and their on-disk table format.

Violation rates are exact by default — a dynamic program for finite-context
models, full enumeration for guided ones — with a Monte Carlo fallback for
scales where neither fits.  The metrics table is written with repr() floats
so reruns of a deterministic experiment are byte-identical; the three
timing columns are the one intentional exception, and
``strip_timing_columns`` produces the comparable view.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .errors import TemplateTokenMissing
from .guide import expected_satisfaction
from .models import sample_completion, sequence_logprob
from .oracles import Oracle, evaluate, exact_satisfaction_dp
from .seqcore import Corpus
from .seqcore import Sequence as _Seq

__all__ = [
    "violation_rate", "perplexity", "kl_drift", "classification_accuracy",
    "MetricsRow", "write_metrics_csv", "read_metrics_csv",
    "strip_timing_columns",
]


# --------------------------------------------------------------------------
# scalar metrics
# --------------------------------------------------------------------------

#: Enumeration is considered affordable up to this many sequences per prompt.
ENUM_SEQUENCE_CAP = 65536


def _enumerable(model, max_len: int) -> bool:
    return model.vocab.size ** max_len <= ENUM_SEQUENCE_CAP


def violation_rate(model, oracle: Oracle, prompts, max_len: int, *,
                   method: str = "auto", rng=None, samples: int = 0) -> float:
    """Probability of violating the oracle, averaged over prompts.

    ``auto`` picks the dynamic program for finite-context models and
    enumeration for guided ones (falling back to Monte Carlo when the space
    is too large to enumerate and an ``rng`` is supplied); ``mc`` estimates
    from ``samples`` draws per prompt using ``rng``.
    """
    if method == "auto":
        if getattr(model, "kind", "") != "guided":
            method = "dp"
        elif _enumerable(model, max_len):
            method = "enumerate"
        elif rng is not None and samples > 0:
            method = "mc"
        else:
            raise ValueError(
                "guided model too large to enumerate; pass rng and samples")
    total = 0.0
    for prompt in prompts:
        prompt = tuple(prompt)
        if method == "dp":
            sat = exact_satisfaction_dp(model, oracle, prompt, (), max_len)
        elif method == "enumerate":
            sat = expected_satisfaction(model, oracle, prompt, max_len)
        elif method == "mc":
            if rng is None or samples <= 0:
                raise ValueError("mc mode needs rng and a positive sample count")
            hits = sum(evaluate(oracle, prompt,
                                sample_completion(model, rng, prompt, max_len))
                       for _ in range(samples))
            sat = hits / samples
        else:
            raise ValueError(f"unknown method {method!r}")
        total += sat
    return float(1.0 - total / len(list(prompts)))


def perplexity(model, corpus: Corpus) -> float:
    """exp of the per-token negative log-likelihood over the corpus,
    weight-aware.  Impossible completions give inf."""
    total_lp = 0.0
    total_tokens = 0.0
    for ex in corpus:
        w = 1.0 if ex.weight is None else ex.weight
        lp = sequence_logprob(model, ex.seq)
        total_lp += w * lp
        total_tokens += w * len(ex.seq.completion)
    if total_tokens <= 0.0:
        raise ValueError("perplexity needs at least one completion token")
    avg = -total_lp / total_tokens
    return math.inf if avg > 700.0 else float(math.exp(avg))


def kl_drift(model, reference, prompts, max_len: int, *,
             method: str = "auto", rng=None, samples: int = 0) -> float:
    """Mean sequence-level KL(model || reference) over the prompts.

    Exact by enumeration when the sequence space is small enough (the
    ``auto`` default); ``mc`` averages log-probability ratios over
    ``samples`` draws from the model, which is unbiased for the same KL.
    Measures how far fine-tuning moved the distribution."""
    from .models import enumerate_sequence_dist

    if method == "auto":
        if _enumerable(model, max_len):
            method = "exact"
        elif rng is not None and samples > 0:
            method = "mc"
        else:
            raise ValueError(
                "sequence space too large to enumerate; pass rng and samples")
    total = 0.0
    for prompt in prompts:
        prompt = tuple(prompt)
        if method == "exact":
            p = enumerate_sequence_dist(model, prompt, max_len)
            q = enumerate_sequence_dist(reference, prompt, max_len)
            acc = 0.0
            for y, py in p.items():
                if py > 0.0:
                    acc += py * (math.log(py) - math.log(q[y]))
        elif method == "mc":
            if rng is None or samples <= 0:
                raise ValueError("mc mode needs rng and a positive sample count")
            acc = 0.0
            for _ in range(samples):
                y = sample_completion(model, rng, prompt, max_len)
                seq = _Seq(prompt, y)
                acc += sequence_logprob(model, seq) - sequence_logprob(reference, seq)
            acc /= samples
        else:
            raise ValueError(f"unknown method {method!r}")
        total += max(acc, 0.0)
    return float(total / len(list(prompts)))


def classification_accuracy(model, corpus: Corpus, yes_index: int,
                            no_index: int) -> float:
    """Accuracy of binary next-token answers.

    Each example's prompt poses the question, its first completion token is
    the gold answer.  The model answers yes only when it strictly prefers
    the yes token (ties count as no)."""
    V = model.vocab.size
    for idx, name in ((yes_index, "yes"), (no_index, "no")):
        if not 0 <= idx < V:
            raise TemplateTokenMissing(f"{name} token index {idx} outside vocabulary")
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    correct = 0
    for ex in corpus:
        gold = ex.seq.completion[0]
        if gold not in (yes_index, no_index):
            raise ValueError(f"gold answer {gold} is neither yes nor no token")
        probs = model.probs_from_key(model.context_key(ex.seq.prompt, ()))
        pred = yes_index if probs[yes_index] > probs[no_index] else no_index
        correct += int(pred == gold)
    return float(correct / len(corpus))


# --------------------------------------------------------------------------
# metrics table
# --------------------------------------------------------------------------

TIMING_COLUMNS = ("t_data", "t_nado", "t_finetune")


@dataclass
class MetricsRow:
    round: int
    t_data: float
    t_nado: float
    t_finetune: float
    violation_rate: float
    perplexity: float
    kl_drift: float
    nado_max_prefix_error: float


_COLUMNS = tuple(f.name for f in fields(MetricsRow))


def _cell(value) -> str:
    return str(value) if isinstance(value, int) else repr(float(value))


def write_metrics_csv(path: str, rows: list[MetricsRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_cell(getattr(row, c)) for c in _COLUMNS) + "\n")


def read_metrics_csv(path: str) -> list[MetricsRow]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != _COLUMNS:
            raise ValueError(f"{path}: unexpected columns {header}")
        rows = []
        for line in fh:
            if not line.strip():
                continue
            cells = line.strip().split(",")
            rows.append(MetricsRow(int(cells[0]),
                                   *(float(c) for c in cells[1:])))
    return rows


def strip_timing_columns(csv_text: str) -> str:
    """The byte-comparable view of a metrics table: every column except the
    wall-clock timings, which legitimately differ between reruns."""
    lines = csv_text.strip().split("\n")
    header = lines[0].split(",")
    keep = [i for i, name in enumerate(header) if name not in TIMING_COLUMNS]
    out = []
    for line in lines:
        cells = line.split(",")
        out.append(",".join(cells[i] for i in keep))
    return "\n".join(out) + "\n"
