"""Sequence-level constraint oracles, their finite-automaton compilation,
and exact prefix-satisfaction probabilities.

An oracle judges a whole sequence (prompt and completion jointly) and returns
a verdict in [0, 1]; every built-in rule is binary.  The satisfaction
probability of a prefix is the chance that completing it under a given model
yields an accepted sequence.  Two independent routes compute it exactly:
brute-force enumeration over suffixes (any oracle, budget-guarded) and a
backward dynamic program over (position, model context, automaton state)
(rule oracles on finite-context models).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BudgetExceeded,
    DimensionMismatch,
    ParseError,
    UnknownToken,
    UnsupportedOracle,
)
from .seqcore import Corpus, Example, Sequence, Vocabulary
from .models import sequence_logprob

#: Default cap on the number of suffixes exact enumeration may visit.
ENUM_BUDGET = 10**6


# --------------------------------------------------------------------------
# deterministic finite automata
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DFA:
    """A total DFA over token indices 0..V-1."""

    transitions: np.ndarray  # (states, V) int
    start: int
    accepting: np.ndarray    # (states,) bool

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def alphabet_size(self) -> int:
        return self.transitions.shape[1]

    def step(self, state: int, token: int) -> int:
        return int(self.transitions[state, token])

    def run(self, tokens, state: int | None = None) -> int:
        s = self.start if state is None else state
        for t in tokens:
            s = int(self.transitions[s, t])
        return s

    def accepts(self, tokens) -> bool:
        return bool(self.accepting[self.run(tokens)])

    def product(self, other: "DFA") -> "DFA":
        """Intersection automaton, restricted to reachable pair states."""
        if self.alphabet_size != other.alphabet_size:
            raise DimensionMismatch("product of DFAs over different alphabets")
        V = self.alphabet_size
        pairs: list[tuple[int, int]] = [(self.start, other.start)]
        index: dict[tuple[int, int], int] = {pairs[0]: 0}
        rows: list[list[int]] = []
        acc: list[bool] = []
        i = 0
        while i < len(pairs):
            a, b = pairs[i]
            acc.append(bool(self.accepting[a] and other.accepting[b]))
            row = []
            for t in range(V):
                nxt = (int(self.transitions[a, t]), int(other.transitions[b, t]))
                if nxt not in index:
                    index[nxt] = len(pairs)
                    pairs.append(nxt)
                row.append(index[nxt])
            rows.append(row)
            i += 1
        return DFA(np.array(rows, dtype=np.int64), 0, np.array(acc, dtype=bool))


def _substring_dfa(pattern: tuple[int, ...], vocab_size: int) -> DFA:
    """Reject exactly the strings containing ``pattern`` contiguously.

    States 0..m-1 track the longest live match; state m is the absorbing
    dead state entered on a complete match.
    """
    m = len(pattern)
    trans = np.zeros((m + 1, vocab_size), dtype=np.int64)
    for s in range(m):
        got = pattern[:s]
        for t in range(vocab_size):
            cand = got + (t,)
            j = next(k for k in range(len(cand), -1, -1) if cand[len(cand) - k:] == pattern[:k])
            trans[s, t] = j
    trans[m, :] = m
    acc = np.ones(m + 1, dtype=bool)
    acc[m] = False
    return DFA(trans, 0, acc)


def _max_count_dfa(token: int, limit: int, vocab_size: int) -> DFA:
    """Accept while ``token`` has occurred at most ``limit`` times."""
    n = limit + 2  # counts 0..limit plus one absorbing overflow state
    trans = np.zeros((n, vocab_size), dtype=np.int64)
    for s in range(n):
        for t in range(vocab_size):
            if s == n - 1:
                trans[s, t] = s
            elif t == token:
                trans[s, t] = s + 1
            else:
                trans[s, t] = s
    acc = np.ones(n, dtype=bool)
    acc[n - 1] = False
    return DFA(trans, 0, acc)


def _accept_all_dfa(vocab_size: int) -> DFA:
    return DFA(np.zeros((1, vocab_size), dtype=np.int64), 0, np.ones(1, dtype=bool))


# --------------------------------------------------------------------------
# oracles
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Oracle:
    """A whole-sequence constraint.  Use the constructors below."""

    kind: str
    patterns: tuple[tuple[int, ...], ...] = ()
    token: int = -1
    limit: int = 0
    dfa: DFA | None = None
    parts: tuple["Oracle", ...] = field(default=())

    @staticmethod
    def forbid(*patterns) -> "Oracle":
        pats = tuple(tuple(p) for p in patterns)
        if any(len(p) == 0 for p in pats):
            raise ValueError("forbidden patterns must be non-empty")
        return Oracle("forbidden_substring", patterns=pats)

    @staticmethod
    def max_count(token: int, limit: int) -> "Oracle":
        if limit < 0:
            raise ValueError("limit must be non-negative")
        return Oracle("max_count", token=token, limit=limit)

    @staticmethod
    def automaton(dfa: DFA) -> "Oracle":
        return Oracle("automaton", dfa=dfa)

    @staticmethod
    def and_all(parts) -> "Oracle":
        parts = tuple(parts)
        if not parts:
            raise ValueError("composite oracle needs at least one part")
        if len(parts) == 1:
            return parts[0]
        return Oracle("composite_and", parts=parts)


def _contains(haystack: tuple[int, ...], needle: tuple[int, ...]) -> bool:
    n = len(needle)
    return any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


def evaluate(oracle: Oracle, prompt: tuple[int, ...], completion: tuple[int, ...]) -> float:
    """Verdict on the joint sequence, 1.0 = satisfied."""
    full = tuple(prompt) + tuple(completion)
    if oracle.kind == "forbidden_substring":
        return 0.0 if any(_contains(full, p) for p in oracle.patterns) else 1.0
    if oracle.kind == "max_count":
        return 1.0 if sum(1 for t in full if t == oracle.token) <= oracle.limit else 0.0
    if oracle.kind == "automaton":
        return 1.0 if oracle.dfa.accepts(full) else 0.0
    if oracle.kind == "composite_and":
        return min(evaluate(part, prompt, completion) for part in oracle.parts)
    raise UnsupportedOracle(f"unknown oracle kind {oracle.kind!r}")


def compile_oracle(oracle: Oracle, vocab_size: int) -> DFA:
    """Compile to a DFA accepting exactly the satisfying sequences."""
    if oracle.kind == "forbidden_substring":
        if not oracle.patterns:
            return _accept_all_dfa(vocab_size)
        dfas = [_substring_dfa(p, vocab_size) for p in oracle.patterns]
    elif oracle.kind == "max_count":
        return _max_count_dfa(oracle.token, oracle.limit, vocab_size)
    elif oracle.kind == "automaton":
        if oracle.dfa.alphabet_size != vocab_size:
            raise DimensionMismatch(
                f"automaton alphabet {oracle.dfa.alphabet_size} != vocab {vocab_size}"
            )
        return oracle.dfa
    elif oracle.kind == "composite_and":
        dfas = [compile_oracle(part, vocab_size) for part in oracle.parts]
    else:
        raise UnsupportedOracle(f"cannot compile oracle kind {oracle.kind!r}")
    out = dfas[0]
    for nxt in dfas[1:]:
        out = out.product(nxt)
    return out


# --------------------------------------------------------------------------
# exact satisfaction probabilities
# --------------------------------------------------------------------------

def _is_complete(prefix: tuple[int, ...], eos: int | None, max_len: int) -> bool:
    return len(prefix) >= max_len or (eos is not None and len(prefix) > 0 and prefix[-1] == eos)


def exact_satisfaction_enumerate(model, oracle: Oracle, prompt: tuple[int, ...],
                                 prefix: tuple[int, ...], max_len: int,
                                 budget: int = ENUM_BUDGET) -> float:
    """Pr[accepted] by summing over every completion of ``prefix``.

    Works for any oracle; raises BudgetExceeded when the suffix space
    (bounded by V**remaining) is larger than ``budget``.
    """
    V = model.vocab.size
    eos = model.vocab.eos_index
    remaining = max_len - len(prefix)
    if remaining < 0:
        raise ValueError("prefix longer than max_len")
    if V ** remaining > budget:
        raise BudgetExceeded(f"{V}**{remaining} suffixes exceed budget {budget}")

    def rec(cur: tuple[int, ...], prob: float) -> float:
        if _is_complete(cur, eos, max_len):
            return prob * evaluate(oracle, prompt, cur)
        probs = model.probs_from_key(model.context_key(prompt, cur))
        return sum(rec(cur + (v,), prob * probs[v]) for v in range(V))

    return float(rec(tuple(prefix), 1.0))


def exact_satisfaction_dp(model, oracle: Oracle | DFA, prompt: tuple[int, ...],
                          prefix: tuple[int, ...], max_len: int,
                          memo: dict | None = None) -> float:
    """Same quantity via a backward pass over (budget, context, DFA state).

    Requires a finite-context model (both model families qualify) and a
    compilable oracle.  Agrees with enumeration to within float rounding.

    Subproblems are keyed on (steps remaining, model context window, DFA
    state), which is everything the value depends on, so a ``memo`` dict
    may be passed in and shared across calls — valid as long as the model,
    oracle, and ``max_len`` stay fixed.
    """
    V = model.vocab.size
    eos = model.vocab.eos_index
    dfa = oracle if isinstance(oracle, DFA) else compile_oracle(oracle, V)
    prefix = tuple(prefix)
    if _is_complete(prefix, eos, max_len):
        return float(dfa.accepting[dfa.run(tuple(prompt) + prefix)])
    state0 = dfa.run(tuple(prompt) + prefix)
    key0 = model.context_key(prompt, prefix)
    if memo is None:
        memo = {}

    def value(r: int, key: tuple[int, ...], state: int) -> float:
        if r <= 0:
            return 1.0 if dfa.accepting[state] else 0.0
        entry = (r, key, state)
        got = memo.get(entry)
        if got is not None:
            return got
        probs = model.probs_from_key(key)
        total = 0.0
        for v in range(V):
            ns = int(dfa.transitions[state, v])
            if eos is not None and v == eos:
                total += probs[v] * (1.0 if dfa.accepting[ns] else 0.0)
            else:
                nkey = key[1:] + (v,) if key else ()
                total += probs[v] * value(r - 1, nkey, ns)
        memo[entry] = total
        return total

    return float(value(max_len - len(prefix), key0, state0))


# --------------------------------------------------------------------------
# corpus labeling
# --------------------------------------------------------------------------

def label_corpus(corpus: Corpus, oracle: Oracle) -> Corpus:
    """Attach oracle verdicts as labels (weights and tags untouched)."""
    return Corpus([
        Example(ex.seq, weight=ex.weight,
                label=evaluate(oracle, ex.seq.prompt, ex.seq.completion),
                tag=ex.tag)
        for ex in corpus
    ])


def label_and_weight_corpus(corpus: Corpus, model, oracle: Oracle) -> Corpus:
    """Deduplicate, then weight each record by the model's probability of its
    completion and label it with the oracle verdict."""
    deduped, _ = corpus.dedup()
    out = []
    for ex in deduped:
        weight = float(np.exp(sequence_logprob(model, ex.seq)))
        label = evaluate(oracle, ex.seq.prompt, ex.seq.completion)
        out.append(Example(ex.seq, weight=weight, label=label, tag=ex.tag))
    return Corpus(out)


# --------------------------------------------------------------------------
# oracle rule files
# --------------------------------------------------------------------------
#
# One rule per line, rules conjoined:
#   forbid <tok> [<tok> ...]      reject sequences containing the token run
#   maxcount <tok> <k>            reject sequences with more than k of <tok>
# '#' comments and blank lines are skipped.

def parse_oracle_file(path: str, vocab: Vocabulary) -> Oracle:
    rules: list[Oracle] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "forbid" and len(parts) >= 2:
                    rules.append(Oracle.forbid(vocab.encode(parts[1:])))
                elif parts[0] == "maxcount" and len(parts) == 3:
                    rules.append(Oracle.max_count(vocab.index(parts[1]), int(parts[2])))
                else:
                    raise ParseError(f"unrecognized rule {line!r}", path, line_no)
            except UnknownToken as exc:
                raise ParseError(str(exc), path, line_no) from None
            except ValueError as exc:
                raise ParseError(str(exc), path, line_no) from None
    if not rules:
        raise ParseError("no rules found", path)
    return Oracle.and_all(rules)


def write_oracle_file(path: str, oracle: Oracle, vocab: Vocabulary) -> None:
    def lines(o: Oracle):
        if o.kind == "forbidden_substring":
            for p in o.patterns:
                yield "forbid " + " ".join(vocab.decode(p))
        elif o.kind == "max_count":
            yield f"maxcount {vocab.tokens[o.token]} {o.limit}"
        elif o.kind == "composite_and":
            for part in o.parts:
                yield from lines(part)
        else:
            raise UnsupportedOracle(f"cannot serialize oracle kind {o.kind!r}")

    with open(path, "w", encoding="utf-8") as fh:
        for line in lines(oracle):
            fh.write(line + "\n")
