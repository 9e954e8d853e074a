"""Constraint-guided decoding.

Wraps a base sequence model and a per-prefix satisfaction source into the
closed-form solution of the constrained projection: find the distribution
closest in KL to the base model whose expected constraint satisfaction is at
least ``delta``.  Writing r for the satisfaction probability of a prefix and
r0 for that of the bare prompt, the guided next-token weights are

    w(v | s) = (delta - r0) * r(s + v) + (1 - delta) * r0     when delta > r0

and the guided step is p(v|s) * w(v|s), renormalized.  When delta <= r0 the
constraint is already met and the base model is returned untouched.  With
delta = 1 this reduces to reweighting by r alone, which (for an exact
satisfaction source) is precisely the base model conditioned on satisfying
the constraint.

The satisfaction source is either a trained head (`NadoSource`) or exact
dynamic programming against a frozen reference model (`ExactSource`).  The
reference model inside `ExactSource` must stay fixed while the decode-time
model evolves; callers snapshot it at guide-construction time.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGuide, InfeasibleConstraint
from .models import enumerate_sequence_dist
from .oracles import DFA, Oracle, compile_oracle, evaluate, exact_satisfaction_dp
from .seqcore import Categorical

logger = logging.getLogger(__name__)


class NadoSource:
    """Satisfaction estimates from a trained head."""

    def __init__(self, nado):
        self.nado = nado

    def satisfaction(self, prompt: tuple[int, ...], prefix: tuple[int, ...]) -> float:
        return self.nado.predict(prompt, prefix)


class ExactSource:
    """Exact satisfaction probabilities under a frozen reference model.

    The dynamic program needs a finite-context model, so this source cannot
    wrap a guided model; use enumeration for those.
    """

    def __init__(self, model, oracle: Oracle, max_len: int):
        self.model = model
        self.oracle = oracle
        self.max_len = max_len
        self._dfa: DFA = compile_oracle(oracle, model.vocab.size)
        self._cache: dict[tuple[tuple[int, ...], tuple[int, ...]], float] = {}
        # subproblem table shared across queries (the model is frozen)
        self._memo: dict = {}

    def satisfaction(self, prompt: tuple[int, ...], prefix: tuple[int, ...]) -> float:
        key = (tuple(prompt), tuple(prefix))
        got = self._cache.get(key)
        if got is None:
            got = exact_satisfaction_dp(self.model, self._dfa, key[0], key[1],
                                        self.max_len, self._memo)
            self._cache[key] = got
        return got


@dataclass(frozen=True)
class GuideConfig:
    """``delta`` is the satisfaction floor; ``eps`` the probability clamp used
    when the guided distribution enters a KL term; ``on_degenerate`` picks the
    reaction when every next-token weight vanishes (a prefix the source deems
    hopeless): fall back to the base distribution, or raise."""

    delta: float = 1.0
    eps: float = 1e-7
    on_degenerate: str = "fallback"

    def __post_init__(self) -> None:
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")
        if self.on_degenerate not in ("fallback", "error"):
            raise ValueError(f"on_degenerate must be 'fallback' or 'error', "
                             f"got {self.on_degenerate!r}")


class GuidedModel:
    """Base model reweighted step-by-step toward the satisfaction floor.

    Speaks the same protocol as the sequence models (``vocab``,
    ``context_key``, ``probs_from_key``, ``next_dist``), with the full
    (prompt, prefix) pair as its context key, so sampling and enumeration
    helpers apply unchanged.  Not Markov: the dynamic-programming
    satisfaction solver does not apply to it.
    """

    kind = "guided"

    def __init__(self, base, source, config: GuideConfig = GuideConfig()):
        self.base = base
        self.source = source
        self.config = config
        self.vocab = base.vocab
        self._root: dict[tuple[int, ...], float] = {}
        self._warned = False

    def root_satisfaction(self, prompt: tuple[int, ...]) -> float:
        prompt = tuple(prompt)
        got = self._root.get(prompt)
        if got is None:
            got = self.source.satisfaction(prompt, ())
            self._root[prompt] = got
        return got

    def context_key(self, prompt, prefix) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return (tuple(prompt), tuple(prefix))

    def probs_from_key(self, key) -> np.ndarray:
        prompt, prefix = key
        base_probs = self.base.probs_from_key(self.base.context_key(prompt, prefix))
        r0 = self.root_satisfaction(prompt)
        delta = self.config.delta
        if delta <= r0:
            return base_probs
        a = delta - r0
        b = (1.0 - delta) * r0
        weights = np.array([
            a * self.source.satisfaction(prompt, prefix + (v,)) + b
            for v in range(self.vocab.size)
        ])
        unnorm = base_probs * weights
        z = unnorm.sum()
        if z <= 0.0:
            if self.config.on_degenerate == "error":
                raise DegenerateGuide(
                    f"all next-token weights vanish at prompt={prompt} "
                    f"prefix={prefix}")
            if not self._warned:
                logger.warning(
                    "guide degenerate at prompt=%s prefix=%s; falling back to "
                    "the base distribution (further fallbacks logged at DEBUG)",
                    prompt, prefix)
                self._warned = True
            else:
                logger.debug("guide degenerate at prompt=%s prefix=%s", prompt, prefix)
            return base_probs
        return unnorm / z

    def next_dist(self, prompt, prefix) -> Categorical:
        return Categorical.from_probs(self.probs_from_key(self.context_key(prompt, prefix)))


# --------------------------------------------------------------------------
# reference distributions and distances
# --------------------------------------------------------------------------

def exact_conditional_dist(model, oracle: Oracle, prompt: tuple[int, ...],
                           max_len: int) -> dict[tuple[int, ...], float]:
    """The base model conditioned on satisfying the oracle, by enumeration.

    Violating completions keep zero entries so the support matches the
    unconditioned enumeration.  Raises InfeasibleConstraint when no
    satisfying completion has positive probability.
    """
    dist = enumerate_sequence_dist(model, prompt, max_len)
    kept = {y: (p if evaluate(oracle, tuple(prompt), y) > 0.5 else 0.0)
            for y, p in dist.items()}
    mass = sum(kept.values())
    if mass <= 0.0:
        raise InfeasibleConstraint(
            f"no completion of prompt {tuple(prompt)} satisfies the oracle")
    return {y: p / mass for y, p in kept.items()}


def expected_satisfaction(model, oracle: Oracle, prompt: tuple[int, ...],
                          max_len: int) -> float:
    """E[C] under the model's completion distribution, by enumeration."""
    dist = enumerate_sequence_dist(model, prompt, max_len)
    return float(sum(p * evaluate(oracle, tuple(prompt), y)
                     for y, p in dist.items()))


def total_variation(d1: dict, d2: dict) -> float:
    keys = set(d1) | set(d2)
    return 0.5 * sum(abs(d1.get(k, 0.0) - d2.get(k, 0.0)) for k in keys)
