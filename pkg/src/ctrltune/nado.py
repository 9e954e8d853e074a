"""Learned per-prefix satisfaction heads.

A head maps (prompt, completion-prefix) to an estimate of the probability
that finishing the prefix under the base model satisfies the oracle.  It is
trained with weighted binary cross-entropy against the whole-sequence verdict
broadcast to every prefix — empty through complete — of each training record;
at the optimum (weights equal to base-model sequence probabilities) the head
recovers the exact satisfaction probability.

Two variants: a tabular head with one logit per observed prefix (exactly
representable, defaulting to 0.5 on unseen prefixes) and a windowed neural
head sharing the embedding/tanh architecture of the neural sequence model
with a scalar output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingLabel, ParseError, ShapeMismatch
from .models import OptimizerConfig, OptimizerState, apply_update, sample_completion
from .oracles import Oracle, evaluate, exact_satisfaction_dp
from .seqcore import Corpus, Example, Sequence, Vocabulary, binary_cross_entropy

PrefixKey = tuple[tuple[int, ...], tuple[int, ...]]


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


# --------------------------------------------------------------------------
# variants
# --------------------------------------------------------------------------

class TabularNado:
    """One logit per (prompt, prefix) pair; unseen prefixes predict 0.5."""

    kind = "nado_tabular"

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.logits: dict[PrefixKey, float] = {}

    def predict(self, prompt: tuple[int, ...], prefix: tuple[int, ...]) -> float:
        return _sigmoid(self.logits.get((tuple(prompt), tuple(prefix)), 0.0))

    def clone(self) -> "TabularNado":
        other = TabularNado(self.vocab)
        other.logits = dict(self.logits)
        return other

    def descriptor(self) -> str:
        eos = -1 if self.vocab.eos_index is None else self.vocab.eos_index
        return f"nado_tabular vocab={self.vocab.size} eos={eos} entries={len(self.logits)}"


class WindowNado:
    """Windowed neural head: embeddings of the last ``window`` tokens
    (BOS-padded) through one tanh layer to a scalar satisfaction logit."""

    kind = "nado_window"

    def __init__(self, vocab: Vocabulary, window: int, embed_dim: int, hidden_dim: int,
                 rng: np.random.Generator | None = None, init_scale: float = 0.1):
        self.vocab = vocab
        self.window = window
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        V, d, w, h = vocab.size, embed_dim, window, hidden_dim
        sizes = [(V + 1) * d, w * d * h, h, h, 1]
        total = sum(sizes)
        if rng is not None:
            self.params = rng.normal(0.0, init_scale, size=total)
        else:
            self.params = np.zeros(total)
        self._sizes = sizes

    def _views(self, flat: np.ndarray):
        V, d, w, h = self.vocab.size, self.embed_dim, self.window, self.hidden_dim
        o = np.cumsum([0] + self._sizes)
        E = flat[o[0]:o[1]].reshape(V + 1, d)
        W1 = flat[o[1]:o[2]].reshape(w * d, h)
        b1 = flat[o[2]:o[3]]
        w2 = flat[o[3]:o[4]]
        b2 = flat[o[4]:o[5]]
        return E, W1, b1, w2, b2

    def _key(self, prompt: tuple[int, ...], prefix: tuple[int, ...]) -> tuple[int, ...]:
        full = tuple(prompt) + tuple(prefix)
        if len(full) >= self.window:
            return full[len(full) - self.window:]
        return (self.vocab.bos_index,) * (self.window - len(full)) + full

    def _forward(self, key: tuple[int, ...]):
        E, W1, b1, w2, b2 = self._views(self.params)
        x = E[list(key)].ravel()
        h = np.tanh(x @ W1 + b1)
        score = float(h @ w2 + b2[0])
        return x, h, score

    def predict(self, prompt: tuple[int, ...], prefix: tuple[int, ...]) -> float:
        return _sigmoid(self._forward(self._key(prompt, prefix))[2])

    def add_score_grad(self, key: tuple[int, ...], dscore: float, grad: np.ndarray) -> None:
        x, h, _ = self._forward(key)
        E, W1, b1, w2, b2 = self._views(self.params)
        gE, gW1, gb1, gw2, gb2 = self._views(grad)
        gw2 += dscore * h
        gb2 += dscore
        dh = dscore * w2
        dpre = (1.0 - h * h) * dh
        gW1 += np.outer(x, dpre)
        gb1 += dpre
        dx = W1 @ dpre
        d = self.embed_dim
        for j, tok in enumerate(key):
            gE[tok] += dx[j * d:(j + 1) * d]

    def clone(self) -> "WindowNado":
        other = WindowNado(self.vocab, self.window, self.embed_dim, self.hidden_dim)
        other.params = self.params.copy()
        other._sizes = self._sizes
        return other

    def descriptor(self) -> str:
        eos = -1 if self.vocab.eos_index is None else self.vocab.eos_index
        return (f"nado_window vocab={self.vocab.size} eos={eos} "
                f"window={self.window} embed={self.embed_dim} hidden={self.hidden_dim}")


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def _prefix_instances(batch) -> list[tuple[PrefixKey, float, float]]:
    """(key, weight, label) for every prefix of every example, the verdict
    broadcast from the whole sequence.  Prefixes run from empty to complete.
    """
    out: list[tuple[PrefixKey, float, float]] = []
    for ex in batch:
        if ex.label is None:
            raise MissingLabel(f"example {ex.key} has no oracle label")
        weight = 1.0 if ex.weight is None else ex.weight
        x, y = ex.seq.prompt, ex.seq.completion
        for i in range(len(y) + 1):
            out.append(((x, y[:i]), weight, ex.label))
    return out


def _grouped_instances(batch):
    """Group prefix instances by key: key -> list of (weight, label)."""
    groups: dict[PrefixKey, list[tuple[float, float]]] = {}
    for key, weight, label in _prefix_instances(batch):
        groups.setdefault(key, []).append((weight, label))
    return groups


def _loss_and_grad_grouped(nado, groups):
    loss = 0.0
    if isinstance(nado, TabularNado):
        grad: dict[PrefixKey, float] = {}
        for key, pairs in groups.items():
            p = nado.predict(*key)
            for weight, label in pairs:
                loss += weight * binary_cross_entropy(p, label)
                # d BCE(sigmoid(z), t) / dz = sigmoid(z) - t
                grad[key] = grad.get(key, 0.0) + weight * (p - label)
        return loss, grad
    flat = np.zeros_like(nado.params)
    agg: dict[tuple[int, ...], float] = {}
    preds: dict[tuple[int, ...], float] = {}
    for key, pairs in groups.items():
        feat = nado._key(*key)
        if feat not in preds:
            preds[feat] = _sigmoid(nado._forward(feat)[2])
        p = preds[feat]
        for weight, label in pairs:
            loss += weight * binary_cross_entropy(p, label)
            agg[feat] = agg.get(feat, 0.0) + weight * (p - label)
    for feat, dscore in agg.items():
        nado.add_score_grad(feat, dscore, flat)
    return loss, flat


def nado_loss_and_grad(nado, batch):
    """Weight-summed prefix BCE and its gradient.  The loss is a sum over
    examples, not a mean: enumerated weights are probabilities, so the sum
    estimates an expectation.  The gradient matches the head's layout —
    a key->dlogit dict for tabular heads, a flat array for windowed ones.
    """
    return _loss_and_grad_grouped(nado, _grouped_instances(batch))


def nado_loss(nado, batch) -> float:
    return nado_loss_and_grad(nado, batch)[0]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class NadoTrainConfig:
    epochs: int = 300
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(lr=0.1, moments=True)
    )


def train_nado(nado, corpus: Corpus, cfg: NadoTrainConfig) -> list[float]:
    """Full-batch gradient descent on the prefix loss; returns per-epoch loss.

    Works in place (warm starts are the caller keeping the same head between
    calls).  Optimizer moments are per-call.
    """
    groups = _grouped_instances(corpus)
    if not groups:
        return []
    state = OptimizerState()
    history: list[float] = []
    if isinstance(nado, TabularNado):
        keys = list(groups.keys())
        params = np.array([nado.logits.get(k, 0.0) for k in keys])
        for _ in range(cfg.epochs):
            loss, gdict = _loss_and_grad_grouped(nado, groups)
            history.append(loss)
            grad = np.array([gdict.get(k, 0.0) for k in keys])
            apply_update(params, grad, cfg.optimizer, state)
            for j, key in enumerate(keys):
                nado.logits[key] = float(params[j])
    else:
        for _ in range(cfg.epochs):
            loss, grad = _loss_and_grad_grouped(nado, groups)
            history.append(loss)
            apply_update(nado.params, grad, cfg.optimizer, state)
    return history


# --------------------------------------------------------------------------
# training-set construction
# --------------------------------------------------------------------------

def sample_training_set(model, prompts, n: int, oracle: Oracle,
                        rng: np.random.Generator, max_len: int) -> Corpus:
    """Draw ``n`` completions per prompt, label with the oracle, and merge
    duplicates with weight = multiplicity / n (the empirical frequency), so
    the weighted loss equals the per-prompt Monte Carlo mean."""
    examples: list[Example] = []
    for prompt in prompts:
        prompt = tuple(prompt)
        counts: dict[tuple[int, ...], int] = {}
        for _ in range(n):
            y = sample_completion(model, rng, prompt, max_len)
            counts[y] = counts.get(y, 0) + 1
        for y, c in counts.items():
            examples.append(Example(
                Sequence(prompt, y),
                weight=c / n,
                label=evaluate(oracle, prompt, y),
            ))
    return Corpus(examples)


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------

def max_prefix_error_full(nado, model, oracle: Oracle, prompts, max_len: int) -> float:
    """Worst |prediction - exact satisfaction| over the entire prefix space
    (small alphabets only)."""
    from .models import enumerate_completions

    worst = 0.0
    for prompt in prompts:
        prompt = tuple(prompt)
        seen: set[tuple[int, ...]] = set()
        for y in enumerate_completions(model.vocab, max_len):
            for i in range(len(y) + 1):
                pre = y[:i]
                if pre in seen:
                    continue
                seen.add(pre)
                exact = exact_satisfaction_dp(model, oracle, prompt, pre, max_len)
                worst = max(worst, abs(nado.predict(prompt, pre) - exact))
    return float(worst)


def max_prefix_error_data(nado, model, oracle: Oracle, corpus: Corpus, max_len: int) -> float:
    """Worst |prediction - exact satisfaction| over the corpus's prefixes."""
    worst = 0.0
    seen: set[PrefixKey] = set()
    for ex in corpus:
        x, y = ex.seq.prompt, ex.seq.completion
        for i in range(len(y) + 1):
            key = (x, y[:i])
            if key in seen:
                continue
            seen.add(key)
            exact = exact_satisfaction_dp(model, oracle, x, y[:i], max_len)
            worst = max(worst, abs(nado.predict(x, y[:i]) - exact))
    return float(worst)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_nado_checkpoint(path: str, nado) -> None:
    """Tabular heads store one ``prompt|prefix<TAB>logit`` parameter per line
    (keys are part of the parameterization); windowed heads store plain
    values like model checkpoints."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(nado.descriptor() + "\n")
        if isinstance(nado, TabularNado):
            for (x, pre), logit in sorted(nado.logits.items()):
                xs = " ".join(str(t) for t in x)
                ps = " ".join(str(t) for t in pre)
                fh.write(f"{xs}|{ps}\t{logit:.17g}\n")
        else:
            for v in nado.params:
                fh.write(f"{v:.17g}\n")


def load_nado_checkpoint(path: str, vocab: Vocabulary):
    from .models import _descriptor_fields

    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        body = [line.rstrip("\n") for line in fh if line.strip()]
    try:
        kind, f = _descriptor_fields(header)
    except (ValueError, IndexError):
        raise ParseError(f"bad checkpoint header {header!r}", path) from None
    eos = -1 if vocab.eos_index is None else vocab.eos_index
    if f.get("vocab") != vocab.size or f.get("eos") != eos:
        raise ShapeMismatch(f"{path}: checkpoint vocab/eos does not match")
    if kind == "nado_tabular":
        nado = TabularNado(vocab)
        for line in body:
            keypart, _, value = line.partition("\t")
            xs, _, ps = keypart.partition("|")
            x = tuple(int(t) for t in xs.split()) if xs else ()
            pre = tuple(int(t) for t in ps.split()) if ps else ()
            nado.logits[(x, pre)] = float(value)
        if len(nado.logits) != f.get("entries", len(nado.logits)):
            raise ShapeMismatch(f"{path}: expected {f['entries']} entries")
        return nado
    if kind == "nado_window":
        nado = WindowNado(vocab, f["window"], f["embed"], f["hidden"])
        values = [float(v) for v in body]
        if len(values) != nado.params.size:
            raise ShapeMismatch(f"{path}: expected {nado.params.size} values")
        nado.params[:] = values
        return nado
    raise ParseError(f"unknown checkpoint kind {kind!r}", path)
