"""Small autoregressive sequence models with exact, hand-derived gradients.

Two families:

* ``TabularARModel`` — order-k contexts, one logit row per reachable context.
* ``WindowNeuralARModel`` — embeddings for the last ``window`` tokens feeding
  one tanh hidden layer and a linear output head.

Both keep every parameter in a single flat float64 vector (``model.params``)
so snapshots, checkpoints, and optimizer state are uniform.  Losses talk to
models through three primitives: ``context_key`` (the model-specific context
of a prefix), ``probs_from_key``, and ``add_logit_grad`` (push a d-loss /
d-logits vector into a flat gradient).  The begin-of-sequence marker is the
reserved index ``vocab.size``.
"""
from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ShapeMismatch
from .seqcore import Categorical, Corpus, Sequence, Vocabulary, sample_categorical, softmax


# --------------------------------------------------------------------------
# parameter snapshots
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ParameterSnapshot:
    """An immutable copy of a model's parameters plus its shape descriptor."""

    descriptor: str
    values: np.ndarray

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256(self.descriptor.encode())
        h.update(self.values.tobytes())
        return h.hexdigest()[:12]


def _descriptor_fields(descriptor: str) -> tuple[str, dict[str, int]]:
    parts = descriptor.split()
    kind, fields = parts[0], {}
    for part in parts[1:]:
        key, _, value = part.partition("=")
        fields[key] = int(value)
    return kind, fields


class _FlatParamModel:
    """Shared flat-parameter behaviour for models and satisfaction heads."""

    params: np.ndarray

    def descriptor(self) -> str:  # pragma: no cover - overridden
        raise NotImplementedError

    @property
    def param_count(self) -> int:
        return self.params.size

    def snapshot(self) -> ParameterSnapshot:
        return ParameterSnapshot(self.descriptor(), self.params.copy())

    def restore(self, snap: ParameterSnapshot) -> None:
        if snap.descriptor != self.descriptor():
            raise ShapeMismatch(
                f"snapshot is {snap.descriptor!r}, model is {self.descriptor()!r}"
            )
        self.params[:] = snap.values

    def set_params(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.params.shape:
            raise ShapeMismatch(
                f"expected {self.params.shape} parameters, got {values.shape}"
            )
        self.params[:] = values


# --------------------------------------------------------------------------
# tabular model
# --------------------------------------------------------------------------

def enumerate_contexts(vocab_size: int, order: int) -> list[tuple[int, ...]]:
    """All left-BOS-padded contexts of length ``order``, in a fixed order."""
    bos = vocab_size
    out: list[tuple[int, ...]] = []
    for m in range(order + 1):
        pad = (bos,) * (order - m)
        for body in itertools.product(range(vocab_size), repeat=m):
            out.append(pad + body)
    return out


class TabularARModel(_FlatParamModel):
    """Order-k model: softmax of a learned logit row per context.

    ``order`` may be zero, which gives a single context (an i.i.d. model).
    """

    kind = "tabular"

    def __init__(self, vocab: Vocabulary, order: int, rng: np.random.Generator | None = None,
                 init_scale: float = 0.0):
        if order < 0:
            raise ValueError("order must be non-negative")
        self.vocab = vocab
        self.order = order
        self.contexts = enumerate_contexts(vocab.size, order)
        self._ctx_index = {c: i for i, c in enumerate(self.contexts)}
        n = len(self.contexts) * vocab.size
        if rng is not None and init_scale > 0.0:
            self.params = rng.normal(0.0, init_scale, size=n)
        else:
            self.params = np.zeros(n)

    # -- constructors -------------------------------------------------------

    @staticmethod
    def iid(vocab: Vocabulary, probs) -> "TabularARModel":
        """An order-0 model emitting every position from ``probs``."""
        return TabularARModel.from_conditional(vocab, 0, {(): np.asarray(probs, float)})

    @staticmethod
    def from_conditional(vocab: Vocabulary, order: int,
                         table: dict[tuple[int, ...], np.ndarray],
                         floor: float = 1e-18) -> "TabularARModel":
        """Build from conditional probability rows; contexts not listed fall
        back to uniform.  Zero probabilities are floored (softmax cannot
        represent exact zeros)."""
        model = TabularARModel(vocab, order)
        logits = model.logits
        for i, ctx in enumerate(model.contexts):
            row = table.get(ctx)
            if row is None:
                continue
            p = np.clip(np.asarray(row, dtype=np.float64), floor, None)
            logits[i] = np.log(p)
        return model

    # -- core ---------------------------------------------------------------

    @property
    def logits(self) -> np.ndarray:
        return self.params.reshape(len(self.contexts), self.vocab.size)

    def context_key(self, prompt: tuple[int, ...], prefix: tuple[int, ...]) -> tuple[int, ...]:
        full = prompt + prefix
        if len(full) >= self.order:
            return full[len(full) - self.order:]
        return (self.vocab.bos_index,) * (self.order - len(full)) + full

    def probs_from_key(self, key: tuple[int, ...]) -> np.ndarray:
        return softmax(self.logits[self._ctx_index[key]])

    def add_logit_grad(self, key: tuple[int, ...], dlogits: np.ndarray, grad: np.ndarray) -> None:
        row = self._ctx_index[key]
        V = self.vocab.size
        grad[row * V:(row + 1) * V] += dlogits

    def next_dist(self, prompt: tuple[int, ...], prefix: tuple[int, ...] = ()) -> Categorical:
        return Categorical(self.probs_from_key(self.context_key(prompt, prefix)))

    def descriptor(self) -> str:
        eos = -1 if self.vocab.eos_index is None else self.vocab.eos_index
        return f"tabular vocab={self.vocab.size} eos={eos} order={self.order}"

    def clone(self) -> "TabularARModel":
        other = TabularARModel(self.vocab, self.order)
        other.params[:] = self.params
        return other


# --------------------------------------------------------------------------
# windowed neural model
# --------------------------------------------------------------------------

class WindowNeuralARModel(_FlatParamModel):
    """Embeds the last ``window`` tokens (BOS-padded), concatenates, applies
    one tanh layer, and maps linearly to vocabulary logits."""

    kind = "window_neural"

    def __init__(self, vocab: Vocabulary, window: int, embed_dim: int, hidden_dim: int,
                 rng: np.random.Generator | None = None, init_scale: float = 0.1):
        if window < 1:
            raise ValueError("window must be positive")
        self.vocab = vocab
        self.window = window
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        V, d, w, h = vocab.size, embed_dim, window, hidden_dim
        sizes = [(V + 1) * d, w * d * h, h, h * V, V]
        total = sum(sizes)
        if rng is not None:
            self.params = rng.normal(0.0, init_scale, size=total)
        else:
            self.params = np.zeros(total)
        self._sizes = sizes

    def _views(self, flat: np.ndarray):
        V, d, w, h = self.vocab.size, self.embed_dim, self.window, self.hidden_dim
        s = self._sizes
        o = np.cumsum([0] + s)
        E = flat[o[0]:o[1]].reshape(V + 1, d)
        W1 = flat[o[1]:o[2]].reshape(w * d, h)
        b1 = flat[o[2]:o[3]]
        W2 = flat[o[3]:o[4]].reshape(h, V)
        b2 = flat[o[4]:o[5]]
        return E, W1, b1, W2, b2

    def context_key(self, prompt: tuple[int, ...], prefix: tuple[int, ...]) -> tuple[int, ...]:
        full = prompt + prefix
        if len(full) >= self.window:
            return full[len(full) - self.window:]
        return (self.vocab.bos_index,) * (self.window - len(full)) + full

    def _forward(self, key: tuple[int, ...]):
        E, W1, b1, W2, b2 = self._views(self.params)
        x = E[list(key)].ravel()
        h = np.tanh(x @ W1 + b1)
        logits = h @ W2 + b2
        return x, h, logits

    def probs_from_key(self, key: tuple[int, ...]) -> np.ndarray:
        return softmax(self._forward(key)[2])

    def add_logit_grad(self, key: tuple[int, ...], dlogits: np.ndarray, grad: np.ndarray) -> None:
        x, h, _ = self._forward(key)
        E, W1, b1, W2, b2 = self._views(self.params)
        gE, gW1, gb1, gW2, gb2 = self._views(grad)
        gW2 += np.outer(h, dlogits)
        gb2 += dlogits
        dh = W2 @ dlogits
        dpre = (1.0 - h * h) * dh
        gW1 += np.outer(x, dpre)
        gb1 += dpre
        dx = W1 @ dpre
        d = self.embed_dim
        for j, tok in enumerate(key):
            gE[tok] += dx[j * d:(j + 1) * d]

    def next_dist(self, prompt: tuple[int, ...], prefix: tuple[int, ...] = ()) -> Categorical:
        return Categorical(self.probs_from_key(self.context_key(prompt, prefix)))

    def descriptor(self) -> str:
        eos = -1 if self.vocab.eos_index is None else self.vocab.eos_index
        return (f"window_neural vocab={self.vocab.size} eos={eos} "
                f"window={self.window} embed={self.embed_dim} hidden={self.hidden_dim}")

    def clone(self) -> "WindowNeuralARModel":
        other = WindowNeuralARModel(self.vocab, self.window, self.embed_dim, self.hidden_dim)
        other.params[:] = self.params
        return other


# --------------------------------------------------------------------------
# shared sequence operations
# --------------------------------------------------------------------------

def sequence_logprob(model, seq: Sequence) -> float:
    """Log-probability (nats) of the completion given the prompt.

    Returns ``-inf`` for impossible completions (guided decoders assign
    exact zeros to constraint-violating tokens).
    """
    total = 0.0
    for i, target in enumerate(seq.completion):
        probs = model.probs_from_key(model.context_key(seq.prompt, seq.completion[:i]))
        if probs[target] <= 0.0:
            return -math.inf
        total += math.log(probs[target])
    return total


def sample_completion(model, rng: np.random.Generator, prompt: tuple[int, ...],
                      max_len: int) -> tuple[int, ...]:
    """Ancestral sampling until the end-of-sequence token or ``max_len``."""
    eos = model.vocab.eos_index
    out: list[int] = []
    while len(out) < max_len:
        probs = model.probs_from_key(model.context_key(prompt, tuple(out)))
        tok = sample_categorical(rng, probs)
        out.append(tok)
        if eos is not None and tok == eos:
            break
    return tuple(out)


def enumerate_completions(vocab: Vocabulary, max_len: int):
    """Every completion the sampler could produce, in lexicographic order.

    Without an end-of-sequence token these are the length-``max_len`` strings;
    with one, also every shorter string terminated by it (and no token may
    follow it).
    """
    eos = vocab.eos_index
    if eos is None:
        yield from itertools.product(range(vocab.size), repeat=max_len)
        return
    body = [v for v in range(vocab.size) if v != eos]
    for m in range(max_len):
        for mid in itertools.product(body, repeat=m):
            yield mid + (eos,)
    for mid in itertools.product(body, repeat=max_len - 1):
        for last in body:
            yield mid + (last,)


def enumerate_sequence_dist(model, prompt: tuple[int, ...], max_len: int
                            ) -> dict[tuple[int, ...], float]:
    """Exact completion distribution by enumeration (small alphabets only)."""
    dist: dict[tuple[int, ...], float] = {}
    for completion in enumerate_completions(model.vocab, max_len):
        dist[completion] = math.exp(sequence_logprob(model, Sequence(prompt, completion)))
    return dist


def lm_loss_and_grad(model, batch: Corpus | list) -> tuple[float, np.ndarray]:
    """Mean (over examples) summed next-token cross-entropy, with its exact
    gradient in flat parameter space."""
    examples = list(batch)
    grad = np.zeros_like(model.params)
    if not examples:
        return 0.0, grad
    scale = 1.0 / len(examples)
    loss = 0.0
    # aggregate d-loss/d-logits per distinct context so each context does a
    # single forward/backward pass
    pending: dict[tuple[int, ...], np.ndarray] = {}
    for ex in examples:
        seq = ex.seq if hasattr(ex, "seq") else ex
        for i, target in enumerate(seq.completion):
            key = model.context_key(seq.prompt, seq.completion[:i])
            probs = model.probs_from_key(key)
            loss -= math.log(probs[target]) * scale
            d = probs * scale
            d[target] -= scale
            if key in pending:
                pending[key] += d
            else:
                pending[key] = d
    for key, d in pending.items():
        model.add_logit_grad(key, d, grad)
    return loss, grad


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    """Gradient descent with optional decoupled weight decay and optional
    first/second-moment accumulators (Adam-style bias correction)."""

    lr: float
    weight_decay: float = 0.0
    moments: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def apply_update(params: np.ndarray, grad: np.ndarray, cfg: OptimizerConfig,
                 state: OptimizerState | None = None) -> None:
    """One in-place update of ``params``.

    Decay is decoupled (applied to the parameters before the gradient step),
    so it never enters the moment accumulators.
    """
    if params.shape != grad.shape:
        raise ShapeMismatch(f"grad shape {grad.shape} != params {params.shape}")
    if cfg.weight_decay:
        params *= 1.0 - cfg.lr * cfg.weight_decay
    if not cfg.moments:
        params -= cfg.lr * grad
        return
    if state is None:
        raise ValueError("moment-based updates need an OptimizerState")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.step += 1
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    mhat = state.m / (1.0 - cfg.beta1 ** state.step)
    vhat = state.v / (1.0 - cfg.beta2 ** state.step)
    params -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path: str, model) -> None:
    """Text checkpoint: shape-descriptor header, one value per line
    (17 significant digits, enough to round-trip float64 exactly)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model.descriptor() + "\n")
        for v in model.params:
            fh.write(f"{v:.17g}\n")


def load_checkpoint(path: str, vocab: Vocabulary):
    """Rebuild a model from a checkpoint, validating it against ``vocab``."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        values = [float(line) for line in fh if line.strip()]
    model = _model_from_descriptor(header, vocab, path)
    if len(values) != model.param_count:
        raise ShapeMismatch(
            f"{path}: expected {model.param_count} values, found {len(values)}"
        )
    model.params[:] = values
    return model


def _model_from_descriptor(descriptor: str, vocab: Vocabulary, path: str = "<snapshot>"):
    try:
        kind, f = _descriptor_fields(descriptor)
    except (ValueError, IndexError):
        raise ParseError(f"bad checkpoint header {descriptor!r}", path) from None
    eos = -1 if vocab.eos_index is None else vocab.eos_index
    if f.get("vocab") != vocab.size or f.get("eos") != eos:
        raise ShapeMismatch(
            f"{path}: checkpoint was written for vocab={f.get('vocab')} "
            f"eos={f.get('eos')}, have vocab={vocab.size} eos={eos}"
        )
    if kind == "tabular":
        return TabularARModel(vocab, f["order"])
    if kind == "window_neural":
        return WindowNeuralARModel(vocab, f["window"], f["embed"], f["hidden"])
    raise ParseError(f"unknown checkpoint kind {kind!r}", path)


def model_from_snapshot(snap: ParameterSnapshot, vocab: Vocabulary):
    model = _model_from_descriptor(snap.descriptor, vocab)
    model.restore(snap)
    return model
