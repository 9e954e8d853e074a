"""Fine-tuning losses and the round-based training pipelines.

The regularized objective is the mean (over examples, weighted) of the
next-token cross-entropy plus ``kl_weight`` times the per-position KL from
the *current* model to a fixed reference distribution — normally a
constraint-guided wrap of a frozen snapshot.  The adaptive variant picks the
reference per example through subset rules, so one run can push violating
prompts toward the guide while anchoring general text to the pre-tuning
snapshot.

Pipelines: ``run_sequential`` executes sample -> head-train -> fine-tune in
order every round; ``run_parallel`` runs the three stages concurrently on a
process pool, each consuming the previous round's artifacts (one round of
lag), with a bootstrap first round that only samples and trains the head.
A serialized debug mode replays the exact parallel dataflow in process.
"""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import EmptyAfterFilter, MissingLabel, UnmatchedExample
from .guide import GuideConfig, GuidedModel, NadoSource
from .models import (
    OptimizerConfig,
    OptimizerState,
    apply_update,
    model_from_snapshot,
    sample_completion,
)
from .nado import NadoTrainConfig, TabularNado, sample_training_set, train_nado
from .oracles import Oracle, evaluate
from .seqcore import Corpus, Example, Vocabulary, derive_rng

__all__ = [
    "SubsetRule", "PipelineConfig", "RoundRecord",
    "regularized_loss_and_grad", "adaptive_loss_and_grad", "fine_tune",
    "filter_corpus", "policy_gradient_loss_and_grad", "run_policy_gradient",
    "run_sequential", "run_parallel",
]


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

@dataclass
class SubsetRule:
    """Routes examples to a reference distribution.

    ``ref`` is anything speaking the model protocol (a guided model, a frozen
    snapshot rebuilt as a model, ...) or None for cross-entropy only.
    """

    name: str
    match: Callable[[Example], bool]
    ref: object | None


def _clamped(q: np.ndarray, eps: float) -> np.ndarray:
    qt = np.clip(q, eps, None)
    return qt / qt.sum()


def _ce_kl_loss_and_grad(model, examples, ref_for, kl_weight: float, eps: float):
    grad = np.zeros_like(model.params)
    if not examples:
        return 0.0, grad
    denom = sum(1.0 if ex.weight is None else ex.weight for ex in examples)
    if denom <= 0.0:
        raise ValueError("batch weights sum to zero")
    loss = 0.0
    pending: dict[tuple[int, ...], np.ndarray] = {}
    for ex in examples:
        w = (1.0 if ex.weight is None else ex.weight) / denom
        ref = ref_for(ex)
        x, y = ex.seq.prompt, ex.seq.completion
        for i, target in enumerate(y):
            key = model.context_key(x, y[:i])
            probs = model.probs_from_key(key)
            loss += -w * np.log(probs[target])
            dl = probs.copy()
            dl[target] -= 1.0
            dl *= w
            if ref is not None and kl_weight != 0.0:
                qt = _clamped(ref.probs_from_key(ref.context_key(x, y[:i])), eps)
                diff = np.log(probs) - np.log(qt)
                kl = float(probs @ diff)
                loss += kl_weight * w * kl
                dl += (kl_weight * w) * probs * (diff - kl)
            slot = pending.get(key)
            if slot is None:
                pending[key] = dl
            else:
                slot += dl
    for key, dl in pending.items():
        model.add_logit_grad(key, dl, grad)
    return float(loss), grad


def regularized_loss_and_grad(model, batch, guide, kl_weight: float,
                              eps: float = 1e-7):
    """Weighted-mean cross-entropy plus ``kl_weight`` x per-position
    KL(model || guide) at the batch's prefixes, with its exact gradient."""
    return _ce_kl_loss_and_grad(model, list(batch), lambda ex: guide, kl_weight, eps)


def adaptive_loss_and_grad(model, batch, rules: list[SubsetRule],
                           kl_weight: float, eps: float = 1e-7):
    """Like ``regularized_loss_and_grad`` with a per-example reference chosen
    by subset rules; every example must match exactly one rule."""

    def ref_for(ex: Example):
        hits = [r for r in rules if r.match(ex)]
        if len(hits) != 1:
            names = [r.name for r in hits]
            raise UnmatchedExample(
                f"example {ex.key} matched {len(hits)} rules {names}; need exactly 1")
        return hits[0].ref

    return _ce_kl_loss_and_grad(model, list(batch), ref_for, kl_weight, eps)


def fine_tune(model, corpus, *, epochs: int, optimizer: OptimizerConfig,
              kl_weight: float = 0.0, guide=None, rules=None,
              eps: float = 1e-7) -> list[float]:
    """Full-batch fine-tuning; returns the per-epoch loss history.

    Exactly one of ``guide``/``rules`` may be given; with neither the loss is
    plain cross-entropy.
    """
    if guide is not None and rules is not None:
        raise ValueError("pass either guide or rules, not both")
    state = OptimizerState()
    history: list[float] = []
    examples = list(corpus)
    for _ in range(epochs):
        if rules is not None:
            loss, grad = adaptive_loss_and_grad(model, examples, rules, kl_weight, eps)
        else:
            loss, grad = regularized_loss_and_grad(model, examples, guide, kl_weight, eps)
        history.append(loss)
        apply_update(model.params, grad, optimizer, state)
    return history


def filter_corpus(corpus: Corpus) -> Corpus:
    """Keep examples the oracle approved (label >= 0.5).  The classic
    data-filtering baseline."""
    for ex in corpus:
        if ex.label is None:
            raise MissingLabel(f"example {ex.key} has no label to filter on")
    kept = corpus.subset(lambda ex: ex.label >= 0.5)
    if len(kept) == 0:
        raise EmptyAfterFilter("no example satisfies the constraint")
    return kept


# --------------------------------------------------------------------------
# policy-gradient baseline
# --------------------------------------------------------------------------

def policy_gradient_loss_and_grad(model, prompt, completions, rewards):
    """Score-function surrogate with a batch-mean reward baseline:
    -(1/N) sum_i (r_i - rbar) log p(y_i | x), and its gradient."""
    rewards = np.asarray(rewards, dtype=np.float64)
    n = len(completions)
    baseline = float(rewards.mean())
    grad = np.zeros_like(model.params)
    loss = 0.0
    pending: dict[tuple[int, ...], np.ndarray] = {}
    prompt = tuple(prompt)
    for y, r in zip(completions, rewards):
        coef = (float(r) - baseline) / n
        if coef == 0.0:
            continue
        for i, target in enumerate(y):
            key = model.context_key(prompt, y[:i])
            probs = model.probs_from_key(key)
            loss += -coef * np.log(probs[target])
            dl = probs.copy()
            dl[target] -= 1.0
            dl *= coef
            slot = pending.get(key)
            if slot is None:
                pending[key] = dl
            else:
                slot += dl
    for key, dl in pending.items():
        model.add_logit_grad(key, dl, grad)
    return float(loss), grad


def run_policy_gradient(model, prompts, oracle: Oracle, *, updates: int,
                        samples_per_prompt: int, optimizer: OptimizerConfig,
                        seed: int, max_len: int) -> list[float]:
    """REINFORCE on the oracle verdict; returns mean reward per update."""
    state = OptimizerState()
    history: list[float] = []
    for u in range(updates):
        grad = np.zeros_like(model.params)
        total_reward = 0.0
        for k, prompt in enumerate(prompts):
            rng = derive_rng(seed, "pg", u, k)
            completions = [sample_completion(model, rng, tuple(prompt), max_len)
                           for _ in range(samples_per_prompt)]
            rewards = [evaluate(oracle, tuple(prompt), y) for y in completions]
            _, g = policy_gradient_loss_and_grad(model, prompt, completions, rewards)
            grad += g / len(prompts)
            total_reward += float(np.mean(rewards)) / len(prompts)
        history.append(total_reward)
        apply_update(model.params, grad, optimizer, state)
    return history


# --------------------------------------------------------------------------
# round-based pipelines
# --------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    rounds: int = 5
    samples_per_prompt: int = 32
    max_len: int = 8
    delta: float = 1.0
    kl_weight: float = 5.0
    eps: float = 1e-7
    ft_epochs: int = 1
    ft_optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(lr=0.1, moments=True))
    nado_train: NadoTrainConfig = field(default_factory=NadoTrainConfig)
    seed: int = 0


@dataclass
class RoundRecord:
    index: int
    mode: str
    data_size: int
    timings: dict[str, float]
    wall: float
    consumed: dict[str, str]
    model_fingerprint: str
    nado_history: list[float]
    ft_history: list[float]


def _adopt_head(dst, src) -> None:
    if isinstance(dst, TabularNado):
        dst.logits = dict(src.logits)
    else:
        dst.params[:] = src.params


def run_sequential(model, nado, oracle: Oracle, prompts, cfg: PipelineConfig,
                   on_round=None) -> list[RoundRecord]:
    """In-order rounds: sample from the current model, train the head on that
    fresh data, then fine-tune against a guide built from the current
    snapshot and the freshly trained head.  Mutates model and head.

    ``on_round(model, nado, record, data)`` fires after every round with the
    live objects, e.g. to compute per-round metrics."""
    records: list[RoundRecord] = []
    for i in range(1, cfg.rounds + 1):
        round_start = time.perf_counter()
        source_fp = model.snapshot().fingerprint

        t0 = time.perf_counter()
        data = sample_training_set(model, prompts, cfg.samples_per_prompt,
                                   oracle, derive_rng(cfg.seed, "data", i),
                                   cfg.max_len)
        t_data = time.perf_counter() - t0

        t0 = time.perf_counter()
        nado_history = train_nado(nado, data, cfg.nado_train)
        t_nado = time.perf_counter() - t0

        t0 = time.perf_counter()
        frozen = model_from_snapshot(model.snapshot(), model.vocab)
        guide = GuidedModel(frozen, NadoSource(nado),
                            GuideConfig(delta=cfg.delta, eps=cfg.eps))
        ft_history = fine_tune(model, data, epochs=cfg.ft_epochs,
                               optimizer=cfg.ft_optimizer,
                               kl_weight=cfg.kl_weight, guide=guide,
                               eps=cfg.eps)
        t_finetune = time.perf_counter() - t0

        records.append(RoundRecord(
            index=i, mode="sequential", data_size=len(data),
            timings={"data": t_data, "nado": t_nado, "finetune": t_finetune},
            wall=time.perf_counter() - round_start,
            consumed={
                "data_model": source_fp,
                "nado_data": f"D{i}",
                "guide_base": source_fp,
                "guide_head": f"R{i}",
                "ft_data": f"D{i}",
            },
            model_fingerprint=model.snapshot().fingerprint,
            nado_history=nado_history, ft_history=ft_history,
        ))
        if on_round is not None:
            on_round(model, nado, records[-1], data)
    return records


# ---- parallel stages (top level so the process pool can pickle them) ----

def _stage_sample(snap, vocab: Vocabulary, prompts, n, oracle, max_len,
                  seed, round_idx):
    t0 = time.perf_counter()
    model = model_from_snapshot(snap, vocab)
    corpus = sample_training_set(model, prompts, n, oracle,
                                 derive_rng(seed, "data", round_idx), max_len)
    return corpus, time.perf_counter() - t0


def _stage_train_head(nado, corpus, cfg: NadoTrainConfig):
    t0 = time.perf_counter()
    history = train_nado(nado, corpus, cfg)
    return nado, history, time.perf_counter() - t0


def _stage_finetune(snap, vocab: Vocabulary, head, corpus, cfg: PipelineConfig):
    t0 = time.perf_counter()
    model = model_from_snapshot(snap, vocab)
    frozen = model_from_snapshot(snap, vocab)
    guide = GuidedModel(frozen, NadoSource(head),
                        GuideConfig(delta=cfg.delta, eps=cfg.eps))
    history = fine_tune(model, corpus, epochs=cfg.ft_epochs,
                        optimizer=cfg.ft_optimizer, kl_weight=cfg.kl_weight,
                        guide=guide, eps=cfg.eps)
    return model.snapshot(), history, time.perf_counter() - t0


def run_parallel(model, nado, oracle: Oracle, prompts, cfg: PipelineConfig,
                 serialize_debug: bool = False, on_round=None,
                 ) -> list[RoundRecord]:
    """Pipelined rounds: all three stages run concurrently, each consuming
    the previous round's outputs.  Round 1 bootstraps (no fine-tune): it
    samples from the initial model and trains the head on that sample, so
    round 2 has a dataset and head to consume.

    ``serialize_debug=True`` replays the identical dataflow in process, for
    debugging and determinism checks; outputs are bit-identical to the
    pooled run.  Mutates model and head, like ``run_sequential``.
    """
    mode = "parallel-serialized" if serialize_debug else "parallel"
    records: list[RoundRecord] = []
    pool = None if serialize_debug else ProcessPoolExecutor(max_workers=3)
    try:
        prev_data: Corpus | None = None
        for i in range(1, cfg.rounds + 1):
            round_start = time.perf_counter()
            snap = model.snapshot()
            source_fp = snap.fingerprint

            if i == 1:
                # bootstrap: data then head, chained; fine-tune idles
                if serialize_debug:
                    data, t_data = _stage_sample(
                        snap, model.vocab, prompts, cfg.samples_per_prompt,
                        oracle, cfg.max_len, cfg.seed, i)
                    trained, nado_history, t_nado = _stage_train_head(
                        nado.clone(), data, cfg.nado_train)
                else:
                    data, t_data = pool.submit(
                        _stage_sample, snap, model.vocab, prompts,
                        cfg.samples_per_prompt, oracle, cfg.max_len,
                        cfg.seed, i).result()
                    trained, nado_history, t_nado = pool.submit(
                        _stage_train_head, nado.clone(), data,
                        cfg.nado_train).result()
                _adopt_head(nado, trained)
                prev_data = data
                records.append(RoundRecord(
                    index=i, mode=mode, data_size=len(data),
                    timings={"data": t_data, "nado": t_nado, "finetune": 0.0},
                    wall=time.perf_counter() - round_start,
                    consumed={"data_model": source_fp, "nado_data": f"D{i}",
                              "guide_base": "", "guide_head": "",
                              "ft_data": ""},
                    model_fingerprint=source_fp,
                    nado_history=nado_history, ft_history=[],
                ))
                if on_round is not None:
                    on_round(model, nado, records[-1], data)
                continue

            stale_head = nado.clone()  # R_{i-1}: what fine-tuning sees
            if serialize_debug:
                data, t_data = _stage_sample(
                    snap, model.vocab, prompts, cfg.samples_per_prompt,
                    oracle, cfg.max_len, cfg.seed, i)
                trained, nado_history, t_nado = _stage_train_head(
                    nado.clone(), prev_data, cfg.nado_train)
                ft_snap, ft_history, t_finetune = _stage_finetune(
                    snap, model.vocab, stale_head, prev_data, cfg)
            else:
                fut_data = pool.submit(
                    _stage_sample, snap, model.vocab, prompts,
                    cfg.samples_per_prompt, oracle, cfg.max_len, cfg.seed, i)
                fut_head = pool.submit(
                    _stage_train_head, nado.clone(), prev_data, cfg.nado_train)
                fut_ft = pool.submit(
                    _stage_finetune, snap, model.vocab, stale_head,
                    prev_data, cfg)
                # barrier: a failed stage raises here and aborts the round
                data, t_data = fut_data.result()
                trained, nado_history, t_nado = fut_head.result()
                ft_snap, ft_history, t_finetune = fut_ft.result()

            _adopt_head(nado, trained)
            model.restore(ft_snap)
            records.append(RoundRecord(
                index=i, mode=mode, data_size=len(data),
                timings={"data": t_data, "nado": t_nado,
                         "finetune": t_finetune},
                wall=time.perf_counter() - round_start,
                consumed={"data_model": source_fp,
                          "nado_data": f"D{i-1}",
                          "guide_base": source_fp,
                          "guide_head": f"R{i-1}",
                          "ft_data": f"D{i-1}"},
                model_fingerprint=ft_snap.fingerprint,
                nado_history=nado_history, ft_history=ft_history,
            ))
            if on_round is not None:
                on_round(model, nado, records[-1], data)
            prev_data = data
    finally:
        if pool is not None:
            pool.shutdown()
    return records
