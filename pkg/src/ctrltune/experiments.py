"""Benchmark scenarios and the experiment driver.

Three synthetic task families:

* ``detox``          — a pretrained model whose training mix contains a
                       fixed fraction of constraint-violating sequences;
                       methods must suppress the banned token while staying
                       close to the data distribution.
* ``classification`` — fine-tuning on a balanced answer task whose inputs
                       often contain the banned token; the tension is
                       between task accuracy and generation hygiene.
* ``mixed``          — two prompt families, one constrained and one that
                       must not drift; exercises per-subset references.

Two size presets ship: ``desk`` is the working scale (12 content tokens
plus an end marker, length-8 completions) where violation rates come from
the dynamic program and guided-model metrics fall back to seeded Monte
Carlo; ``verify`` is the reduced scale (4 tokens, length 5) where every
reported number — violation, drift, reference distribution — is computed
by exact enumeration.

``run_experiment`` dispatches a method on a scenario with matched update
budgets (``rounds x ft_epochs`` model updates for every weight-updating
method), writes metrics/checkpoints/manifest to a directory, and returns
the results in memory.  Everything is seeded; reruns are byte-identical
apart from wall-clock timing columns.
"""
from __future__ import annotations

import math
import os
import string
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import write_manifest
from .evaluation import (
    MetricsRow,
    classification_accuracy,
    kl_drift,
    perplexity,
    violation_rate,
    write_metrics_csv,
)
from .guide import ExactSource, GuideConfig, GuidedModel, NadoSource
from .models import (
    OptimizerConfig,
    TabularARModel,
    enumerate_contexts,
    model_from_snapshot,
    sample_completion,
    save_checkpoint,
)
from .nado import (
    NadoTrainConfig,
    TabularNado,
    max_prefix_error_data,
    sample_training_set,
    save_nado_checkpoint,
    train_nado,
)
from .oracles import Oracle, evaluate, label_corpus, write_oracle_file
from .seqcore import (
    Corpus,
    Example,
    Sequence,
    Vocabulary,
    derive_rng,
    save_vocab,
)
from .training import (
    PipelineConfig,
    SubsetRule,
    filter_corpus,
    fine_tune,
    run_parallel,
    run_policy_gradient,
    run_sequential,
)

__all__ = [
    "Profile", "PROFILES", "Scenario", "build_scenario", "SCENARIOS",
    "SynthResult", "synth_corpus",
    "ExperimentResult", "run_experiment", "available_methods",
    "sweep_lambda", "compare_methods", "LAMBDA_GRID", "COMPARE_METHODS",
]

EOS_TOKEN = "</s>"
MC_EVAL_SAMPLES = 4096


# --------------------------------------------------------------------------
# profiles
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Profile:
    """Size knobs shared by the scenarios.

    ``content_tokens`` counts ordinary tokens including the banned one;
    the end marker (when present) and the classification template tokens
    come on top.  ``window``/``embed_dim``/``hidden_dim`` size the neural
    options."""

    name: str
    content_tokens: int
    use_eos: bool
    order: int
    max_len: int
    rounds: int
    samples_per_prompt: int
    corpus_size: int
    pretrain_epochs: int
    nado_epochs: int
    ft_epochs: int
    ft_lr: float
    rl_lr: float
    kl_weight: float
    adaptive_kl_weight: float
    window: int = 3
    embed_dim: int = 8
    hidden_dim: int = 16


PROFILES = {
    "desk": Profile("desk", content_tokens=12, use_eos=True, order=2,
                    max_len=8, rounds=3, samples_per_prompt=64,
                    corpus_size=120, pretrain_epochs=120, nado_epochs=150,
                    ft_epochs=2, ft_lr=0.1, rl_lr=0.12, kl_weight=5.0,
                    adaptive_kl_weight=10.0),
    "verify": Profile("verify", content_tokens=4, use_eos=False, order=2,
                      max_len=5, rounds=5, samples_per_prompt=256,
                      corpus_size=300, pretrain_epochs=150, nado_epochs=300,
                      ft_epochs=2, ft_lr=0.1, rl_lr=0.12, kl_weight=5.0,
                      adaptive_kl_weight=10.0),
}

#: Letters used for ordinary (non-banned, non-template) tokens.
_LETTERS = [c for c in string.ascii_lowercase if c not in "xqyn"]


def _content_names(profile: Profile) -> list[str]:
    """The ordinary tokens: single letters, with ``x`` as the banned one."""
    return _LETTERS[:profile.content_tokens - 1] + ["x"]


def _make_vocab(profile: Profile, extra: tuple[str, ...] = ()) -> Vocabulary:
    names = _content_names(profile) + list(extra)
    if profile.use_eos:
        names.append(EOS_TOKEN)
        return Vocabulary(tuple(names), eos=EOS_TOKEN)
    return Vocabulary(tuple(names))


# --------------------------------------------------------------------------
# scenarios
# --------------------------------------------------------------------------

@dataclass
class Scenario:
    name: str
    profile: Profile
    seed: int
    vocab: Vocabulary
    model: TabularARModel          # the pretrained starting point; never mutated
    oracle: Oracle
    prompts: list[tuple[int, ...]]
    train_corpus: Corpus
    heldout: Corpus
    max_len: int
    toxic_index: int
    yes_index: int | None = None
    no_index: int | None = None
    task_heldout: Corpus | None = None
    constrained_prompts: list[tuple[int, ...]] | None = None
    general_prompts: list[tuple[int, ...]] | None = None
    general_heldout: Corpus | None = None


def _copy_model(model: TabularARModel) -> TabularARModel:
    return model_from_snapshot(model.snapshot(), model.vocab)


def _dedup_pairs(pairs, tag=None) -> list[Example]:
    """Merge duplicate (prompt, completion) draws into frequency-weighted
    records so the corpus survives a save/load round trip unchanged."""
    counts: dict[tuple[tuple[int, ...], tuple[int, ...]], int] = {}
    for pair in pairs:
        counts[pair] = counts.get(pair, 0) + 1
    total = len(pairs)
    return [Example(Sequence(p, y), weight=c / total, tag=tag)
            for (p, y), c in counts.items()]


def _dedup_weighted(completions, prompt=(), tag=None) -> list[Example]:
    prompt = tuple(prompt)
    return _dedup_pairs([(prompt, y) for y in completions], tag=tag)


def _seeded_conditional(vocab: Vocabulary, order: int, toxic: int,
                        rng: np.random.Generator,
                        toxic_range=(0.06, 0.16),
                        eos_rate: float = 0.10) -> TabularARModel:
    """A generator with smooth random conditionals, a moderate per-context
    probability of the banned token, and (when the vocabulary has an end
    marker) a fixed chance of stopping."""
    eos = vocab.eos_index
    special = {toxic} | ({eos} if eos is not None else set())
    others = [v for v in range(vocab.size) if v not in special]
    table = {}
    for ctx in enumerate_contexts(vocab.size, order):
        x_rate = float(rng.uniform(*toxic_range))
        stop = eos_rate if eos is not None else 0.0
        body = rng.dirichlet(np.full(len(others), 4.0)) * (1.0 - x_rate - stop)
        row = np.zeros(vocab.size)
        for slot, v in enumerate(others):
            row[v] = body[slot]
        row[toxic] = x_rate
        if eos is not None:
            row[eos] = stop
        table[ctx] = row
    return TabularARModel.from_conditional(vocab, order, table)


def _bucketed_pairs(draw, oracle: Oracle, size: int,
                    violating_fraction: float) -> list[tuple]:
    """Draw (prompt, completion) pairs until exactly the requested count of
    violating records is collected (kept in the draw order)."""
    want_bad = round(size * violating_fraction)
    want_good = size - want_bad
    n_bad = n_good = 0
    kept: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
    for _ in range(500 * size):
        if n_bad == want_bad and n_good == want_good:
            break
        prompt, y = draw()
        violates = evaluate(oracle, prompt, y) < 0.5
        if violates and n_bad < want_bad:
            kept.append((prompt, y))
            n_bad += 1
        elif not violates and n_good < want_good:
            kept.append((prompt, y))
            n_good += 1
    else:
        raise RuntimeError("generator too skewed to fill the requested mix")
    return kept


def _exact_fraction_corpus(generator, oracle: Oracle, size: int,
                           violating_fraction: float,
                           rng: np.random.Generator, max_len: int) -> Corpus:
    """Sample until the corpus holds exactly the requested share of
    violating sequences (drawn in the generator's natural order)."""
    def draw():
        return (), sample_completion(generator, rng, (), max_len)

    return Corpus(_dedup_pairs(_bucketed_pairs(draw, oracle, size,
                                               violating_fraction)))


def _pretrain(vocab: Vocabulary, order: int, corpus: Corpus,
              profile: Profile, seed: int) -> TabularARModel:
    model = TabularARModel(vocab, order, rng=derive_rng(seed, "init"),
                           init_scale=0.01)
    fine_tune(model, corpus, epochs=profile.pretrain_epochs,
              optimizer=OptimizerConfig(lr=0.1, moments=True))
    return model


def build_detox(profile: Profile, seed: int) -> Scenario:
    vocab = _make_vocab(profile)
    toxic = vocab.index("x")
    oracle = Oracle.forbid((toxic,))
    generator = _seeded_conditional(vocab, 1, toxic, derive_rng(seed, "generator"))
    train = _exact_fraction_corpus(generator, oracle, profile.corpus_size, 0.30,
                                   derive_rng(seed, "train"), profile.max_len)
    heldout = _exact_fraction_corpus(generator, oracle, profile.corpus_size, 0.30,
                                     derive_rng(seed, "heldout"), profile.max_len)
    model = _pretrain(vocab, profile.order, train, profile, seed)
    return Scenario(
        name="detox", profile=profile, seed=seed, vocab=vocab, model=model,
        oracle=oracle, prompts=[()], train_corpus=train, heldout=heldout,
        max_len=profile.max_len, toxic_index=toxic,
    )


def _classification_corpus(size: int, comment_len: int, comment_choices,
                           toxic: int, q: int, yes: int, no: int,
                           rng: np.random.Generator,
                           has_x_for=None) -> list[tuple[int, ...]]:
    """Comment, question mark, answer; by default half the comments carry
    the banned token (alternating), and the correct answer reports whether
    one is present.  ``has_x_for(i)`` overrides the planting pattern."""
    choices = np.asarray(comment_choices)
    out = []
    for i in range(size):
        comment = list(choices[rng.integers(0, len(choices), size=comment_len)])
        has_x = i % 2 == 0 if has_x_for is None else has_x_for(i)
        if has_x:
            comment[int(rng.integers(comment_len))] = toxic
        answer = yes if has_x else no
        out.append((*(int(t) for t in comment), q, answer))
    return out


def _classification_base(vocab: Vocabulary, order: int, toxic: int,
                         q: int, yes: int, no: int,
                         rng: np.random.Generator) -> TabularARModel:
    """The pre-fine-tuning model: a comment process that occasionally emits
    the banned token or the question mark, and answers questions with an
    exactly even split — so it carries no answer signal of its own."""
    comment = [v for v in range(vocab.size)
               if v not in (toxic, q, yes, no, vocab.eos_index)]
    table = {}
    for ctx in enumerate_contexts(vocab.size, order):
        row = np.zeros(vocab.size)
        last = ctx[-1]
        if last == q:
            row[yes] = row[no] = 0.5
        elif last in (yes, no):
            row[comment] = 1.0 / len(comment)
        else:
            x_rate = float(rng.uniform(0.05, 0.12))
            q_rate = 0.12
            body = rng.dirichlet(np.full(len(comment), 4.0))
            row[comment] = body * (1.0 - x_rate - q_rate)
            row[toxic] = x_rate
            row[q] = q_rate
        table[ctx] = row
    return TabularARModel.from_conditional(vocab, order, table)


def build_classification(profile: Profile, seed: int) -> Scenario:
    vocab = _make_vocab(profile, extra=("q", "y", "n"))
    toxic = vocab.index("x")
    q, yes, no = vocab.index("q"), vocab.index("y"), vocab.index("n")
    oracle = Oracle.forbid((toxic,))
    comment_len = profile.max_len - 2
    order = profile.order + 1  # the answer context must reach into the comment
    model = _classification_base(vocab, order, toxic, q, yes, no,
                                 derive_rng(seed, "base"))
    comment_choices = [v for v in range(vocab.size)
                       if v not in (toxic, q, yes, no, vocab.eos_index)]
    task = Corpus(_dedup_weighted(_classification_corpus(
        profile.corpus_size, comment_len, comment_choices, toxic, q, yes, no,
        rng=derive_rng(seed, "task"))))
    task_heldout = Corpus(_dedup_weighted(_classification_corpus(
        profile.corpus_size, comment_len, comment_choices, toxic, q, yes, no,
        rng=derive_rng(seed, "task-heldout"))))
    # accuracy is asked with the question as the prompt and the answer as
    # the completion
    split = Corpus([
        Example(Sequence(ex.seq.completion[:-1], ex.seq.completion[-1:]),
                weight=ex.weight)
        for ex in task_heldout
    ])
    return Scenario(
        name="classification", profile=profile, seed=seed, vocab=vocab,
        model=model, oracle=oracle, prompts=[()], train_corpus=task,
        heldout=task_heldout, max_len=profile.max_len, toxic_index=toxic,
        yes_index=yes, no_index=no, task_heldout=split,
    )


def build_mixed(profile: Profile, seed: int) -> Scenario:
    vocab = _make_vocab(profile)
    toxic = vocab.index("x")
    oracle = Oracle.forbid((toxic,))
    model = _seeded_conditional(vocab, profile.order, toxic,
                                derive_rng(seed, "base"))
    constrained, general = (0,), (1,)
    half = profile.corpus_size // 2
    examples: list[Example] = []
    for prompt, tag, stream in ((constrained, "constrained", "ctrain"),
                                (general, "general", "gtrain")):
        rng = derive_rng(seed, stream)
        draws = [sample_completion(model, rng, prompt, profile.max_len)
                 for _ in range(half)]
        examples.extend(_dedup_weighted(draws, prompt=prompt, tag=tag))
    rng = derive_rng(seed, "gheld")
    gheld = Corpus(_dedup_weighted(
        [sample_completion(model, rng, general, profile.max_len)
         for _ in range(half)], prompt=general))
    return Scenario(
        name="mixed", profile=profile, seed=seed, vocab=vocab, model=model,
        oracle=oracle, prompts=[constrained, general],
        train_corpus=Corpus(examples), heldout=gheld,
        max_len=profile.max_len, toxic_index=toxic,
        constrained_prompts=[constrained], general_prompts=[general],
        general_heldout=gheld,
    )


SCENARIOS = {
    "detox": build_detox,
    "classification": build_classification,
    "mixed": build_mixed,
}


def build_scenario(name: str, profile: str | Profile, seed: int) -> Scenario:
    if isinstance(profile, str):
        profile = PROFILES[profile]
    try:
        builder = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; "
                         f"pick from {sorted(SCENARIOS)}") from None
    return builder(profile, seed)


# --------------------------------------------------------------------------
# corpus synthesis
# --------------------------------------------------------------------------

@dataclass
class SynthResult:
    vocab: Vocabulary
    generator: TabularARModel
    oracle: Oracle
    corpus: Corpus
    realized_fraction: float
    records: list[str] | None = None


def _draw_clean_prompt(generator, rng: np.random.Generator,
                       prompt_len: int) -> tuple[int, ...]:
    """A full-length prompt with no early stop (rejection sampled)."""
    eos = generator.vocab.eos_index
    for _ in range(1000):
        p = sample_completion(generator, rng, (), prompt_len)
        if len(p) == prompt_len and (eos is None or eos not in p):
            return p
    raise RuntimeError("could not draw a full-length prompt")


def _render_text_record(vocab: Vocabulary, rec: tuple[int, ...],
                        q: int) -> str:
    comment = " ".join(vocab.tokens[t] for t in rec[:rec.index(q)])
    verdict = "yes" if vocab.tokens[rec[-1]] == "y" else "no"
    return f"comment: {comment} | contains banned token? {verdict}"


def _realized_fraction(corpus: Corpus, oracle: Oracle) -> float:
    total = sum(ex.weight for ex in corpus)
    bad = sum(ex.weight for ex in corpus
              if evaluate(oracle, ex.seq.prompt, ex.seq.completion) < 0.5)
    return bad / total


def synth_corpus(profile: str | Profile, seed: int, *, size: int | None = None,
                 violating_fraction: float = 0.30, prompt_len: int = 0,
                 completion_len: int | None = None,
                 scenario: str = "detox") -> SynthResult:
    """Generate a seeded synthetic corpus plus the generator that drew it.

    ``detox`` samples free text from a smooth random generator and buckets
    draws until exactly the requested share violates; ``classification``
    emits comment/question/answer records (the banned token planted in the
    requested share of comments) and renders each one as templated text.
    """
    if isinstance(profile, str):
        profile = PROFILES[profile]
    if not 0.0 <= violating_fraction <= 1.0:
        raise ValueError("violating fraction must lie in [0, 1]")
    size = profile.corpus_size if size is None else size
    completion_len = profile.max_len if completion_len is None else completion_len

    if scenario == "classification":
        vocab = _make_vocab(profile, extra=("q", "y", "n"))
        toxic = vocab.index("x")
        q, yes, no = vocab.index("q"), vocab.index("y"), vocab.index("n")
        oracle = Oracle.forbid((toxic,))
        generator = _classification_base(vocab, profile.order + 1, toxic,
                                         q, yes, no,
                                         derive_rng(seed, "generator"))
        choices = [v for v in range(vocab.size)
                   if v not in (toxic, q, yes, no, vocab.eos_index)]
        want = round(size * violating_fraction)
        # spread the planted records evenly across the corpus
        def has_x_for(i, want=want, size=size):
            return (i + 1) * want // size != i * want // size
        recs = _classification_corpus(size, max(completion_len - 2, 1),
                                      choices, toxic, q, yes, no,
                                      derive_rng(seed, "corpus"), has_x_for)
        corpus = Corpus(_dedup_weighted(recs))
        records = [_render_text_record(vocab, r, q) for r in recs]
        return SynthResult(vocab, generator, oracle, corpus,
                           _realized_fraction(corpus, oracle), records)

    if scenario != "detox":
        raise ValueError(f"unknown synthesis family {scenario!r}; "
                         f"pick from ['classification', 'detox']")
    vocab = _make_vocab(profile)
    toxic = vocab.index("x")
    oracle = Oracle.forbid((toxic,))
    generator = _seeded_conditional(vocab, 1, toxic,
                                    derive_rng(seed, "generator"))
    rng = derive_rng(seed, "corpus")

    def draw():
        prompt = _draw_clean_prompt(generator, rng, prompt_len) \
            if prompt_len else ()
        return prompt, sample_completion(generator, rng, prompt,
                                         completion_len)

    corpus = Corpus(_dedup_pairs(_bucketed_pairs(draw, oracle, size,
                                                 violating_fraction)))
    return SynthResult(vocab, generator, oracle, corpus,
                       _realized_fraction(corpus, oracle))


# --------------------------------------------------------------------------
# experiment driver
# --------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    scenario: str
    method: str
    rows: list[MetricsRow]
    violation: float
    perplexity: float
    kl_drift: float
    accuracy: float | None = None
    extras: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    model: object | None = None
    head: object | None = None


def _budget(profile: Profile) -> int:
    return profile.rounds * profile.ft_epochs


def _ft_optimizer(profile: Profile) -> OptimizerConfig:
    return OptimizerConfig(lr=profile.ft_lr, moments=True)


def _scenario_metrics(scenario: Scenario, model_like,
                      tag: int | str) -> tuple[float, float, float]:
    """Violation / perplexity / drift triple; exact wherever the scale
    allows, seeded Monte Carlo beyond that (``tag`` keeps the draws for
    different rounds independent but reproducible)."""
    rng = derive_rng(scenario.seed, "eval", str(tag))
    violation = violation_rate(model_like, scenario.oracle,
                               _violation_prompts(scenario), scenario.max_len,
                               rng=rng, samples=MC_EVAL_SAMPLES)
    ppl = perplexity(model_like, _ppl_corpus(scenario))
    drift = kl_drift(model_like, scenario.model, _drift_prompts(scenario),
                     scenario.max_len, rng=rng, samples=MC_EVAL_SAMPLES)
    return violation, ppl, drift


def _violation_prompts(scenario: Scenario):
    return scenario.constrained_prompts or scenario.prompts


def _drift_prompts(scenario: Scenario):
    return scenario.general_prompts or scenario.prompts


def _ppl_corpus(scenario: Scenario) -> Corpus:
    return scenario.general_heldout or scenario.heldout


def _one_row(scenario: Scenario, model_like, round_idx: int, *, t_data=0.0,
             t_nado=0.0, t_finetune=0.0, head_err=math.nan) -> MetricsRow:
    violation, ppl, drift = _scenario_metrics(scenario, model_like, round_idx)
    return MetricsRow(round_idx, t_data, t_nado, t_finetune, violation, ppl,
                      drift, head_err)


def _finish(scenario: Scenario, method: str, rows, model_like, *,
            head=None, records=(), extras=None) -> ExperimentResult:
    violation, ppl, drift = _scenario_metrics(scenario, model_like, "final")
    accuracy = None
    if scenario.task_heldout is not None:
        accuracy = classification_accuracy(
            model_like, scenario.task_heldout,
            scenario.yes_index, scenario.no_index)
    return ExperimentResult(
        scenario=scenario.name, method=method, rows=list(rows),
        violation=violation, perplexity=ppl, kl_drift=drift,
        accuracy=accuracy, extras=extras or {}, records=list(records),
        model=model_like, head=head)


def _run_plain(scenario: Scenario, seed: int, **_) -> ExperimentResult:
    model = _copy_model(scenario.model)
    t0 = time.perf_counter()
    fine_tune(model, scenario.train_corpus, epochs=_budget(scenario.profile),
              optimizer=_ft_optimizer(scenario.profile))
    t_ft = time.perf_counter() - t0
    rows = [_one_row(scenario, model, _budget(scenario.profile), t_finetune=t_ft)]
    return _finish(scenario, "plain", rows, model)


def _run_filter(scenario: Scenario, seed: int, **_) -> ExperimentResult:
    model = _copy_model(scenario.model)
    labeled = label_corpus(scenario.train_corpus, scenario.oracle)
    kept = filter_corpus(labeled)
    t0 = time.perf_counter()
    fine_tune(model, kept, epochs=_budget(scenario.profile),
              optimizer=_ft_optimizer(scenario.profile))
    t_ft = time.perf_counter() - t0
    rows = [_one_row(scenario, model, _budget(scenario.profile), t_finetune=t_ft)]
    return _finish(scenario, "filter", rows, model,
                   extras={"kept": len(kept)})


def _run_rl(scenario: Scenario, seed: int, **_) -> ExperimentResult:
    profile = scenario.profile
    model = _copy_model(scenario.model)
    t0 = time.perf_counter()
    history = run_policy_gradient(
        model, scenario.prompts, scenario.oracle, updates=_budget(profile),
        samples_per_prompt=profile.samples_per_prompt,
        optimizer=OptimizerConfig(lr=profile.rl_lr, moments=True),
        seed=seed, max_len=scenario.max_len)
    t_ft = time.perf_counter() - t0
    rows = [_one_row(scenario, model, _budget(profile), t_finetune=t_ft)]
    return _finish(scenario, "rl", rows, model,
                   extras={"reward_history": history})


def _run_nado_decode(scenario: Scenario, seed: int, **_) -> ExperimentResult:
    profile = scenario.profile
    t0 = time.perf_counter()
    data = sample_training_set(scenario.model, scenario.prompts,
                               profile.samples_per_prompt, scenario.oracle,
                               derive_rng(seed, "data", 1), scenario.max_len)
    t_data = time.perf_counter() - t0
    head = TabularNado(scenario.vocab)
    t0 = time.perf_counter()
    train_nado(head, data, NadoTrainConfig(epochs=profile.nado_epochs))
    t_nado = time.perf_counter() - t0
    guided = GuidedModel(_copy_model(scenario.model), NadoSource(head),
                         GuideConfig(delta=1.0))
    err = max_prefix_error_data(head, scenario.model, scenario.oracle, data,
                                scenario.max_len)
    rows = [_one_row(scenario, guided, 1, t_data=t_data, t_nado=t_nado,
                     head_err=err)]
    return _finish(scenario, "nado_decode", rows, guided, head=head)


def _pipeline_config(scenario: Scenario, seed: int, rounds: int,
                     kl_weight: float | None) -> PipelineConfig:
    profile = scenario.profile
    return PipelineConfig(
        rounds=rounds, samples_per_prompt=profile.samples_per_prompt,
        max_len=scenario.max_len, delta=1.0,
        kl_weight=profile.kl_weight if kl_weight is None else kl_weight,
        ft_epochs=profile.ft_epochs, ft_optimizer=_ft_optimizer(profile),
        nado_train=NadoTrainConfig(epochs=profile.nado_epochs), seed=seed)


def _pipeline_row_collector(scenario: Scenario, rows: list[MetricsRow]):
    def on_round(model, nado, record, data):
        err = max_prefix_error_data(nado, model, scenario.oracle, data,
                                    scenario.max_len)
        rows.append(_one_row(
            scenario, model, record.index,
            t_data=record.timings["data"], t_nado=record.timings["nado"],
            t_finetune=record.timings["finetune"], head_err=err))
    return on_round


def _run_ours_sequential(scenario: Scenario, seed: int, *,
                         kl_weight: float | None = None, **_) -> ExperimentResult:
    model = _copy_model(scenario.model)
    head = TabularNado(scenario.vocab)
    cfg = _pipeline_config(scenario, seed, scenario.profile.rounds, kl_weight)
    rows: list[MetricsRow] = []
    records = run_sequential(model, head, scenario.oracle, scenario.prompts,
                             cfg, on_round=_pipeline_row_collector(scenario, rows))
    return _finish(scenario, "ours", rows, model, head=head, records=records)


def _run_ours_parallel(scenario: Scenario, seed: int, *,
                       serialize_debug: bool = False, **_) -> ExperimentResult:
    # the bootstrap round performs no model update, so one extra round
    # matches the fine-tune budget of the sequential run
    model = _copy_model(scenario.model)
    head = TabularNado(scenario.vocab)
    cfg = _pipeline_config(scenario, seed, scenario.profile.rounds + 1, None)
    rows: list[MetricsRow] = []
    records = run_parallel(model, head, scenario.oracle, scenario.prompts,
                           cfg, serialize_debug=serialize_debug,
                           on_round=_pipeline_row_collector(scenario, rows))
    return _finish(scenario, "ours_parallel", rows, model, head=head,
                   records=records)


def _exact_guide_on_base(scenario: Scenario) -> GuidedModel:
    frozen = _copy_model(scenario.model)
    return GuidedModel(frozen, ExactSource(frozen, scenario.oracle,
                                           scenario.max_len),
                       GuideConfig(delta=1.0))


def _run_classification_ours(scenario: Scenario, seed: int, **_) -> ExperimentResult:
    model = _copy_model(scenario.model)
    guide = _exact_guide_on_base(scenario)
    t0 = time.perf_counter()
    fine_tune(model, scenario.train_corpus, epochs=_budget(scenario.profile),
              optimizer=_ft_optimizer(scenario.profile),
              kl_weight=scenario.profile.kl_weight, guide=guide)
    t_ft = time.perf_counter() - t0
    rows = [_one_row(scenario, model, _budget(scenario.profile), t_finetune=t_ft)]
    return _finish(scenario, "ours", rows, model)


def _mixed_common(scenario: Scenario, seed: int, adaptive: bool) -> ExperimentResult:
    profile = scenario.profile
    model = _copy_model(scenario.model)
    guide = _exact_guide_on_base(scenario)
    t0 = time.perf_counter()
    if adaptive:
        anchor = _copy_model(scenario.model)
        rules = [
            SubsetRule("constrained", lambda e: e.tag == "constrained", guide),
            SubsetRule("general", lambda e: e.tag == "general", anchor),
        ]
        fine_tune(model, scenario.train_corpus, epochs=_budget(profile),
                  optimizer=_ft_optimizer(profile),
                  kl_weight=profile.adaptive_kl_weight, rules=rules)
    else:
        fine_tune(model, scenario.train_corpus, epochs=_budget(profile),
                  optimizer=_ft_optimizer(profile),
                  kl_weight=profile.adaptive_kl_weight, guide=guide)
    t_ft = time.perf_counter() - t0
    rows = [_one_row(scenario, model, _budget(profile), t_finetune=t_ft)]
    base_ppl = perplexity(scenario.model, scenario.general_heldout)
    result = _finish(scenario, "adaptive" if adaptive else "nonadaptive",
                     rows, model)
    result.extras["general_ppl_degradation"] = result.perplexity - base_ppl
    return result


def _run_adaptive(scenario: Scenario, seed: int, **_) -> ExperimentResult:
    return _mixed_common(scenario, seed, adaptive=True)


def _run_nonadaptive(scenario: Scenario, seed: int, **_) -> ExperimentResult:
    return _mixed_common(scenario, seed, adaptive=False)


_METHODS = {
    "detox": {
        "plain": _run_plain,
        "filter": _run_filter,
        "rl": _run_rl,
        "nado_decode": _run_nado_decode,
        "ours": _run_ours_sequential,
        "ours_parallel": _run_ours_parallel,
    },
    "classification": {
        "plain": _run_plain,
        "ours": _run_classification_ours,
    },
    "mixed": {
        "adaptive": _run_adaptive,
        "nonadaptive": _run_nonadaptive,
    },
}


def available_methods(scenario_name: str) -> list[str]:
    return sorted(_METHODS[scenario_name])


def run_experiment(scenario: Scenario, method: str, seed: int,
                   out_dir: str | None = None, **options) -> ExperimentResult:
    try:
        runner = _METHODS[scenario.name][method]
    except KeyError:
        raise ValueError(
            f"method {method!r} not available for scenario {scenario.name!r}; "
            f"pick from {available_methods(scenario.name)}") from None
    result = runner(scenario, seed, **options)
    if out_dir is not None:
        _write_artifacts(out_dir, scenario, method, seed, result, options)
    return result


def _write_artifacts(out_dir: str, scenario: Scenario, method: str,
                     seed: int, result: ExperimentResult, options) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), result.rows)
    model = result.model
    if isinstance(model, GuidedModel):
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), model.base)
    else:
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), model)
    if result.head is not None:
        save_nado_checkpoint(os.path.join(out_dir, "head.ckpt"), result.head)
    save_vocab(os.path.join(out_dir, "vocab.txt"), scenario.vocab)
    write_oracle_file(os.path.join(out_dir, "oracle.txt"), scenario.oracle,
                      scenario.vocab)
    profile = scenario.profile
    sections = {
        "experiment": {
            "scenario": scenario.name, "method": method, "seed": seed,
            "profile": profile.name, "package_version": __version__,
        },
        "profile": {k: getattr(profile, k) for k in (
            "content_tokens", "use_eos", "order", "max_len", "rounds",
            "samples_per_prompt", "corpus_size", "pretrain_epochs",
            "nado_epochs", "ft_epochs", "ft_lr", "rl_lr", "kl_weight",
            "adaptive_kl_weight", "window", "embed_dim", "hidden_dim")},
        "result": {
            "violation_rate": repr(result.violation),
            "perplexity": repr(result.perplexity),
            "kl_drift": repr(result.kl_drift),
            **({"accuracy": repr(result.accuracy)}
               if result.accuracy is not None else {}),
        },
    }
    if options:
        sections["options"] = {k: v for k, v in options.items()}
    write_manifest(os.path.join(out_dir, "manifest.ini"), sections)


# --------------------------------------------------------------------------
# multi-run drivers
# --------------------------------------------------------------------------

LAMBDA_GRID = (0.0, 1.0, 5.0, 20.0, 50.0)


def sweep_lambda(profile: str | Profile, seed: int,
                 values=LAMBDA_GRID, out_dir: str | None = None):
    """The constraint-strength sweep on the detox scenario: one sequential
    run per weight, sharing the same pretrained start."""
    scenario = build_scenario("detox", profile, seed)
    rows = []
    for lam in values:
        result = _run_ours_sequential(scenario, seed, kl_weight=float(lam))
        rows.append((float(lam), result.violation, result.perplexity))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.tsv"), "w",
                  encoding="utf-8") as fh:
            fh.write("kl_weight\tviolation_rate\tperplexity\n")
            for lam, violation, ppl in rows:
                fh.write(f"{lam!r}\t{violation!r}\t{ppl!r}\n")
    return rows


COMPARE_METHODS = ("plain", "filter", "rl", "nado_decode", "ours")


def compare_methods(profile: str | Profile, seed: int,
                    methods=COMPARE_METHODS, out_dir: str | None = None):
    """Budget-matched method comparison on the detox scenario."""
    scenario = build_scenario("detox", profile, seed)
    results = {}
    for method in methods:
        result = run_experiment(scenario, method, seed)
        results[method] = result
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "compare.tsv"), "w",
                  encoding="utf-8") as fh:
            fh.write("method\tviolation_rate\tperplexity\n")
            for method in methods:
                r = results[method]
                fh.write(f"{method}\t{r.violation!r}\t{r.perplexity!r}\n")
    return results
