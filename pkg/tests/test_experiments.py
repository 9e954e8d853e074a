"""Scenario construction, method runners, artifacts, and corpus synthesis."""
import math
import os

import numpy as np
import pytest

from ctrltune.evaluation import strip_timing_columns
from ctrltune.config import read_manifest
from ctrltune.experiments import (
    PROFILES,
    Profile,
    available_methods,
    build_scenario,
    compare_methods,
    run_experiment,
    sweep_lambda,
    synth_corpus,
)
from ctrltune.guide import GuidedModel
from ctrltune.oracles import evaluate

TINY = Profile("tiny", content_tokens=4, use_eos=False, order=1, max_len=4,
               rounds=2, samples_per_prompt=32, corpus_size=60,
               pretrain_epochs=40, nado_epochs=40, ft_epochs=1, ft_lr=0.1,
               rl_lr=0.12, kl_weight=5.0, adaptive_kl_weight=10.0)

TINY_EOS = Profile("tiny-eos", content_tokens=4, use_eos=True, order=1,
                   max_len=4, rounds=2, samples_per_prompt=32, corpus_size=60,
                   pretrain_epochs=40, nado_epochs=40, ft_epochs=1, ft_lr=0.1,
                   rl_lr=0.12, kl_weight=5.0, adaptive_kl_weight=10.0)


def violating_weight(corpus, oracle):
    return sum(ex.weight for ex in corpus
               if evaluate(oracle, ex.seq.prompt, ex.seq.completion) < 0.5)


# --------------------------------------------------------------------------
# profiles and scenario construction
# --------------------------------------------------------------------------

def test_shipped_profiles():
    desk, verify = PROFILES["desk"], PROFILES["verify"]
    assert desk.content_tokens == 12 and desk.use_eos
    assert desk.max_len == 8 and desk.order == 2
    assert (desk.window, desk.embed_dim, desk.hidden_dim) == (3, 8, 16)
    assert verify.content_tokens == 4 and not verify.use_eos
    assert verify.max_len == 5 and verify.order == 2


def test_desk_detox_vocabulary():
    sc = build_scenario("detox", "desk", 0)
    assert sc.vocab.size == 13  # 12 content tokens plus the end marker
    assert sc.vocab.eos == "</s>"
    assert sc.vocab.tokens[sc.toxic_index] == "x"


def test_verify_detox_vocabulary():
    sc = build_scenario("detox", "verify", 0)
    assert sc.vocab.tokens == ("a", "b", "c", "x")
    assert sc.vocab.eos is None


def test_unknown_scenario():
    with pytest.raises(ValueError, match="unknown scenario"):
        build_scenario("nope", TINY, 0)


def test_scenario_construction_is_deterministic():
    a = build_scenario("detox", TINY, 3)
    b = build_scenario("detox", TINY, 3)
    assert np.array_equal(a.model.snapshot().values, b.model.snapshot().values)
    assert [(e.seq.completion, e.weight) for e in a.train_corpus] == \
           [(e.seq.completion, e.weight) for e in b.train_corpus]


def test_seeds_change_the_scenario():
    a = build_scenario("detox", TINY, 3)
    b = build_scenario("detox", TINY, 4)
    assert not np.array_equal(a.model.snapshot().values, b.model.snapshot().values)


def test_detox_corpus_holds_exact_violating_share():
    sc = build_scenario("detox", TINY, 5)
    assert violating_weight(sc.train_corpus, sc.oracle) == pytest.approx(0.30)
    assert violating_weight(sc.heldout, sc.oracle) == pytest.approx(0.30)


def test_classification_records_answer_token_presence():
    sc = build_scenario("classification", TINY, 2)
    yes, no = sc.yes_index, sc.no_index
    for ex in sc.train_corpus:
        y = ex.seq.completion
        has_x = sc.toxic_index in y[:-1]
        assert y[-1] == (yes if has_x else no)


def test_classification_base_answers_are_neutral():
    sc = build_scenario("classification", TINY, 2)
    q_ctx = tuple(sc.model.context_key((), (0,) * 3 + (sc.vocab.index("q"),)))
    probs = sc.model.probs_from_key(q_ctx)
    assert probs[sc.yes_index] == pytest.approx(0.5)
    assert probs[sc.no_index] == pytest.approx(0.5)


def test_mixed_scenario_tags_and_prompts():
    sc = build_scenario("mixed", TINY, 1)
    tags = {ex.tag for ex in sc.train_corpus}
    assert tags == {"constrained", "general"}
    assert sc.constrained_prompts == [(0,)]
    assert sc.general_prompts == [(1,)]
    for ex in sc.train_corpus:
        expected = (0,) if ex.tag == "constrained" else (1,)
        assert ex.seq.prompt == expected


# --------------------------------------------------------------------------
# method runners
# --------------------------------------------------------------------------

def test_available_methods():
    assert available_methods("detox") == [
        "filter", "nado_decode", "ours", "ours_parallel", "plain", "rl"]
    assert available_methods("classification") == ["ours", "plain"]
    assert available_methods("mixed") == ["adaptive", "nonadaptive"]


def test_unknown_method_raises():
    sc = build_scenario("classification", TINY, 0)
    with pytest.raises(ValueError, match="not available"):
        run_experiment(sc, "rl", 0)


@pytest.mark.parametrize("method", available_methods("detox"))
def test_detox_method_smoke(method):
    sc = build_scenario("detox", TINY, 0)
    result = run_experiment(sc, method, 0)
    assert result.method in (method, "ours")
    assert 0.0 <= result.violation <= 1.0
    assert result.perplexity > 1.0
    assert result.kl_drift >= 0.0
    assert result.rows


@pytest.mark.parametrize("method", ["plain", "ours"])
def test_classification_method_smoke(method):
    sc = build_scenario("classification", TINY, 0)
    result = run_experiment(sc, method, 0)
    assert 0.0 <= result.accuracy <= 1.0


@pytest.mark.parametrize("method", ["adaptive", "nonadaptive"])
def test_mixed_method_smoke(method):
    sc = build_scenario("mixed", TINY, 0)
    result = run_experiment(sc, method, 0)
    assert "general_ppl_degradation" in result.extras


def test_detox_smoke_with_eos_profile():
    sc = build_scenario("detox", TINY_EOS, 0)
    result = run_experiment(sc, "ours", 0)
    assert 0.0 <= result.violation <= 1.0


def test_sequential_runs_profile_round_count():
    sc = build_scenario("detox", TINY, 0)
    result = run_experiment(sc, "ours", 0)
    assert len(result.records) == TINY.rounds
    assert len(result.rows) == TINY.rounds


def test_parallel_gets_one_extra_round_for_the_idle_bootstrap():
    sc = build_scenario("detox", TINY, 0)
    result = run_experiment(sc, "ours_parallel", 0, serialize_debug=True)
    assert len(result.records) == TINY.rounds + 1
    assert result.records[0].consumed["guide_head"] == ""  # no update yet


def test_guided_method_returns_guided_model():
    sc = build_scenario("detox", TINY, 0)
    result = run_experiment(sc, "nado_decode", 0)
    assert isinstance(result.model, GuidedModel)
    assert not math.isnan(result.rows[0].nado_max_prefix_error)


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------

def test_artifact_layout_and_manifest(tmp_path):
    sc = build_scenario("detox", TINY, 0)
    out = tmp_path / "run"
    run_experiment(sc, "ours", 0, out_dir=str(out))
    for name in ("metrics.csv", "model.ckpt", "head.ckpt", "vocab.txt",
                 "oracle.txt", "manifest.ini"):
        assert (out / name).exists()
    manifest = read_manifest(str(out / "manifest.ini"))
    assert manifest["experiment"]["scenario"] == "detox"
    assert manifest["experiment"]["method"] == "ours"
    assert manifest["experiment"]["seed"] == "0"
    assert manifest["profile"]["max_len"] == "4"
    assert float(manifest["result"]["violation_rate"]) >= 0.0


def test_artifact_rerun_is_byte_identical_outside_timings(tmp_path):
    sc = build_scenario("detox", TINY, 0)
    run_experiment(sc, "ours", 0, out_dir=str(tmp_path / "a"))
    run_experiment(sc, "ours", 0, out_dir=str(tmp_path / "b"))
    a = strip_timing_columns((tmp_path / "a" / "metrics.csv").read_text())
    b = strip_timing_columns((tmp_path / "b" / "metrics.csv").read_text())
    assert a == b
    for name in ("model.ckpt", "head.ckpt", "vocab.txt", "oracle.txt",
                 "manifest.ini"):
        assert (tmp_path / "a" / name).read_bytes() == \
               (tmp_path / "b" / name).read_bytes()


def test_plain_run_writes_no_head(tmp_path):
    sc = build_scenario("detox", TINY, 0)
    run_experiment(sc, "plain", 0, out_dir=str(tmp_path))
    assert not (tmp_path / "head.ckpt").exists()


# --------------------------------------------------------------------------
# multi-run drivers
# --------------------------------------------------------------------------

def test_sweep_writes_one_row_per_weight(tmp_path):
    rows = sweep_lambda(TINY, 0, values=(0.0, 5.0), out_dir=str(tmp_path))
    assert [lam for lam, _, _ in rows] == [0.0, 5.0]
    lines = (tmp_path / "sweep.tsv").read_text().splitlines()
    assert lines[0] == "kl_weight\tviolation_rate\tperplexity"
    assert len(lines) == 3


def test_compare_covers_requested_methods(tmp_path):
    results = compare_methods(TINY, 0, methods=("plain", "filter"),
                              out_dir=str(tmp_path))
    assert set(results) == {"plain", "filter"}
    lines = (tmp_path / "compare.tsv").read_text().splitlines()
    assert lines[0] == "method\tviolation_rate\tperplexity"
    assert len(lines) == 3


# --------------------------------------------------------------------------
# corpus synthesis
# --------------------------------------------------------------------------

def test_synth_exact_fraction_and_determinism():
    a = synth_corpus(TINY, 9, size=50, violating_fraction=0.2)
    b = synth_corpus(TINY, 9, size=50, violating_fraction=0.2)
    assert violating_weight(a.corpus, a.oracle) == pytest.approx(0.2)
    assert a.realized_fraction == pytest.approx(0.2)
    assert [(e.seq.prompt, e.seq.completion, e.weight) for e in a.corpus] == \
           [(e.seq.prompt, e.seq.completion, e.weight) for e in b.corpus]


def test_synth_prompt_length():
    r = synth_corpus(TINY_EOS, 4, size=30, violating_fraction=0.5,
                     prompt_len=2)
    eos = r.vocab.eos_index
    for ex in r.corpus:
        assert len(ex.seq.prompt) == 2
        assert eos not in ex.seq.prompt


def test_synth_classification_emits_text_records():
    r = synth_corpus(TINY, 6, size=20, violating_fraction=0.4,
                     scenario="classification")
    assert r.realized_fraction == pytest.approx(0.4)
    assert len(r.records) == 20
    yes = sum(1 for line in r.records if line.endswith("yes"))
    assert yes == 8
    for line in r.records:
        assert line.startswith("comment: ")
    # planted token appears exactly in the yes-records
    for line in r.records:
        assert (" x" in line.split("|")[0]) == line.endswith("yes")


def test_synth_rejects_bad_fraction():
    with pytest.raises(ValueError, match="fraction"):
        synth_corpus(TINY, 0, violating_fraction=1.5)


def test_synth_unknown_family():
    with pytest.raises(ValueError, match="family"):
        synth_corpus(TINY, 0, scenario="poetry")


def test_synth_generator_reproduces_corpus():
    # the returned generator plus the seed pins down every draw
    r1 = synth_corpus(TINY, 11, size=25, violating_fraction=0.0)
    r2 = synth_corpus(TINY, 11, size=25, violating_fraction=0.0)
    assert np.array_equal(r1.generator.snapshot().values,
                          r2.generator.snapshot().values)
