from __future__ import annotations

import math

import numpy as np
import pytest
from gradcheck import finite_difference_grad, relative_error

from ctrltune.errors import ParseError, ShapeMismatch
from ctrltune.models import (
    OptimizerConfig,
    OptimizerState,
    TabularARModel,
    WindowNeuralARModel,
    apply_update,
    enumerate_completions,
    enumerate_contexts,
    enumerate_sequence_dist,
    lm_loss_and_grad,
    load_checkpoint,
    model_from_snapshot,
    sample_completion,
    save_checkpoint,
    sequence_logprob,
)
from ctrltune.seqcore import Corpus, Example, Sequence, Vocabulary

AB = Vocabulary(("A", "B"))


def uniform_ab() -> TabularARModel:
    return TabularARModel(AB, order=1)


def e2_model() -> TabularARModel:
    """i.i.d. with P(A) = 0.8."""
    return TabularARModel.iid(AB, [0.8, 0.2])


# ---------------------------------------------------------------- contexts

def test_enumerate_contexts_counts() -> None:
    # sum_{m=0..k} V^m contexts, left-padded with the reserved index
    assert len(enumerate_contexts(4, 2)) == 1 + 4 + 16
    assert enumerate_contexts(2, 1)[0] == (2,)  # BOS pad
    assert len(enumerate_contexts(3, 0)) == 1


def test_context_key_padding_and_tail() -> None:
    m = TabularARModel(AB, order=2)
    assert m.context_key((), ()) == (2, 2)
    assert m.context_key((0,), ()) == (2, 0)
    assert m.context_key((0, 1), (0, 0, 1)) == (0, 1)


def test_markov_property_order_one() -> None:
    rng = np.random.default_rng(5)
    m = TabularARModel(AB, order=1, rng=rng, init_scale=1.0)
    a = m.next_dist((), (0, 1)).probs  # history ends in B
    b = m.next_dist((1,), (1,)).probs  # different history, same last token
    assert np.allclose(a, b)


def test_from_conditional_rows() -> None:
    m = TabularARModel.from_conditional(AB, 1, {(0,): np.array([0.9, 0.1])})
    assert m.next_dist((), (0,)).probs == pytest.approx([0.9, 0.1], abs=1e-12)
    # unlisted contexts stay uniform
    assert m.next_dist((), (1,)).probs == pytest.approx([0.5, 0.5])


# ---------------------------------------------------------------- logprob

def test_sequence_logprob_uniform_frozen() -> None:
    lp = sequence_logprob(uniform_ab(), Sequence((), (0, 1, 0)))
    assert lp == pytest.approx(-2.0794415416798357, rel=1e-12)


def test_sequence_logprob_e2_frozen() -> None:
    lp = sequence_logprob(e2_model(), Sequence((), (0, 0)))
    assert lp == pytest.approx(-0.4462871026284195, rel=1e-9)


def test_sequence_logprob_point_mass_is_zero() -> None:
    m = TabularARModel.from_conditional(AB, 0, {(): np.array([1.0, 0.0])})
    assert abs(sequence_logprob(m, Sequence((), (0, 0, 0)))) < 1e-9


def test_logprob_conditions_on_prompt() -> None:
    m = TabularARModel.from_conditional(
        AB, 1, {(0,): np.array([0.9, 0.1]), (1,): np.array([0.2, 0.8])}
    )
    assert sequence_logprob(m, Sequence((0,), (1,))) == pytest.approx(math.log(0.1))
    assert sequence_logprob(m, Sequence((1,), (1,))) == pytest.approx(math.log(0.8))


# ---------------------------------------------------------------- sampling

def test_sample_completion_deterministic_under_seed() -> None:
    m = TabularARModel(AB, order=1, rng=np.random.default_rng(1), init_scale=0.5)
    a = sample_completion(m, np.random.default_rng(42), (), 6)
    b = sample_completion(m, np.random.default_rng(42), (), 6)
    assert a == b and len(a) == 6


def test_sample_completion_stops_at_eos() -> None:
    v = Vocabulary(("a", "<eos>"), eos="<eos>")
    m = TabularARModel.from_conditional(v, 0, {(): np.array([0.0, 1.0])})
    out = sample_completion(m, np.random.default_rng(0), (), 10)
    assert out == (1,)


def test_sample_completion_monte_carlo_matches_exact() -> None:
    # hand-computed toy check: i.i.d. P(A)=0.8, empirical P("B B") over 10000 draws
    m = e2_model()
    rng = np.random.default_rng(77)
    hits = sum(
        sample_completion(m, rng, (), 2) == (1, 1) for _ in range(10000)
    )
    assert abs(hits / 10000 - 0.04) < 0.006  # ~3 standard errors


# ---------------------------------------------------------------- enumeration

def test_enumerate_completions_no_eos() -> None:
    seqs = list(enumerate_completions(AB, 3))
    assert len(seqs) == 8
    assert len(set(seqs)) == 8


def test_enumerate_completions_with_eos_partition() -> None:
    v = Vocabulary(("a", "b", "<eos>"), eos="<eos>")
    seqs = list(enumerate_completions(v, 3))
    # terminated strings of each shorter length plus full-length unterminated
    assert len(seqs) == 1 + 2 + 4 + 8
    assert len(set(seqs)) == len(seqs)
    for s in seqs:
        assert 2 not in s[:-1]


def test_enumerated_distribution_sums_to_one_with_eos() -> None:
    v = Vocabulary(("a", "b", "<eos>"), eos="<eos>")
    m = TabularARModel(v, order=1, rng=np.random.default_rng(3), init_scale=0.7)
    dist = enumerate_sequence_dist(m, (0,), 4)
    assert sum(dist.values()) == pytest.approx(1.0, abs=1e-9)


def test_enumerated_distribution_sums_to_one_without_eos() -> None:
    m = TabularARModel(AB, order=2, rng=np.random.default_rng(4), init_scale=0.7)
    assert sum(enumerate_sequence_dist(m, (), 5).values()) == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------- lm loss

def test_lm_loss_uniform_frozen() -> None:
    batch = Corpus([Example(Sequence((), (0, 1)))])
    loss, _ = lm_loss_and_grad(uniform_ab(), batch)
    assert loss == pytest.approx(1.3862943611198906, rel=1e-12)


def test_lm_loss_mean_reduction() -> None:
    one = Corpus([Example(Sequence((), (0, 1)))])
    two = Corpus([Example(Sequence((), (0, 1))), Example(Sequence((), (0, 1)))])
    l1, _ = lm_loss_and_grad(uniform_ab(), one)
    l2, _ = lm_loss_and_grad(uniform_ab(), two)
    assert l1 == pytest.approx(l2)


def test_lm_grad_matches_finite_differences_tabular() -> None:
    rng = np.random.default_rng(11)
    m = TabularARModel(AB, order=1, rng=rng, init_scale=0.5)
    batch = Corpus([
        Example(Sequence((0,), (1, 0))),
        Example(Sequence((), (0, 0, 1))),
    ])
    _, grad = lm_loss_and_grad(m, batch)
    num = finite_difference_grad(lambda: lm_loss_and_grad(m, batch)[0], m.params)
    assert relative_error(grad, num) < 1e-6


def test_lm_grad_matches_finite_differences_neural() -> None:
    v = Vocabulary(("a", "b", "c"))
    m = WindowNeuralARModel(v, window=2, embed_dim=3, hidden_dim=4,
                            rng=np.random.default_rng(12), init_scale=0.4)
    batch = Corpus([
        Example(Sequence((2,), (0, 1))),
        Example(Sequence((), (1, 2, 0))),
    ])
    _, grad = lm_loss_and_grad(m, batch)
    num = finite_difference_grad(lambda: lm_loss_and_grad(m, batch)[0], m.params)
    assert relative_error(grad, num) < 1e-6


def test_neural_next_dist_is_normalized() -> None:
    v = Vocabulary(("a", "b", "c", "d"))
    m = WindowNeuralARModel(v, 3, 4, 5, rng=np.random.default_rng(8), init_scale=0.6)
    p = m.next_dist((0, 1), (2,)).probs
    assert p.sum() == pytest.approx(1.0, abs=1e-9)
    assert (p > 0).all()


# ---------------------------------------------------------------- optimizer

def test_plain_step_frozen() -> None:
    p = np.array([1.0])
    apply_update(p, np.array([0.5]), OptimizerConfig(lr=0.1))
    assert p[0] == pytest.approx(0.95, rel=1e-12)


def test_weight_decay_is_decoupled() -> None:
    p = np.array([1.0])
    apply_update(p, np.array([0.0]), OptimizerConfig(lr=0.1, weight_decay=0.5))
    assert p[0] == pytest.approx(0.95)


def test_adamw_trace_frozen() -> None:
    # trajectory frozen from an independent rendition of the standard
    # bias-corrected moment update with decoupled decay
    p = np.array([1.0])
    cfg = OptimizerConfig(lr=0.1, weight_decay=0.01, moments=True)
    state = OptimizerState()
    expected = [0.899000002, 0.8789511989397751, 0.8526757294154286]
    for g, want in zip([0.5, -0.3, 0.1], expected):
        apply_update(p, np.array([g]), cfg, state)
        assert p[0] == pytest.approx(want, rel=1e-12)


def test_moments_require_state() -> None:
    with pytest.raises(ValueError):
        apply_update(np.array([1.0]), np.array([0.1]), OptimizerConfig(lr=0.1, moments=True))


def test_apply_update_shape_check() -> None:
    with pytest.raises(ShapeMismatch):
        apply_update(np.zeros(3), np.zeros(2), OptimizerConfig(lr=0.1))


# ---------------------------------------------------------------- snapshots

def test_snapshot_restore_bit_identical() -> None:
    m = TabularARModel(AB, 2, rng=np.random.default_rng(0), init_scale=1.0)
    snap = m.snapshot()
    m.params += 1.0
    m.restore(snap)
    assert np.array_equal(m.params, snap.values)


def test_snapshot_descriptor_mismatch() -> None:
    a = TabularARModel(AB, 1)
    b = TabularARModel(AB, 2)
    with pytest.raises(ShapeMismatch):
        b.restore(a.snapshot())


def test_fingerprint_tracks_values() -> None:
    m = TabularARModel(AB, 1)
    f0 = m.snapshot().fingerprint
    m.params[0] = 3.0
    assert m.snapshot().fingerprint != f0


def test_model_from_snapshot_reproduces_distributions() -> None:
    m = WindowNeuralARModel(AB, 2, 3, 4, rng=np.random.default_rng(6), init_scale=0.5)
    copy = model_from_snapshot(m.snapshot(), AB)
    assert np.array_equal(copy.next_dist((), (0,)).probs, m.next_dist((), (0,)).probs)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_exact(tmp_path) -> None:
    m = WindowNeuralARModel(AB, 2, 3, 4, rng=np.random.default_rng(13), init_scale=0.9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(str(path), m)
    loaded = load_checkpoint(str(path), AB)
    assert np.array_equal(loaded.params, m.params)  # 17 sig digits round-trips


def test_checkpoint_header_is_first_line(tmp_path) -> None:
    m = TabularARModel(AB, 1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(str(path), m)
    first = path.read_text().splitlines()[0]
    assert first == "tabular vocab=2 eos=-1 order=1"


def test_checkpoint_vocab_mismatch(tmp_path) -> None:
    m = TabularARModel(AB, 1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(str(path), m)
    with pytest.raises(ShapeMismatch):
        load_checkpoint(str(path), Vocabulary(("x", "y", "z")))


def test_checkpoint_truncated(tmp_path) -> None:
    m = TabularARModel(AB, 1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(str(path), m)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-2]) + "\n")
    with pytest.raises(ShapeMismatch):
        load_checkpoint(str(path), AB)


def test_checkpoint_bad_header(tmp_path) -> None:
    path = tmp_path / "m.ckpt"
    path.write_text("gibberish header line\n0.0\n")
    with pytest.raises(ParseError):
        load_checkpoint(str(path), AB)
