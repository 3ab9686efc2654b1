import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgedraft.errors import DomainError, NoResidual, TooLarge, VocabMismatch
from edgedraft.models import ConstantModel, SeededCategoricalModel
from edgedraft.rng import RngStream
from edgedraft.specdec import (
    DraftBlock,
    ProbVector,
    accept_probability,
    autoregressive_distribution,
    expected_acceptance_rate,
    lossless_oracle,
    residual_distribution,
    verify_block,
)


class ScriptedStream:
    """Duck-typed RngStream yielding a fixed list of uniforms."""

    def __init__(self, values):
        self.values = list(values)

    def uniform(self):
        return self.values.pop(0)


# --- ProbVector -------------------------------------------------------------


def test_probvector_renormalizes_small_drift():
    vec = ProbVector([0.5, 0.5 + 5e-7])
    assert abs(float(vec.probs.sum()) - 1.0) <= 1e-9


def test_probvector_rejects_bad_sums_and_negatives():
    with pytest.raises(DomainError):
        ProbVector([0.5, 0.4])
    with pytest.raises(DomainError):
        ProbVector([1.1, -0.1])
    with pytest.raises(DomainError):
        ProbVector([])


# --- accept_probability -----------------------------------------------------


def test_accept_probability_examples():
    assert accept_probability(0.25, 0.5) == 0.5
    assert accept_probability(0.5, 0.25) == 1.0
    for p in (0.001, 0.37, 1.0):
        assert accept_probability(p, p) == 1.0


def test_accept_probability_domain_errors():
    with pytest.raises(DomainError):
        accept_probability(0.5, 0.0)
    with pytest.raises(DomainError):
        accept_probability(-0.1, 0.5)
    with pytest.raises(DomainError):
        accept_probability(1.1, 0.5)
    with pytest.raises(DomainError):
        accept_probability(0.5, 1.0001)


@given(
    pt=st.floats(0, 1), pt2=st.floats(0, 1),
    pd=st.floats(0.001, 1), pd2=st.floats(0.001, 1),
)
def test_accept_probability_monotone(pt, pt2, pd, pd2):
    lo_t, hi_t = sorted((pt, pt2))
    lo_d, hi_d = sorted((pd, pd2))
    assert accept_probability(lo_t, pd) <= accept_probability(hi_t, pd)
    assert accept_probability(pt, hi_d) <= accept_probability(pt, lo_d)


# --- residual_distribution ---------------------------------------------------


def test_residual_examples():
    out = residual_distribution(ProbVector([0.5, 0.5]), ProbVector([1.0, 0.0]))
    assert np.allclose(out.probs, [0.0, 1.0])
    out = residual_distribution(
        ProbVector([0.5, 0.3, 0.2]), ProbVector([0.2, 0.5, 0.3])
    )
    assert np.allclose(out.probs, [1.0, 0.0, 0.0])


def test_residual_identity_raises():
    vec = ProbVector([0.25, 0.75])
    with pytest.raises(NoResidual):
        residual_distribution(vec, ProbVector([0.25, 0.75]))


def test_residual_vocab_mismatch():
    with pytest.raises(VocabMismatch):
        residual_distribution(ProbVector([1.0]), ProbVector([0.5, 0.5]))


@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=8),
       st.lists(st.floats(0.01, 10), min_size=2, max_size=8))
def test_residual_is_distribution(wt, wd):
    n = min(len(wt), len(wd))
    t = np.array(wt[:n]) / sum(wt[:n])
    d = np.array(wd[:n]) / sum(wd[:n])
    try:
        out = residual_distribution(ProbVector(t), ProbVector(d))
    except NoResidual:
        return
    assert np.all(out.probs >= 0.0)
    assert abs(float(out.probs.sum()) - 1.0) <= 1e-9


# --- expected_acceptance_rate -------------------------------------------------


def test_expected_acceptance_examples():
    assert expected_acceptance_rate(
        ProbVector([0.5, 0.3, 0.2]), ProbVector([0.2, 0.5, 0.3])
    ) == pytest.approx(0.7, abs=1e-12)
    vec = ProbVector([0.125] * 8)
    assert expected_acceptance_rate(vec, vec) == pytest.approx(1.0, abs=1e-12)
    assert expected_acceptance_rate(
        ProbVector([1.0, 0.0]), ProbVector([0.0, 1.0])
    ) == 0.0


# --- verify_block --------------------------------------------------------------


def _point_mass(vocab, token):
    probs = [0.0] * vocab
    probs[token] = 1.0
    return ConstantModel(probs)


def test_verify_block_all_accepted():
    target = _point_mass(8, 7)
    draft = ConstantModel([1 / 8] * 8)
    block = DraftBlock((7, 7), (1.0, 1.0))
    out = verify_block(block, target, (), RngStream.derive(0, "v"), draft)
    assert out.accepted_count == 2
    assert out.corrective_token is None


def test_verify_block_forced_rejection_corrective():
    target = _point_mass(8, 7)
    draft = ConstantModel([1 / 8] * 8)
    block = DraftBlock((3,), (0.6,))
    out = verify_block(block, target, (), RngStream.derive(1, "v"), draft)
    assert out.accepted_count == 0
    assert out.corrective_token == 7


def test_verify_block_scripted_rejection():
    target = ConstantModel([0.5, 0.5])
    draft = ConstantModel([0.9, 0.1])
    block = DraftBlock((0,), (0.9,))
    out, _, _ = __import__("edgedraft.specdec", fromlist=["verify_from_states"]).\
        verify_from_states(block, target, target.init_state(), draft,
                           draft.init_state(), ScriptedStream([0.7, 0.0]))
    assert out.accepted_count == 0
    assert out.corrective_token == 1


def test_verify_block_vocab_mismatch():
    target = _point_mass(4, 3)
    draft = ConstantModel([0.25] * 4)
    with pytest.raises(VocabMismatch):
        verify_block(DraftBlock((9,), (0.5,)), target, (), RngStream.derive(0, "v"),
                     draft)
    with pytest.raises(VocabMismatch):
        verify_block(DraftBlock((1,), (0.5,)), target, (7,), RngStream.derive(0, "v"),
                     draft)


def test_verify_block_deterministic():
    target = SeededCategoricalModel(16, seed=5, concentration=3.0, eos_floor=0.0)
    draft = SeededCategoricalModel(16, seed=6, concentration=3.0, eos_floor=0.0)
    context = (1, 2, 3)
    st_d = draft.state_for(context)
    tokens, probs = [], []
    state = st_d
    stream = RngStream.derive(3, "drafting")
    for i in range(4):
        from edgedraft.models import sample_from_state

        tok, conf = sample_from_state(draft, state, stream.uniform())
        state = draft.advance(state, tok)
        tokens.append(tok)
        probs.append(conf)
    block = DraftBlock(tuple(tokens), tuple(probs))
    a = verify_block(block, target, context, RngStream.derive(9, "v"), draft)
    b = verify_block(block, target, context, RngStream.derive(9, "v"), draft)
    assert a == b


def test_verify_block_empirical_acceptance_matches_expected():
    # Property: single-token acceptance frequency ~ sum(min(p, q)).
    target = SeededCategoricalModel(32, seed=11, concentration=4.0, eos_floor=0.0)
    draft = SeededCategoricalModel(32, seed=12, concentration=4.0, eos_floor=0.0)
    context = (4, 9)
    p_t = target.next_distribution(context)
    p_d = draft.next_distribution(context)
    beta = expected_acceptance_rate(p_t, p_d)
    n = 20_000
    draft_stream = RngStream.derive(21, "draft")
    verify_stream = RngStream.derive(21, "verify")
    accepted = 0
    state_d = draft.state_for(context)
    from edgedraft.models import sample_from_state

    for _ in range(n):
        tok, conf = sample_from_state(draft, state_d, draft_stream.uniform())
        out = verify_block(DraftBlock((tok,), (conf,)), target, context,
                           verify_stream, draft)
        accepted += out.accepted_count
    se = math.sqrt(beta * (1 - beta) / n)
    assert abs(accepted / n - beta) <= 3 * se


# --- lossless oracle -------------------------------------------------------------


def test_oracle_identity_models():
    model = SeededCategoricalModel(4, seed=3, concentration=2.0, eos_floor=0.0)
    oracle = lossless_oracle(model, model, (0,), horizon=2, gamma=2)
    truth = autoregressive_distribution(model, (0,), 2)
    assert set(oracle) == set(truth)
    for seq, prob in truth.items():
        assert oracle[seq] == pytest.approx(prob, abs=1e-12)


def test_oracle_hand_example():
    target = ConstantModel([0.7, 0.3])
    draft = ConstantModel([0.4, 0.6])
    oracle = lossless_oracle(draft, target, (), horizon=1, gamma=1)
    assert oracle[(0,)] == pytest.approx(0.7, abs=1e-12)
    assert oracle[(1,)] == pytest.approx(0.3, abs=1e-12)


def test_oracle_total_probability():
    draft = SeededCategoricalModel(4, seed=8, concentration=1.0, eos_floor=0.0)
    target = SeededCategoricalModel(4, seed=9, concentration=5.0, eos_floor=0.0)
    for gamma in (1, 2, 3):
        oracle = lossless_oracle(draft, target, (2,), horizon=3, gamma=gamma)
        assert abs(sum(oracle.values()) - 1.0) <= 1e-9


def test_oracle_matches_target_distribution():
    # Losslessness on a couple of seeded pairs (the acceptance suite does 25).
    for seed in (0, 1, 2):
        draft = SeededCategoricalModel(4, seed=100 + seed, concentration=2.0,
                                       eos_floor=0.0)
        target = SeededCategoricalModel(4, seed=200 + seed, concentration=4.0,
                                        eos_floor=0.0)
        oracle = lossless_oracle(draft, target, (1, 3), horizon=3, gamma=2)
        truth = autoregressive_distribution(target, (1, 3), 3)
        err = max(abs(oracle.get(seq, 0.0) - prob) for seq, prob in truth.items())
        assert err <= 1e-9


def test_oracle_too_large():
    model = SeededCategoricalModel(8, seed=1, concentration=1.0, eos_floor=0.0)
    with pytest.raises(TooLarge):
        lossless_oracle(model, model, (), horizon=4, gamma=1, max_sequences=100)
    big = SeededCategoricalModel(16, seed=1, concentration=1.0, eos_floor=0.0)
    with pytest.raises(TooLarge):
        lossless_oracle(big, big, (), horizon=2, gamma=1)
