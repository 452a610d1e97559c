import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import acpo.attribution as attr
from acpo.attribution import (
    AttributionConfig, ContextOverflowError, answer_log_likelihood, attribution_profile, attribution_score,
    null_profile, prefix_log_likelihoods, step_conditional_entropy,
)
from acpo.policy import DEFAULT_VOCAB, PolicySnapshot, next_token_distribution
from acpo.segmentation import steps_from_boundaries
from acpo.trace import SegmentedTrajectory
from conftest import make_traj

V = len(DEFAULT_VOCAB)
Q = DEFAULT_VOCAB.encode(["4", "+", "3", "?"])


def bias_policy(bias):
    theta = np.zeros((DEFAULT_VOCAB.feature_dim, V))
    theta[0] = bias
    return PolicySnapshot(theta)


def single_token_prob(token, p):
    """Context-free policy giving ``token`` probability p, the rest shared equally."""
    bias = np.zeros(V)
    bias[DEFAULT_VOCAB.id(token)] = math.log(p * (V - 1) / (1 - p))
    return bias_policy(bias)


def seg_of(words, boundaries, **kw):
    t = make_traj(words, **kw)
    return SegmentedTrajectory(t, steps_from_boundaries(boundaries, t.reasoning_len))


def test_loglik_two_half_tokens():
    judge = single_token_prob("7", 0.5)
    L = answer_log_likelihood(judge, Q, [], DEFAULT_VOCAB.encode(["7", "7"]))
    assert L == pytest.approx(2 * math.log(0.5), abs=1e-12)


def test_loglik_single_tenth():
    judge = single_token_prob("7", 0.1)
    assert answer_log_likelihood(judge, Q, [], [DEFAULT_VOCAB.id("7")]) == pytest.approx(math.log(0.1), abs=1e-12)


def test_loglik_deterministic_is_zero():
    bias = np.full(V, -1000.0)
    bias[DEFAULT_VOCAB.id("7")] = 0.0
    assert answer_log_likelihood(bias_policy(bias), Q, [], [DEFAULT_VOCAB.id("7")]) == 0.0


def test_loglik_errors(prior):
    with pytest.raises(ValueError):
        answer_log_likelihood(prior, Q, [], [])
    with pytest.raises(ContextOverflowError):
        answer_log_likelihood(prior, Q, [DEFAULT_VOCAB.id("3")] * 20, [1], max_context=10)


def fake_likelihoods(monkeypatch, by_prefix_len):
    def fake(judge, question, prefix, answer, max_context=512):
        return by_prefix_len[len(prefix)]

    monkeypatch.setattr(attr, "answer_log_likelihood", fake)


def test_scores_from_likelihood_deltas(monkeypatch, prior):
    seg = seg_of(["first", "3", ".", "so", "4", "answer", "4"], [3])
    fake_likelihoods(monkeypatch, {0: -5.0, 3: -4.2, 6: -3.1})
    assert attribution_score(prior, seg, 0) == pytest.approx(0.8)
    assert attribution_score(prior, seg, 1) == pytest.approx(1.1)
    prof = attribution_profile(prior, seg)
    assert prof.scores == pytest.approx((0.8, 1.1))
    assert sum(prof.scores) == pytest.approx(1.9)
    assert prof.baseline_loglik == -5.0


def test_single_step_profile(monkeypatch, prior):
    seg = seg_of(["first", "3", "answer", "3"], [])
    fake_likelihoods(monkeypatch, {0: -5.0, 3: -4.2})
    assert attribution_profile(prior, seg).scores == pytest.approx((0.8,))


def test_redundant_step_scores_zero():
    seg = seg_of(["first", "3", ".", "so", "4", "answer", "4"], [3])
    prof = attribution_profile(single_token_prob("4", 0.3), seg)
    assert prof.scores == (0.0, 0.0)


def test_step_index_out_of_range(prior):
    seg = seg_of(["first", "3", "answer", "3"], [])
    with pytest.raises(IndexError):
        attribution_score(prior, seg, 1)


def test_single_sweep_uses_n_plus_one_evaluations(monkeypatch, prior):
    calls = []
    real = attr.answer_log_likelihood

    def counting(*a, **k):
        calls.append(1)
        return real(*a, **k)

    monkeypatch.setattr(attr, "answer_log_likelihood", counting)
    seg = seg_of(["first", "3", ".", "so", "4", ".", "then", "5", "answer", "5"], [3, 6])
    attribution_profile(prior, seg)
    assert len(calls) == 4


def test_step_entropy_mean_and_sum(monkeypatch, prior):
    # no "answer" cue: the last token is the answer, so the step is exactly two tokens
    seg = seg_of(["first", "3", "7"], [])
    monkeypatch.setattr(attr, "token_entropies", lambda p, s: np.array([1.0, 3.0]))
    assert step_conditional_entropy(prior, seg, 0) == 2.0
    assert step_conditional_entropy(prior, seg, 0, AttributionConfig(entropy_convention="sum")) == 4.0


def test_step_entropy_deterministic_and_uniform_over_four():
    seg = seg_of(["first", "3", ".", "so", "4", "answer", "4"], [3])
    det = np.full(V, -1000.0)
    det[0] = 0.0
    assert step_conditional_entropy(bias_policy(det), seg, 1) == 0.0
    four = np.full(V, -1000.0)
    four[:4] = 0.0
    assert step_conditional_entropy(bias_policy(four), seg, 0) == pytest.approx(math.log(4), abs=1e-12)


def oracle_loglik(judge, question, prefix, answer):
    ctx = [*question, *prefix]
    total = 0.0
    for tok in answer:
        p, _ = next_token_distribution(judge, ctx)
        total += math.log(p[tok])
        ctx.append(tok)
    return total


def test_prefixes_against_token_by_token_oracle(prior):
    words = ["first", "7", ".", "so", "1", ".", "then", "9", ".", "answer", "9"]
    seg = seg_of(words, [3, 6])
    cfg = AttributionConfig(answer_cue_len=1)
    got = prefix_log_likelihoods(prior, seg, cfg)
    ids = seg.trajectory.output_ids
    cue = [DEFAULT_VOCAB.id("answer")]
    want = [oracle_loglik(prior, seg.trajectory.question, ids[:e] + cue, [DEFAULT_VOCAB.id("9")])
            for e in (0, 3, 6, 9)]
    # full prefix already ends at the cue, so nothing is re-appended there
    want[-1] = oracle_loglik(prior, seg.trajectory.question, ids[:10], [DEFAULT_VOCAB.id("9")])
    assert got == pytest.approx(want, abs=1e-12)


def test_null_profile(prior):
    seg = seg_of(["first", "3", ".", "so", "4", "answer"], [3])
    prof = null_profile(prior, seg)
    assert prof.scores == (0.0, 0.0)
    assert all(h >= 0 for h in prof.step_entropies)


WORDS = ["first", "so", "then", "wait", ".", "1", "3", "7", "9", "+"]


@st.composite
def segmented(draw):
    n = draw(st.integers(1, 14))
    words = draw(st.lists(st.sampled_from(WORDS), min_size=n, max_size=n))
    ans = draw(st.sampled_from(["1", "3", "7", "9"]))
    t = make_traj(words + ["answer", ans])
    cuts = sorted(draw(st.sets(st.integers(1, t.reasoning_len - 1), max_size=4))) if t.reasoning_len > 1 else []
    return SegmentedTrajectory(t, steps_from_boundaries(cuts, t.reasoning_len))


@settings(max_examples=60, deadline=None)
@given(segmented(), st.integers(0, 2))
def test_telescoping(prior, seg, cue):
    cfg = AttributionConfig(answer_cue_len=cue)
    prof = attribution_profile(prior, seg, cfg)
    assert math.fsum(prof.scores) == pytest.approx(prof.full_loglik - prof.baseline_loglik, abs=1e-9)
    assert prof.full_loglik == pytest.approx(prefix_log_likelihoods(prior, seg, cfg)[-1], abs=0)
    assert len(prof.scores) == len(prof.step_entropies) == len(seg.steps)


@settings(max_examples=40, deadline=None)
@given(segmented(), st.data())
def test_locality(prior, seg, data):
    """Rewriting tokens after step i leaves scores up to i unchanged (no cue re-append)."""
    if len(seg.steps) < 2:
        return
    i = data.draw(st.integers(0, len(seg.steps) - 2))
    t = seg.trajectory
    words = DEFAULT_VOCAB.decode(t.output_ids)
    cut = seg.steps[i].end
    region = t.reasoning_len
    tail = data.draw(st.lists(st.sampled_from(WORDS), min_size=region - cut, max_size=region - cut))
    t2 = make_traj(words[:cut] + tail + words[region:])
    seg2 = SegmentedTrajectory(t2, seg.steps)
    a = attribution_profile(prior, seg).scores[: i + 1]
    b = attribution_profile(prior, seg2).scores[: i + 1]
    assert a == b
