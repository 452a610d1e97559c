import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acpo.advantage import (
    STAGE1, STAGE2, ModulationParams, attr_diversity_advantage, broadcast_token_advantages,
    confidence_multiplier, final_step_advantage, group_advantages, group_base_advantage, modulation_weight,
    trajectory_advantages,
)
from acpo.attribution import AttributionProfile
from acpo.segmentation import steps_from_boundaries
from acpo.trace import SegmentedTrajectory
from conftest import make_traj

P = ModulationParams()


def seg_of(words, boundaries, logprobs=None, reward=None, traj_id="t"):
    t = make_traj(words, logprobs=logprobs, reward=reward, traj_id=traj_id)
    return SegmentedTrajectory(t, steps_from_boundaries(boundaries, t.reasoning_len))


def test_base_advantage_examples():
    assert group_base_advantage([1, 0, 0, 1]) == [1.0, -1.0, -1.0, 1.0]
    assert group_base_advantage([1, 1, 1, 1]) == [0.0] * 4
    assert group_base_advantage([1, 0]) == [1.0, -1.0]
    with pytest.raises(ValueError):
        group_base_advantage([1.0])


def test_weight_examples():
    for C, A in ((1.0, 1.0), (-1.0, 1.0), (0.5, -1.0), (0.5, 0.0)):
        assert modulation_weight(0.2, C, A, 0.2, 0.9, P) == 1.0
    assert modulation_weight(0.9, 0.4, 1.0, 0.2, 0.9, ModulationParams(beta=0.3)) == pytest.approx(1.3)
    assert modulation_weight(0.9, 0.4, -1.0, 0.2, 0.9, ModulationParams(gamma=0.2)) == pytest.approx(0.8)
    assert modulation_weight(0.9, -0.4, 1.0, 0.2, 0.9, ModulationParams(gamma=0.2)) == pytest.approx(0.8)
    assert modulation_weight(0.9, 0.4, 0.0, 0.2, 0.9, P) == 1.0
    assert modulation_weight(0.5, 0.4, 1.0, 0.5, 0.5, P) == 1.0


def test_theta_threshold_is_inclusive():
    p = ModulationParams(theta=0.4)
    assert modulation_weight(1.0, 0.4, 1.0, 0.0, 1.0, p) == pytest.approx(1.3)
    assert modulation_weight(1.0, 0.39, 1.0, 0.0, 1.0, p) == pytest.approx(0.8)


def test_composition_examples():
    assert attr_diversity_advantage(1.0, 0.8, 1.3) == pytest.approx(1.04)
    assert attr_diversity_advantage(0.0, 0.8, 1.3) == 0.0
    assert attr_diversity_advantage(-1.0, 0.5, 0.8) == pytest.approx(-0.4)
    assert final_step_advantage(0.7, 5.0, 0.0) == 0.7
    assert final_step_advantage(1.0, 1.04, 0.5) == pytest.approx(1.52)
    assert final_step_advantage(-1.0, -0.4, 1.0) == pytest.approx(-1.4)


def test_param_validation():
    with pytest.raises(ValueError):
        ModulationParams(gamma=1.5)
    with pytest.raises(ValueError):
        ModulationParams(beta=-0.1)
    with pytest.raises(ValueError):
        ModulationParams(alpha=-1)


def test_broadcast_examples():
    seg = seg_of(["first", "3", ".", "7"], [2])
    assert broadcast_token_advantages(seg, [1.5, -0.5], [-0.1, -0.2, -0.3], STAGE1) == [1.5, 1.5, -0.5]
    one = seg_of(["first", "7"], [])
    assert broadcast_token_advantages(one, [1.0], [0.0], STAGE2) == [2.0]
    assert broadcast_token_advantages(one, [1.0], [math.log(0.5)], STAGE2) == pytest.approx([1.5])


def test_broadcast_errors():
    seg = seg_of(["first", "3", ".", "7"], [2])
    with pytest.raises(ValueError):
        broadcast_token_advantages(seg, [1.0], [0.0] * 3, STAGE1)
    with pytest.raises(ValueError):
        broadcast_token_advantages(seg, [1.0, 2.0], [0.0] * 2, STAGE1)
    with pytest.raises(ValueError):
        broadcast_token_advantages(seg, [1.0, 2.0], [0.0] * 3, "stage3")


def test_answer_tokens_get_base_advantage():
    seg = seg_of(["first", "3", "answer", "3", "<eos>"], [], logprobs=[-0.1, -0.2, -0.3, -0.4, -0.5])
    prof = AttributionProfile((2.0,), (0.5,), -3.0, -1.0)
    a1 = trajectory_advantages(seg, prof, 1.0, 0.5, 0.5, P, STAGE1)
    assert a1.answer_adv == (1.0, 1.0)
    assert a1.step_adv == (pytest.approx(1.0 + 0.5 * 2.0),)
    a2 = trajectory_advantages(seg, prof, 1.0, 0.5, 0.5, P, STAGE2)
    assert a2.answer_adv == pytest.approx((1 + math.exp(-0.4), 1 + math.exp(-0.5)))
    assert len(a2.full()) == 5


def random_group(draw, G):
    segs, profs = [], []
    for j in range(G):
        n = draw(st.integers(1, 8))
        t_words = ["3"] * n + ["answer", "3"]
        lps = draw(st.lists(st.floats(-5, 0, allow_nan=False), min_size=n + 2, max_size=n + 2))
        region = n + 1
        cuts = sorted(draw(st.sets(st.integers(1, region - 1), max_size=3))) if region > 1 else []
        reward = float(draw(st.integers(0, 1)))
        seg = seg_of(t_words, cuts, logprobs=lps, reward=reward, traj_id=f"t{j}")
        k = len(seg.steps)
        scores = draw(st.lists(st.floats(-3, 3, allow_nan=False), min_size=k, max_size=k))
        ents = draw(st.lists(st.floats(0, 3, allow_nan=False), min_size=k, max_size=k))
        segs.append(seg)
        profs.append(AttributionProfile(tuple(scores), tuple(ents), -1.0, 0.0))
    return segs, profs


params = st.builds(ModulationParams, beta=st.floats(0, 2), gamma=st.floats(0, 1), theta=st.floats(-1, 1),
                   alpha=st.floats(0, 2))


@settings(max_examples=200, deadline=None)
@given(st.data(), params)
def test_group_properties(data, p):
    segs, profs = random_group(data.draw, data.draw(st.integers(2, 5)))
    for stage in (STAGE1, STAGE2):
        advs = group_advantages(segs, profs, p, stage)
        for seg, adv in zip(segs, advs):
            assert len(adv.token_adv) == seg.trajectory.reasoning_len
            assert all(1 - p.gamma - 1e-12 <= w <= 1 + p.beta + 1e-12 for w in adv.weights)
            if stage == STAGE1:
                for k, s in enumerate(seg.steps):
                    assert set(adv.token_adv[s.start:s.end]) == {adv.step_adv[k]}


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_alpha_zero_is_grpo(data):
    segs, profs = random_group(data.draw, data.draw(st.integers(2, 5)))
    base = group_base_advantage([s.trajectory.reward for s in segs])
    advs = group_advantages(segs, profs, ModulationParams(alpha=0.0), STAGE1)
    for A, adv, seg in zip(base, advs, segs):
        assert list(adv.full()) == [A] * len(seg.trajectory.output)


@settings(max_examples=100, deadline=None)
@given(st.data(), st.sampled_from([0.0, 1.0]))
def test_zero_variance_group_has_zero_advantages(data, r):
    segs, profs = random_group(data.draw, 3)
    segs = [SegmentedTrajectory(s.trajectory.with_reward(r), s.steps) for s in segs]
    for stage in (STAGE1, STAGE2):
        for adv in group_advantages(segs, profs, P, stage):
            assert not np.any(adv.full())


@settings(max_examples=200)
@given(st.floats(-50, 0, allow_nan=False))
def test_confidence_multiplier_bounds(lp):
    m = confidence_multiplier(lp)
    assert 1.0 <= m <= 2.0
    # strictly above 1 until exp(lp) drops below half an ulp of 1
    assert m > 1.0 or lp < -36
