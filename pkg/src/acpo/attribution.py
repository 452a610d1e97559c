"""Step attribution by answer log-likelihood deltas under a judge policy.

``C(S_i) = L(S_1..S_i, Y) - L(S_1..S_{i-1}, Y)`` where ``L`` is the summed
log-probability of the answer tokens given the question and a step prefix.
Scores telescope: their sum is ``L(all steps) - L(no steps)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .policy import PolicySnapshot, score_tokens
from .trace import SegmentedTrajectory

MAX_CONTEXT = 512


class ContextOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class AttributionConfig:
    # tokens just before the answer span re-appended to truncated prefixes (e.g. an answer delimiter)
    answer_cue_len: int = 0
    entropy_convention: str = "mean"
    max_context: int = MAX_CONTEXT

    def __post_init__(self):
        if self.entropy_convention not in ("mean", "sum"):
            raise ValueError("entropy_convention must be 'mean' or 'sum'")
        if self.answer_cue_len < 0:
            raise ValueError("answer_cue_len must be >= 0")


@dataclass(frozen=True)
class AttributionProfile:
    scores: tuple[float, ...]
    step_entropies: tuple[float, ...]
    baseline_loglik: float
    full_loglik: float

    def __post_init__(self):
        if len(self.scores) != len(self.step_entropies):
            raise ValueError("scores and step entropies must have one entry per step")


def answer_log_likelihood(judge: PolicySnapshot, question: Sequence[int], steps_prefix: Sequence[int],
                          answer: Sequence[int], max_context: int = MAX_CONTEXT) -> float:
    if len(answer) == 0:
        raise ValueError("answer must be non-empty")
    ctx = [*question, *steps_prefix, *answer]
    if len(ctx) > max_context:
        raise ContextOverflowError(f"context of {len(ctx)} tokens exceeds judge maximum {max_context}")
    _, lpf, _ = score_tokens(judge, ctx, len(ctx) - len(answer))
    total = 0.0
    for x in lpf:
        total += float(x)
    return total


def _prefix(seg: SegmentedTrajectory, end: int, cfg: AttributionConfig) -> list[int]:
    t = seg.trajectory
    ids = t.output_ids
    a = t.answer_span[0]
    cue_start = max(end, a - cfg.answer_cue_len)
    return ids[:end] + ids[cue_start:a]


def prefix_log_likelihoods(judge: PolicySnapshot, seg: SegmentedTrajectory,
                           cfg: AttributionConfig = AttributionConfig()) -> list[float]:
    """[L(no steps), L(S_1), L(S_1,S_2), ...]: one left-to-right sweep, n+1 evaluations."""
    t = seg.trajectory
    answer = t.answer_ids
    ends = [0] + [s.end for s in seg.steps]
    return [answer_log_likelihood(judge, t.question, _prefix(seg, e, cfg), answer, cfg.max_context) for e in ends]


def attribution_score(judge: PolicySnapshot, seg: SegmentedTrajectory, i: int,
                      cfg: AttributionConfig = AttributionConfig()) -> float:
    if not 0 <= i < len(seg.steps):
        raise IndexError(f"step index {i} out of range for {len(seg.steps)} steps")
    t = seg.trajectory
    answer = t.answer_ids
    before = 0 if i == 0 else seg.steps[i - 1].end
    hi = answer_log_likelihood(judge, t.question, _prefix(seg, seg.steps[i].end, cfg), answer, cfg.max_context)
    lo = answer_log_likelihood(judge, t.question, _prefix(seg, before, cfg), answer, cfg.max_context)
    return hi - lo


def token_entropies(policy: PolicySnapshot, seg: SegmentedTrajectory) -> np.ndarray:
    """Next-token distribution entropy (temperature 1) at every reasoning position."""
    t = seg.trajectory
    ctx = list(t.question) + t.output_ids[: t.reasoning_len]
    _, _, ent = score_tokens(policy, ctx, len(t.question))
    return ent


def _reduce(ent: np.ndarray, convention: str) -> float:
    total = 0.0
    for x in ent:
        total += float(x)
    return total / len(ent) if convention == "mean" else total


def step_conditional_entropy(policy: PolicySnapshot, seg: SegmentedTrajectory, i: int,
                             cfg: AttributionConfig = AttributionConfig()) -> float:
    step = seg.steps[i]
    return _reduce(token_entropies(policy, seg)[step.start:step.end], cfg.entropy_convention)


def attribution_profile(judge: PolicySnapshot, seg: SegmentedTrajectory,
                        cfg: AttributionConfig = AttributionConfig(),
                        entropy_policy: PolicySnapshot | None = None) -> AttributionProfile:
    lls = prefix_log_likelihoods(judge, seg, cfg)
    scores = tuple(b - a for a, b in zip(lls, lls[1:]))
    ent = token_entropies(entropy_policy or judge, seg)
    step_ent = tuple(_reduce(ent[s.start:s.end], cfg.entropy_convention) for s in seg.steps)
    return AttributionProfile(scores, step_ent, lls[0], lls[-1])


def null_profile(policy: PolicySnapshot, seg: SegmentedTrajectory,
                 cfg: AttributionConfig = AttributionConfig()) -> AttributionProfile:
    """Profile for trajectories without an answer: zero attribution, real entropies."""
    ent = token_entropies(policy, seg)
    step_ent = tuple(_reduce(ent[s.start:s.end], cfg.entropy_convention) for s in seg.steps)
    return AttributionProfile(tuple(0.0 for _ in seg.steps), step_ent, 0.0, 0.0)
