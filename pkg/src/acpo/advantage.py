"""Per-token advantages: group-normalized base, entropy/attribution modulation,
and stage-dependent broadcasting of step advantages onto tokens."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attribution import AttributionProfile
from .trace import SegmentedTrajectory

log = logging.getLogger(__name__)

STAGE1 = "stage1"
STAGE2 = "stage2"
STAGES = (STAGE1, STAGE2)


@dataclass(frozen=True)
class ModulationParams:
    beta: float = 0.3
    gamma: float = 0.2
    theta: float = 0.0
    alpha: float = 0.5

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass(frozen=True)
class AdvantageTensor:
    base: float
    step_adv: tuple[float, ...]
    token_adv: tuple[float, ...]
    answer_adv: tuple[float, ...]
    stage: str
    weights: tuple[float, ...] = ()

    def full(self) -> np.ndarray:
        """Advantages for every output token: reasoning region, then answer and trailing tokens."""
        return np.array(self.token_adv + self.answer_adv, dtype=np.float64)


def group_base_advantage(rewards: Sequence[float]) -> list[float]:
    """(R - mean) / population std; all zeros when the group has no spread."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("group needs at least two rewards")
    std = r.std()
    if std == 0.0:
        return [0.0] * r.size
    return ((r - r.mean()) / std).tolist()


def normalized_entropy(H: float, Hmin: float, Hmax: float) -> float:
    if Hmax == Hmin:
        return 0.0
    return (H - Hmin) / (Hmax - Hmin)


def modulation_weight(H: float, C: float, A_base: float, Hmin: float, Hmax: float, p: ModulationParams) -> float:
    h = normalized_entropy(H, Hmin, Hmax)
    if A_base > 0:
        if C >= p.theta:
            return 1.0 + p.beta * h
        return 1.0 - p.gamma * h
    if A_base < 0:
        return 1.0 - p.gamma * h
    return 1.0


def attr_diversity_advantage(A_base: float, C: float, w: float) -> float:
    return A_base * C * w


def final_step_advantage(A_base: float, A_attr_div: float, alpha: float) -> float:
    return A_base + alpha * A_attr_div


def confidence_multiplier(logprob: float) -> float:
    return 1.0 + math.exp(logprob)


def broadcast_token_advantages(seg: SegmentedTrajectory, step_advs: Sequence[float],
                               token_logprobs: Sequence[float], stage: str) -> list[float]:
    """Spread step advantages over the reasoning-region tokens.

    Stage 1 copies each step's advantage to its tokens; stage 2 scales by
    ``1 + p(token)`` so confident tokens carry more of the signal.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    region = seg.trajectory.reasoning_len
    if len(step_advs) != len(seg.steps):
        raise ValueError(f"{len(step_advs)} step advantages for {len(seg.steps)} steps")
    if len(token_logprobs) != region:
        raise ValueError(f"{len(token_logprobs)} token logprobs for a reasoning region of {region}")
    out = []
    for k, step in enumerate(seg.steps):
        a = step_advs[k]
        for t in range(step.start, step.end):
            out.append(a if stage == STAGE1 else a * confidence_multiplier(token_logprobs[t]))
    return out


def trajectory_advantages(seg: SegmentedTrajectory, profile: AttributionProfile, A_base: float,
                          Hmin: float, Hmax: float, params: ModulationParams, stage: str) -> AdvantageTensor:
    weights = []
    step_advs = []
    for C, H in zip(profile.scores, profile.step_entropies):
        w = modulation_weight(H, C, A_base, Hmin, Hmax, params)
        weights.append(w)
        step_advs.append(final_step_advantage(A_base, attr_diversity_advantage(A_base, C, w), params.alpha))
    t = seg.trajectory
    logprobs = t.logprobs
    region = t.reasoning_len
    token_adv = broadcast_token_advantages(seg, step_advs, logprobs[:region], stage)
    tail = logprobs[region:]
    if stage == STAGE1:
        answer_adv = [A_base] * len(tail)
    else:
        answer_adv = [A_base * confidence_multiplier(lp) for lp in tail]
    return AdvantageTensor(A_base, tuple(step_advs), tuple(token_adv), tuple(answer_adv), stage, tuple(weights))


def group_advantages(segs: Sequence[SegmentedTrajectory], profiles: Sequence[AttributionProfile],
                     params: ModulationParams, stage: str) -> list[AdvantageTensor]:
    """Advantages for one rollout group; entropy normalization spans the group's steps."""
    rewards = [0.0 if s.trajectory.reward is None else s.trajectory.reward for s in segs]
    bases = group_base_advantage(rewards)
    all_h = [h for prof in profiles for h in prof.step_entropies]
    Hmin, Hmax = min(all_h), max(all_h)
    out = []
    flipped = 0
    for seg, prof, A in zip(segs, profiles, bases):
        if A < 0:
            flipped += sum(1 for c in prof.scores if c < params.theta and c < 0)
        out.append(trajectory_advantages(seg, prof, A, Hmin, Hmax, params, stage))
    if flipped and log.isEnabledFor(logging.DEBUG):
        log.debug("%d steps with negative attribution in failed trajectories received positive attr-div", flipped)
    return out
