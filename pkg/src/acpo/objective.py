"""Clipped surrogate objectives for both training stages and their gradients.

Stage 1 is KL-free. Stage 2 subtracts ``kl_coeff`` times the K3 estimate
of KL(pi_theta || pi_ref), averaged with the same (1/G)(1/|o|) weights as
the surrogate. Advantages and old/reference log-probabilities are
constants under differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .advantage import STAGE1, STAGE2, STAGES, AdvantageTensor
from .policy import PolicySnapshot, accumulate_log_gradient, score_tokens
from .trace import RolloutGroup


@dataclass(frozen=True)
class ObjectiveConfig:
    epsilon: float = 0.2
    kl_coeff: float = 1.0
    stage: str = STAGE1

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must be in (0, 1)")
        if self.kl_coeff < 0:
            raise ValueError("kl_coeff must be >= 0")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")


@dataclass
class ObjectiveReport:
    value: float
    kl_value: float = 0.0
    ratios: list[np.ndarray] = field(default_factory=list)
    clipped: list[np.ndarray] = field(default_factory=list)

    @property
    def clip_fraction(self) -> float:
        n = sum(c.size for c in self.clipped)
        return float(sum(c.sum() for c in self.clipped) / n) if n else 0.0


def prob_ratio(logp_new: float, logp_old: float) -> float:
    return math.exp(logp_new - logp_old)


def clipped_surrogate_term(ratio: float, adv: float, epsilon: float) -> float:
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * adv, clipped * adv)


def k3_kl_estimator(logp_theta: float, logp_ref: float) -> float:
    """r - log r - 1 with r = pi_ref / pi_theta; non-negative."""
    log_r = logp_ref - logp_theta
    return math.exp(log_r) - log_r - 1.0


def _check(group: RolloutGroup, adv: Sequence[AdvantageTensor], *per_token):
    if len(adv) != len(group):
        raise ValueError(f"{len(adv)} advantage tensors for a group of {len(group)}")
    for arrays in per_token:
        if len(arrays) != len(group):
            raise ValueError("per-token inputs must have one entry per trajectory")
        for traj, a in zip(group.members, arrays):
            if len(a) != len(traj.output):
                raise ValueError(f"trajectory {traj.id}: {len(a)} values for {len(traj.output)} tokens")
    for traj, a in zip(group.members, adv):
        if len(a.token_adv) + len(a.answer_adv) != len(traj.output):
            raise ValueError(f"trajectory {traj.id}: advantages misaligned with output")


def _surrogate(group, adv, logp_new, logp_old, epsilon):
    G = len(group)
    total = 0.0
    ratios, clipped = [], []
    for j in range(G):
        a = adv[j].full()
        r = np.exp(np.asarray(logp_new[j], dtype=np.float64) - np.asarray(logp_old[j], dtype=np.float64))
        rc = np.clip(r, 1.0 - epsilon, 1.0 + epsilon)
        unclipped = r * a
        terms = np.minimum(unclipped, rc * a)
        ratios.append(r)
        clipped.append(unclipped > rc * a)
        s = 0.0
        for x in terms:
            s += float(x)
        total += s / len(a)
    return total / G, ratios, clipped


def _mean_k3(group, logp_theta, logp_ref):
    G = len(group)
    total = 0.0
    for j in range(G):
        lt = np.asarray(logp_theta[j], dtype=np.float64)
        lr = np.asarray(logp_ref[j], dtype=np.float64)
        log_r = lr - lt
        k3 = np.exp(log_r) - log_r - 1.0
        s = 0.0
        for x in k3:
            s += float(x)
        total += s / len(k3)
    return total / G


def stage1_objective(group: RolloutGroup, adv: Sequence[AdvantageTensor], logp_new, logp_old,
                     cfg: ObjectiveConfig) -> ObjectiveReport:
    if cfg.stage != STAGE1:
        raise ValueError("stage1_objective needs a stage1 config")
    _check(group, adv, logp_new, logp_old)
    value, ratios, clipped = _surrogate(group, adv, logp_new, logp_old, cfg.epsilon)
    return ObjectiveReport(value, 0.0, ratios, clipped)


def stage2_objective(group: RolloutGroup, adv: Sequence[AdvantageTensor], logp_new, logp_old, logp_ref,
                     cfg: ObjectiveConfig, logp_new_full=None) -> ObjectiveReport:
    """``logp_new_full`` (untruncated) feeds the KL term; defaults to ``logp_new``."""
    if cfg.stage != STAGE2:
        raise ValueError("stage2_objective needs a stage2 config")
    logp_new_full = logp_new if logp_new_full is None else logp_new_full
    _check(group, adv, logp_new, logp_old, logp_ref, logp_new_full)
    value, ratios, clipped = _surrogate(group, adv, logp_new, logp_old, cfg.epsilon)
    kl = _mean_k3(group, logp_new_full, logp_ref)
    return ObjectiveReport(value - cfg.kl_coeff * kl, kl, ratios, clipped)


def _contexts(group: RolloutGroup):
    for traj in group.members:
        yield list(traj.question) + traj.output_ids, len(traj.question)


def score_group(policy: PolicySnapshot, group: RolloutGroup, temperature: float, top_p: float):
    """(nucleus logprobs, full logprobs) per trajectory under ``policy``."""
    nuc, full = [], []
    for ctx, start in _contexts(group):
        lpn, lpf, _ = score_tokens(policy, ctx, start, temperature, top_p)
        nuc.append(lpn)
        full.append(lpf)
    return nuc, full


def _evaluate(policy, group, adv, cfg, temperature, top_p, ref):
    logp_old = [traj.logprobs for traj in group.members]
    nuc, full = score_group(policy, group, temperature, top_p)
    if cfg.stage == STAGE1:
        return stage1_objective(group, adv, nuc, logp_old, cfg), full, None
    if ref is None:
        raise ValueError("stage2 needs a reference policy")
    _, ref_full = score_group(ref, group, temperature, top_p)
    return stage2_objective(group, adv, nuc, logp_old, ref_full, cfg, logp_new_full=full), full, ref_full


def evaluate_objective(policy: PolicySnapshot, group: RolloutGroup, adv: Sequence[AdvantageTensor],
                       cfg: ObjectiveConfig, temperature: float = 1.0, top_p: float = 1.0,
                       ref: PolicySnapshot | None = None) -> ObjectiveReport:
    return _evaluate(policy, group, adv, cfg, temperature, top_p, ref)[0]


def objective_gradient(policy: PolicySnapshot, group: RolloutGroup, adv: Sequence[AdvantageTensor],
                       cfg: ObjectiveConfig, temperature: float = 1.0, top_p: float = 1.0,
                       ref: PolicySnapshot | None = None, out: np.ndarray | None = None,
                       scale: float = 1.0) -> tuple[ObjectiveReport, np.ndarray]:
    """Exact gradient of the group objective w.r.t. policy parameters.

    Accumulates ``scale * grad`` into ``out`` when given. Tokens whose min
    picks the clipped branch contribute nothing through the ratio.
    """
    report, new_full, ref_full = _evaluate(policy, group, adv, cfg, temperature, top_p, ref)
    grad = np.zeros_like(policy.theta) if out is None else out
    G = len(group)
    for j, (ctx, start) in enumerate(_contexts(group)):
        a = adv[j].full()
        r = report.ratios[j]
        weight = scale / (G * len(a))
        coef_nuc = np.where(report.clipped[j], 0.0, weight * a * r)
        coef_full = None
        if cfg.stage == STAGE2 and cfg.kl_coeff != 0.0:
            r_kl = np.exp(np.asarray(ref_full[j]) - np.asarray(new_full[j]))
            coef_full = -cfg.kl_coeff * weight * (1.0 - r_kl)
        accumulate_log_gradient(policy, ctx, start, grad, coef_nucleus=coef_nuc, coef_full=coef_full,
                                temperature=temperature, top_p=top_p)
    return report, grad
