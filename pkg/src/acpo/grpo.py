"""Plain GRPO trainer used as an equivalence reference.

Deliberately independent of the segmentation, attribution and advantage
modules: trajectory-level group-normalized advantages, clipped ratio,
per-token log-gradients summed directly. Shares only the sampler and the
iteration plan so runs are comparable seed for seed.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Sequence

import numpy as np

from .policy import ArithChainTask, PolicySnapshot, policy_log_gradient, rollout_group, score_tokens
from .trainer import TrainConfig, plan_iteration, trainable_rows


def normalized_rewards(rewards: Sequence[float]) -> list[float]:
    n = len(rewards)
    mean = sum(rewards) / n
    var = sum((r - mean) ** 2 for r in rewards) / n
    if var == 0.0:
        return [0.0] * n
    std = math.sqrt(var)
    return [(r - mean) / std for r in rewards]


def grpo_step_gradient(policy: PolicySnapshot, task: ArithChainTask, seed: int, cfg: TrainConfig) -> np.ndarray:
    sampler = replace(cfg.sampler1, seed=seed)
    group = rollout_group(policy, task, cfg.G, sampler)
    adv = normalized_rewards([m.reward for m in group.members])
    eps = cfg.objective1.epsilon
    grad = np.zeros_like(policy.theta)
    for traj, a in zip(group.members, adv):
        ctx = list(traj.question) + traj.output_ids
        start = len(traj.question)
        new_lp, _, _ = score_tokens(policy, ctx, start, sampler.temperature, sampler.top_p)
        n = len(traj.output)
        for t in range(n):
            ratio = math.exp(float(new_lp[t]) - traj.output[t].logprob)
            # gradient flows only through the unclipped branch of min(r A, clip(r) A)
            if (a > 0 and ratio > 1 + eps) or (a < 0 and ratio < 1 - eps):
                continue
            g = policy_log_gradient(policy, ctx[: start + t], ctx[start + t], sampler.temperature, sampler.top_p)
            grad += (a * ratio / (cfg.G * n)) * g
    return grad


def train_grpo(policy: PolicySnapshot, tasks: Sequence[ArithChainTask], cfg: TrainConfig,
               iters: int) -> list[PolicySnapshot]:
    """Snapshots after each update."""
    mask = trainable_rows(len(policy.vocab), cfg.trainable)
    snaps = []
    theta = policy.theta.copy()
    for it in range(iters):
        snap = policy.with_theta(theta, f"grpo-{it}")
        idx, seeds = plan_iteration(len(tasks), cfg.batch_questions, cfg.seed, 1, it)
        grad = np.zeros_like(theta)
        for i, s in zip(idx, seeds):
            grad += grpo_step_gradient(snap, tasks[int(i)], int(s), cfg) / len(idx)
        grad[~mask] = 0.0
        theta = theta + cfg.learning_rate * grad
        snaps.append(policy.with_theta(theta, f"grpo-{it + 1}"))
    return snaps
