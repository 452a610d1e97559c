"""Paired ACPO vs GRPO comparison over seeds on the toy arithmetic tasks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import stats

from .advantage import STAGE1
from .trainer import TrainConfig, evaluate_acc_at_k, grpo_baseline, probe_entropy, train_two_stage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunSummary:
    seed: int
    acc: float
    probe_entropy: float
    batch_entropy: float
    final_reward: float


@dataclass(frozen=True)
class Comparison:
    acpo: tuple[RunSummary, ...]
    grpo: tuple[RunSummary, ...]
    p_value: float

    @property
    def acc_margin(self) -> float:
        return float(np.mean([r.acc for r in self.acpo]) - np.mean([r.acc for r in self.grpo]))

    @property
    def entropy_margin(self) -> float:
        """Training-batch entropy (the logged metric), ACPO minus GRPO."""
        return float(np.mean([r.batch_entropy for r in self.acpo]) - np.mean([r.batch_entropy for r in self.grpo]))

    @property
    def probe_entropy_margin(self) -> float:
        """Same comparison on a shared probe set of original tasks."""
        return float(np.mean([r.probe_entropy for r in self.acpo]) - np.mean([r.probe_entropy for r in self.grpo]))


def run_one(cfg: TrainConfig, probe_at: int, probe_tasks: int = 100) -> RunSummary:
    """Train, then report Acc@k and entropy of the snapshot after ``probe_at`` stage-1 updates."""
    seen = {}

    def grab(row, snap):
        if row.stage == STAGE1 and row.iteration == probe_at - 1:
            seen["snap"], seen["row"] = snap, row

    res = train_two_stage(cfg, callback=grab)
    if "snap" not in seen:
        raise ValueError(f"stage 1 ran fewer than {probe_at} iterations")
    probe = [t for t in res.train_tasks if t.parent_id is None][:probe_tasks]
    acc = evaluate_acc_at_k(res.policy, res.eval_tasks, cfg.eval_k, cfg.eval_temperature, cfg.eval_top_p,
                            seed=cfg.seed)
    tail = res.metrics[-20:]
    return RunSummary(cfg.seed, acc, probe_entropy(seen["snap"], probe, seed=cfg.seed),
                      seen["row"].mean_policy_entropy, float(np.mean([m.mean_reward for m in tail])))


def compare(cfg: TrainConfig, seeds: Sequence[int]) -> Comparison:
    probe_at = max(1, cfg.stage1_iters // 4)
    acpo, grpo = [], []
    for seed in seeds:
        c = replace(cfg, seed=seed)
        acpo.append(run_one(c, probe_at))
        grpo.append(run_one(grpo_baseline(c), probe_at))
        log.info("seed %d: acpo %s grpo %s", seed, acpo[-1], grpo[-1])
    a = np.array([r.acc for r in acpo])
    b = np.array([r.acc for r in grpo])
    if np.all(a == b):
        p = 1.0
    else:
        p = float(stats.ttest_rel(a, b, alternative="greater").pvalue)
    return Comparison(tuple(acpo), tuple(grpo), p)
