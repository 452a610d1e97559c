"""Two-stage curriculum training of the toy policy.

Stage 1 explores (KL-free, uniform in-step credit, hotter sampling on hard
questions); stage 2 converges against the stage-1 snapshot with a K3 KL
penalty and confidence-weighted credit.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _pykernels
from .advantage import (
    STAGE1, STAGE2, AdvantageTensor, ModulationParams, confidence_multiplier, group_advantages,
    group_base_advantage, trajectory_advantages,
)
from .attribution import AttributionConfig, attribution_profile, null_profile
from .objective import ObjectiveConfig, objective_gradient
from .policy import (
    DEFAULT_VOCAB, RECHECK_MARKER, TERMINATOR, VALUE_MARKERS, ArithChainTask, PolicySnapshot, PriorConfig,
    SamplerConfig, base_policy, chain_consistent, generate_tasks, rollout_group, sample_trajectory, save_checkpoint,
    score_tokens,
)
from .segmentation import SegmentationConfig, segment_trajectory
from .trace import RolloutGroup, SegmentedTrajectory, Trajectory

log = logging.getLogger(__name__)

EASY, MEDIUM, HARD = "easy", "medium", "hard"
STAGE_NUMBER = {STAGE1: 1, STAGE2: 2}


FEATURE_BLOCKS = ("bias", "last", "rem", "arith", "ans", "wait", "pos")


class TrainingError(RuntimeError):
    pass


def trainable_rows(V: int, blocks: Sequence[str]) -> np.ndarray:
    """Boolean mask over feature rows of theta for the named blocks."""
    lay = _pykernels.layout(V)
    starts = [0, lay["last"], lay["rem"], lay["arith"], lay["ans"], lay["wait"], lay["pos"], lay["dim"]]
    mask = np.zeros(lay["dim"], dtype=bool)
    for name, lo, hi in zip(FEATURE_BLOCKS, starts, starts[1:]):
        if name in blocks:
            mask[lo:hi] = True
    return mask


def toy_segmentation_config() -> SegmentationConfig:
    return SegmentationConfig(
        entropy_quantile=0.5,
        marker_lexicon=frozenset((*VALUE_MARKERS, RECHECK_MARKER)),
        min_interval=2,
        boundary_token_ids=frozenset({DEFAULT_VOCAB.id(TERMINATOR)}),
    )


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    learning_rate: float = 50.0
    momentum: float = 0.0
    batch_questions: int = 16
    G: int = 8
    stage1_iters: int = 300
    stage2_iters: int = 300
    sampler1: SamplerConfig = SamplerConfig(temperature=1.0, top_p=0.95, max_len=24)
    sampler2: SamplerConfig = SamplerConfig(temperature=1.0, top_p=0.95, max_len=24)
    modulation: ModulationParams = ModulationParams()
    objective1: ObjectiveConfig = ObjectiveConfig(stage=STAGE1, kl_coeff=0.0)
    objective2: ObjectiveConfig = ObjectiveConfig(stage=STAGE2, kl_coeff=1.0)
    segmentation: SegmentationConfig = field(default_factory=toy_segmentation_config)
    attribution: AttributionConfig = AttributionConfig(answer_cue_len=1)
    prior: PriorConfig = PriorConfig()
    task_difficulty: int = 3
    n_train_tasks: int = 2048
    n_eval_tasks: int = 200
    curriculum: bool = True
    hard_temperature: float | None = 1.3
    probe_G: int = 8
    medium_fraction: float = 0.5
    fusion_cap: int = 2
    fusion_rollouts: int = 16
    rescore_between_stages: bool = True
    eval_k: int = 8
    eval_temperature: float = 0.8
    eval_top_p: float = 0.95
    # feature blocks updated by the optimizer; the rest of the prior stays frozen
    trainable: tuple[str, ...] = ("arith", "ans", "wait")
    # end stage 1 early once mean reward over the last window stops improving; 0 disables
    plateau_window: int = 0
    plateau_tol: float = 0.0

    def __post_init__(self):
        for name in ("batch_questions", "G", "probe_G", "n_train_tasks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.G < 2 or self.probe_G < 2:
            raise ValueError("group sizes must be >= 2")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        unknown = set(self.trainable) - set(FEATURE_BLOCKS)
        if unknown:
            raise ValueError(f"unknown feature blocks {sorted(unknown)}")
        if self.objective1.stage != STAGE1 or self.objective2.stage != STAGE2:
            raise ValueError("objective configs must match their stages")


def paper_preset(**overrides) -> TrainConfig:
    """Hyperparameters reported for the full-scale runs (lr 1e-6, batch 192, G=8)."""
    base = dict(learning_rate=1e-6, batch_questions=192, G=8, trainable=FEATURE_BLOCKS,
                sampler1=SamplerConfig(1.0, 0.95, 24), sampler2=SamplerConfig(1.0, 0.95, 24))
    base.update(overrides)
    return TrainConfig(**base)


def grpo_baseline(cfg: TrainConfig) -> TrainConfig:
    """Same budget, no attribution term, no curriculum, stage-1 objective throughout."""
    return replace(cfg, modulation=replace(cfg.modulation, alpha=0.0), curriculum=False,
                   stage1_iters=cfg.stage1_iters + cfg.stage2_iters, stage2_iters=0)


@dataclass(frozen=True)
class DifficultyRecord:
    question_id: str
    successes: int
    G: int
    bucket: str


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    stage: str
    mean_reward: float
    mean_policy_entropy: float
    mean_output_length: float
    objective: float
    kl_value: float

    def as_csv(self) -> list[str]:
        return [str(self.iteration), self.stage, repr(self.mean_reward), repr(self.mean_policy_entropy),
                repr(self.mean_output_length), repr(self.objective), repr(self.kl_value)]


METRICS_HEADER = ["iter", "stage", "mean_reward", "mean_entropy", "mean_len", "objective", "kl"]


def bucket_for(successes: int, G: int, medium_fraction: float = 0.5) -> str:
    if successes == 0:
        return HARD
    if successes < G * medium_fraction:
        return MEDIUM
    return EASY


def score_difficulty(policy: PolicySnapshot, task: ArithChainTask, G: int, sampler: SamplerConfig,
                     medium_fraction: float = 0.5) -> DifficultyRecord:
    group = rollout_group(policy, task, G, sampler)
    successes = int(sum(1 for m in group.members if m.reward == 1.0))
    return DifficultyRecord(task.id, successes, G, bucket_for(successes, G, medium_fraction))


def fuse_dataset_with_prefixes(hard_tasks: Sequence[ArithChainTask],
                               correct: dict[str, Sequence[Trajectory]], cap: int,
                               seg_cfg: SegmentationConfig) -> list[ArithChainTask]:
    """Prefix-augmented copies of hard tasks built from their correct trajectories.

    The first correct trajectory of each task contributes prefixes of 1..min(steps-1, cap)
    steps; the new tasks keep the original ground truth.
    """
    fused = []
    for task in hard_tasks:
        trajs = correct.get(task.id, ())
        if not trajs:
            continue
        t = trajs[0]
        if t.question != task.question:
            raise ValueError(f"trajectory {t.id} does not belong to task {task.id}")
        if t.reward != 1.0:
            raise ValueError(f"trajectory {t.id} is not verified correct")
        if t.reasoning_len < 1:
            continue
        seg = segment_trajectory(t, seg_cfg)
        ids = t.output_ids
        for j in range(1, min(len(seg.steps) - 1, cap) + 1):
            prefix = ids[: seg.steps[j - 1].end]
            fused.append(replace(task, id=f"{task.id}+p{j}", question=task.question + tuple(prefix),
                                 parent_id=task.id))
    return fused


@dataclass
class Curriculum:
    difficulty: dict[str, DifficultyRecord]
    fused: list[ArithChainTask]


def build_curriculum(policy: PolicySnapshot, tasks: Sequence[ArithChainTask], cfg: TrainConfig,
                     sampler: SamplerConfig, salt: int) -> Curriculum:
    records = {}
    correct: dict[str, list[Trajectory]] = {}
    hard = []
    for i, task in enumerate(tasks):
        if task.parent_id is not None:
            continue
        probe = replace(sampler, seed=_derive_seed(cfg.seed, salt, 0, i))
        rec = score_difficulty(policy, task, cfg.probe_G, probe, cfg.medium_fraction)
        records[task.id] = rec
        if rec.bucket == HARD:
            hard.append(task)
            temp = cfg.hard_temperature or sampler.temperature
            search = replace(sampler, temperature=temp, seed=_derive_seed(cfg.seed, salt, 1, i))
            group = rollout_group(policy, task, max(2, cfg.fusion_rollouts), search)
            # lucky guesses are common in the toy; only chain-consistent solutions donate prefixes
            correct[task.id] = [m for m in group.members if m.reward == 1.0 and chain_consistent(task, m)]
    fused = fuse_dataset_with_prefixes(hard, correct, cfg.fusion_cap, cfg.segmentation)
    return Curriculum(records, fused)


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0] >> 2)


def plan_iteration(pool_size: int, batch: int, seed: int, stage_no: int, it: int) -> tuple[np.ndarray, np.ndarray]:
    """(task indices, group seeds) for one iteration; shared by every trainer for reproducibility."""
    rng = np.random.default_rng([seed, stage_no, it])
    idx = rng.choice(pool_size, size=batch, replace=pool_size < batch)
    seeds = rng.integers(0, 2**62, size=batch)
    return idx, seeds


def segment_group(group: RolloutGroup, seg_cfg: SegmentationConfig) -> list[SegmentedTrajectory | None]:
    out = []
    for t in group.members:
        out.append(segment_trajectory(t, seg_cfg) if t.reasoning_len >= 1 else None)
    return out


def group_acpo_advantages(policy: PolicySnapshot, group: RolloutGroup, stage: str, cfg: TrainConfig,
                          judge: PolicySnapshot | None = None) -> list[AdvantageTensor]:
    judge = judge or policy
    segs = segment_group(group, cfg.segmentation)
    usable = [(k, s) for k, s in enumerate(segs) if s is not None]
    if len(usable) < len(segs):
        return _advantages_with_gaps(policy, group, segs, stage, cfg, judge)
    profiles = [
        attribution_profile(judge, s, cfg.attribution, entropy_policy=policy) if s.trajectory.answer_ids
        else null_profile(policy, s, cfg.attribution)
        for s in segs
    ]
    return group_advantages(segs, profiles, cfg.modulation, stage)


def _advantages_with_gaps(policy, group, segs, stage, cfg, judge):
    """Trajectories without a reasoning region receive the plain base advantage on every token."""
    bases = group_base_advantage(group.rewards)
    profiles = {}
    for k, s in enumerate(segs):
        if s is None:
            continue
        profiles[k] = (attribution_profile(judge, s, cfg.attribution, entropy_policy=policy)
                       if s.trajectory.answer_ids else null_profile(policy, s, cfg.attribution))
    all_h = [h for p in profiles.values() for h in p.step_entropies] or [0.0]
    Hmin, Hmax = min(all_h), max(all_h)
    out = []
    for k, (s, A) in enumerate(zip(segs, bases)):
        if s is not None:
            out.append(trajectory_advantages(s, profiles[k], A, Hmin, Hmax, cfg.modulation, stage))
            continue
        lps = group.members[k].logprobs
        tail = [A] * len(lps) if stage == STAGE1 else [A * confidence_multiplier(lp) for lp in lps]
        out.append(AdvantageTensor(A, (), (), tuple(tail), stage))
    return out


def _stage_objective(cfg: TrainConfig, stage: str) -> ObjectiveConfig:
    return cfg.objective1 if stage == STAGE1 else cfg.objective2


def _stage_sampler(cfg: TrainConfig, stage: str) -> SamplerConfig:
    return cfg.sampler1 if stage == STAGE1 else cfg.sampler2


def _dump_group(group: RolloutGroup) -> str:
    return json.dumps([{"id": m.id, "tokens": m.output_ids, "logprobs": m.logprobs, "reward": m.reward}
                       for m in group.members])


def reward_plateaued(rows: Sequence[MetricsRow], window: int, tol: float) -> bool:
    if window <= 0 or len(rows) < 2 * window:
        return False
    recent = sum(r.mean_reward for r in rows[-window:]) / window
    before = sum(r.mean_reward for r in rows[-2 * window:-window]) / window
    return recent - before <= tol


def run_stage(policy: PolicySnapshot, tasks: Sequence[ArithChainTask], stage: str, cfg: TrainConfig,
              ref: PolicySnapshot | None = None, difficulty: dict[str, DifficultyRecord] | None = None,
              iters: int | None = None, callback=None) -> tuple[PolicySnapshot, list[MetricsRow]]:
    if stage == STAGE2 and ref is None:
        raise ValueError("stage2 requires a reference policy")
    iters = (cfg.stage1_iters if stage == STAGE1 else cfg.stage2_iters) if iters is None else iters
    sampler = _stage_sampler(cfg, stage)
    obj_cfg = _stage_objective(cfg, stage)
    stage_no = STAGE_NUMBER[stage]
    theta = policy.theta.copy()
    velocity = np.zeros_like(theta)
    frozen = ~trainable_rows(len(policy.vocab), cfg.trainable)
    metrics: list[MetricsRow] = []
    difficulty = difficulty or {}
    for it in range(iters):
        snap = policy.with_theta(theta, f"{stage}-{it}")
        idx, seeds = plan_iteration(len(tasks), cfg.batch_questions, cfg.seed, stage_no, it)
        grad = np.zeros_like(theta)
        rewards, entropies, lengths = [], [], []
        objective = kl = 0.0
        B = len(idx)
        for b in range(B):
            task = tasks[int(idx[b])]
            temp = sampler.temperature
            rec = difficulty.get(task.id)
            if cfg.curriculum and cfg.hard_temperature and rec is not None and rec.bucket == HARD:
                temp = cfg.hard_temperature
            s_cfg = replace(sampler, temperature=temp, seed=int(seeds[b]))
            group = rollout_group(snap, task, cfg.G, s_cfg)
            advs = group_acpo_advantages(snap, group, stage, cfg)
            report, _ = objective_gradient(snap, group, advs, obj_cfg, temp, s_cfg.top_p, ref=ref, out=grad,
                                           scale=1.0 / B)
            if not (math.isfinite(report.value) and math.isfinite(report.kl_value)):
                raise TrainingError(f"non-finite objective at {stage} iteration {it}: {_dump_group(group)}")
            objective += report.value / B
            kl += report.kl_value / B
            for m in group.members:
                rewards.append(m.reward)
                lengths.append(len(m.output))
                if temp == 1.0:
                    entropies.extend(tok.entropy for tok in m.output)
                else:
                    # hot sampling widens the sampled distribution, not the policy
                    ctx = list(task.question) + m.output_ids
                    entropies.extend(score_tokens(snap, ctx, len(task.question))[2].tolist())
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient at {stage} iteration {it}")
        grad[frozen] = 0.0
        if cfg.momentum:
            velocity = cfg.momentum * velocity + grad
            theta = theta + cfg.learning_rate * velocity
        else:
            theta = theta + cfg.learning_rate * grad
        row = MetricsRow(it, stage, float(np.mean(rewards)), float(np.mean(entropies)), float(np.mean(lengths)),
                         objective, kl)
        metrics.append(row)
        if callback is not None:
            callback(row, policy.with_theta(theta, f"{stage}-{it + 1}"))
        if stage == STAGE1 and reward_plateaued(metrics, cfg.plateau_window, cfg.plateau_tol):
            log.info("stage1 reward plateau after %d iterations", it + 1)
            break
    final = policy.with_theta(theta, f"{stage}-final") if metrics else policy
    return final, metrics


def probe_entropy(policy: PolicySnapshot, tasks: Sequence[ArithChainTask], samples: int = 2,
                  temperature: float = 1.0, seed: int = 0, max_len: int = 24) -> float:
    """Mean per-token entropy of fresh samples on a fixed task set."""
    total, n = 0.0, 0
    for i, task in enumerate(tasks):
        cfg = SamplerConfig(temperature, 1.0, max_len, _derive_seed(seed, 11, i))
        for j in range(samples):
            t = sample_trajectory(policy, task, cfg, np.random.default_rng(cfg.seed + j))
            for tok in t.output:
                total += tok.entropy
                n += 1
    return total / n if n else 0.0


def evaluate_acc_at_k(policy: PolicySnapshot, tasks: Sequence[ArithChainTask], k: int = 8,
                      temperature: float = 0.8, top_p: float = 0.95, seed: int = 0, max_len: int = 24) -> float:
    """Fraction of tasks with at least one verified answer among k samples."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not tasks:
        return 0.0
    solved = 0
    for i, task in enumerate(tasks):
        cfg = SamplerConfig(temperature, top_p, max_len, _derive_seed(seed, 7, i))
        for j in range(k):
            t = sample_trajectory(policy, task, cfg, np.random.default_rng(cfg.seed + j))
            if t.reward == 1.0:
                solved += 1
                break
    return solved / len(tasks)


@dataclass
class TrainResult:
    policy: PolicySnapshot
    stage1_policy: PolicySnapshot
    metrics: list[MetricsRow]
    difficulty: dict[str, DifficultyRecord]
    fused: list[ArithChainTask]
    train_tasks: list[ArithChainTask]
    eval_tasks: list[ArithChainTask]


def make_tasks(cfg: TrainConfig) -> tuple[list[ArithChainTask], list[ArithChainTask]]:
    train = generate_tasks(cfg.n_train_tasks, cfg.task_difficulty, cfg.seed * 2 + 1, prefix="train")
    evals = generate_tasks(cfg.n_eval_tasks, cfg.task_difficulty, 10_000 + cfg.seed, prefix="eval")
    return train, evals


def train_two_stage(cfg: TrainConfig, out_dir: str | Path | None = None,
                    init: PolicySnapshot | None = None, callback=None) -> TrainResult:
    policy = init or base_policy(prior=cfg.prior)
    train, evals = make_tasks(cfg)
    pool = list(train)
    difficulty: dict[str, DifficultyRecord] = {}
    fused: list[ArithChainTask] = []
    if cfg.curriculum:
        cur = build_curriculum(policy, train, cfg, cfg.sampler1, salt=1)
        difficulty, fused = cur.difficulty, cur.fused
        pool = train + fused
    stage1, metrics = run_stage(policy, pool, STAGE1, cfg, difficulty=difficulty, callback=callback)
    final = stage1
    if cfg.stage2_iters:
        if cfg.curriculum and cfg.rescore_between_stages:
            cur = build_curriculum(stage1, train, cfg, cfg.sampler2, salt=2)
            difficulty = cur.difficulty
            fused = fused + cur.fused
            pool = train + fused
        final, m2 = run_stage(stage1, pool, STAGE2, cfg, ref=stage1, difficulty=difficulty, callback=callback)
        metrics = metrics + m2
    result = TrainResult(final, stage1, metrics, difficulty, fused, train, evals)
    if out_dir is not None:
        write_artifacts(result, out_dir)
    return result


def write_metrics(rows: Sequence[MetricsRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in rows:
            w.writerow(row.as_csv())


def task_to_dict(task: ArithChainTask) -> dict:
    return {"id": task.id, "seed_value": task.seed_value, "ops": [list(op) for op in task.ops],
            "question": list(task.question), "ground_truth": list(task.ground_truth), "parent_id": task.parent_id}


def task_from_dict(obj: dict) -> ArithChainTask:
    from .policy import QUESTION_END, chain_values

    ops = tuple((str(op), int(a)) for op, a in obj.get("ops", ()))
    seed_value = int(obj.get("seed_value", 0))
    if "question" in obj:
        question = tuple(int(x) for x in obj["question"])
    else:
        symbols = [str(seed_value)] + [s for op, a in ops for s in (op, str(a))] + [QUESTION_END]
        question = tuple(DEFAULT_VOCAB.encode(symbols))
    if "ground_truth" in obj:
        truth = tuple(int(x) for x in obj["ground_truth"])
    else:
        truth = (DEFAULT_VOCAB.id(str(chain_values(seed_value, ops)[-1])),)
    return ArithChainTask(str(obj["id"]), seed_value, ops, question, truth, obj.get("parent_id"))


def write_tasks(tasks: Sequence[ArithChainTask], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for task in tasks:
            fh.write(json.dumps(task_to_dict(task)) + "\n")


def read_tasks(path: str | Path) -> list[ArithChainTask]:
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                tasks.append(task_from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: invalid task record: {exc}") from exc
    return tasks


def write_artifacts(result: TrainResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    write_metrics(result.metrics, out / "metrics.csv")
    save_checkpoint(result.stage1_policy, out / "checkpoints" / "stage1_final.ckpt")
    save_checkpoint(result.policy, out / "checkpoints" / "stage2_final.ckpt")
    write_tasks(result.fused, out / "fused_tasks.jsonl")
    write_tasks(result.eval_tasks, out / "eval_tasks.jsonl")
    with open(out / "difficulty.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["question_id", "successes", "G", "bucket"])
        for rec in result.difficulty.values():
            w.writerow([rec.question_id, rec.successes, rec.G, rec.bucket])
