import csv
import math
from dataclasses import replace

import numpy as np
import pytest

import acpo.trainer as trainer
from acpo.advantage import STAGE1, STAGE2
from acpo.objective import ObjectiveReport
from acpo.policy import (
    DEFAULT_VOCAB, EOS, ArithChainTask, SamplerConfig, chain_values, generate_tasks, load_checkpoint,
    verify_answer,
)
from acpo.trace import TokenRecord, Trajectory
from acpo.trainer import (
    EASY, HARD, MEDIUM, METRICS_HEADER, DifficultyRecord, MetricsRow, TrainConfig, TrainingError, bucket_for,
    build_curriculum, evaluate_acc_at_k, fuse_dataset_with_prefixes, grpo_baseline, paper_preset, read_tasks,
    reward_plateaued, run_stage, score_difficulty, toy_segmentation_config, train_two_stage, trainable_rows,
    write_tasks,
)
from conftest import scripted_policy

SMALL = TrainConfig(batch_questions=3, G=4, stage1_iters=3, stage2_iters=2, n_train_tasks=24, n_eval_tasks=8,
                    probe_G=4, fusion_rollouts=4)


def task_with_truth(truth, n=5, difficulty=2):
    out = [t for t in generate_tasks(400, difficulty, 1) if DEFAULT_VOCAB.text(t.ground_truth[0]) == str(truth)]
    return out[:n]


def forced(task, words, reward=1.0, traj_id="f", entropies=None):
    ids = DEFAULT_VOCAB.encode(words)
    a = words.index("answer") + 1
    b = words.index(EOS) if EOS in words else len(words)
    ent = entropies or [None] * len(words)
    out = tuple(TokenRecord(i, w, -0.1, h) for i, w, h in zip(ids, words, ent))
    t = Trajectory(traj_id, task.question, out, (a, b))
    return t.with_reward(reward)


def test_bucket_boundaries():
    assert bucket_for(0, 8) == HARD
    assert bucket_for(8, 8) == EASY
    assert bucket_for(2, 8) == MEDIUM
    assert bucket_for(4, 8) == EASY
    assert bucket_for(4, 8, medium_fraction=0.75) == MEDIUM


def test_score_difficulty_extremes():
    task = task_with_truth(7, 1)[0]
    perfect = scripted_policy({"?": ["answer"], "answer": ["7"], "7": [EOS]})
    mute = scripted_policy({"?": [EOS]})
    assert score_difficulty(perfect, task, 8, SamplerConfig()) == DifficultyRecord(task.id, 8, 8, EASY)
    assert score_difficulty(mute, task, 8, SamplerConfig()).bucket == HARD


def three_step_task():
    ops = (("+", 3), ("*", 3), ("-", 2))
    q = DEFAULT_VOCAB.encode(["4", "+", "3", "*", "3", "-", "2", "?"])
    truth = chain_values(4, ops)  # 4, 7, 1, 9
    return ArithChainTask("h0", 4, ops, tuple(q), (DEFAULT_VOCAB.id(str(truth[-1])),)), truth


def test_fusion_enumerates_prefixes():
    task, truth = three_step_task()
    words = ["first", str(truth[1]), ".", "so", str(truth[2]), ".", "then", str(truth[3]), ".", "answer",
             str(truth[3]), EOS]
    ent = [0.1] * len(words)
    ent[3] = ent[6] = 2.0  # "so" and "then" open steps two and three
    correct = forced(task, words, entropies=ent)
    seg_cfg = toy_segmentation_config()
    fused = fuse_dataset_with_prefixes([task], {task.id: [correct]}, 2, seg_cfg)
    assert [f.id for f in fused] == ["h0+p1", "h0+p2"]
    assert fused[0].question == task.question + tuple(DEFAULT_VOCAB.encode(["first", "7", "."]))
    assert fused[1].question == task.question + tuple(DEFAULT_VOCAB.encode(["first", "7", ".", "so", "1", "."]))
    for f in fused:
        assert f.ground_truth == task.ground_truth
        assert f.parent_id == task.id
    # never the full trajectory: at most steps - 1 prefixes
    assert len(fuse_dataset_with_prefixes([task], {task.id: [correct]}, 5, seg_cfg)) == 2
    assert len(fuse_dataset_with_prefixes([task], {task.id: [correct]}, 1, seg_cfg)) == 1
    assert fuse_dataset_with_prefixes([task], {}, 2, seg_cfg) == []
    assert fuse_dataset_with_prefixes([task], {task.id: []}, 2, seg_cfg) == []


def test_fusion_rejects_mismatch_and_incorrect():
    task, truth = three_step_task()
    other = generate_tasks(1, 3, 5)[0]
    words = ["first", "7", ".", "so", "1", ".", "answer", "9", EOS]
    with pytest.raises(ValueError, match="does not belong"):
        fuse_dataset_with_prefixes([task], {task.id: [forced(other, words)]}, 2, toy_segmentation_config())
    with pytest.raises(ValueError, match="not verified"):
        fuse_dataset_with_prefixes([task], {task.id: [forced(task, words, reward=0.0)]}, 2,
                                   toy_segmentation_config())


def test_easy_tasks_are_not_fused():
    tasks = task_with_truth(7, 4)
    perfect = scripted_policy({"?": ["answer"], "answer": ["7"], "7": [EOS]})
    cur = build_curriculum(perfect, tasks, SMALL, SamplerConfig(), salt=1)
    assert all(r.bucket == EASY for r in cur.difficulty.values())
    assert cur.fused == []


def test_fused_tasks_are_sound(prior):
    cfg = replace(SMALL, n_train_tasks=64, fusion_rollouts=16)
    tasks = generate_tasks(64, 3, 2)
    cur = build_curriculum(prior, tasks, cfg, cfg.sampler1, salt=1)
    assert cur.fused, "expected at least one fused task from 64 hard-ish questions"
    by_id = {t.id: t for t in tasks}
    for f in cur.fused:
        parent = by_id[f.parent_id]
        assert cur.difficulty[parent.id].bucket == HARD
        assert f.ground_truth == parent.ground_truth
        assert f.question[: len(parent.question)] == parent.question
        # a trajectory that states the parent's truth right away verifies against the fused task
        t = forced(f, ["answer", DEFAULT_VOCAB.text(parent.ground_truth[0]), EOS])
        assert verify_answer(f, t) == 1.0


def test_zero_iterations_return_input(prior):
    pol, rows = run_stage(prior, generate_tasks(4, 3, 0), STAGE1, SMALL, iters=0)
    assert pol is prior
    assert rows == []


def test_stage2_needs_reference(prior):
    with pytest.raises(ValueError):
        run_stage(prior, generate_tasks(4, 3, 0), STAGE2, SMALL, iters=1)


def test_metrics_rows_and_ranges(prior):
    tasks = generate_tasks(12, 3, 0)
    pol, rows = run_stage(prior, tasks, STAGE1, SMALL, iters=3)
    assert [r.iteration for r in rows] == [0, 1, 2]
    for r in rows:
        assert 0 <= r.mean_policy_entropy <= math.log(len(DEFAULT_VOCAB))
        assert 0 <= r.mean_reward <= 1
        assert r.kl_value == 0.0
    frozen = ~trainable_rows(len(DEFAULT_VOCAB), SMALL.trainable)
    assert np.array_equal(pol.theta[frozen], prior.theta[frozen])
    assert not np.array_equal(pol.theta, prior.theta)


def test_non_finite_objective_aborts(prior, monkeypatch):
    def bad(policy, group, adv, cfg, *a, out=None, **k):
        return ObjectiveReport(float("nan")), out

    monkeypatch.setattr(trainer, "objective_gradient", bad)
    with pytest.raises(TrainingError, match="non-finite objective"):
        run_stage(prior, generate_tasks(4, 3, 0), STAGE1, SMALL, iters=1)


def test_plateau_rule():
    rows = [MetricsRow(i, STAGE1, r, 1.0, 5.0, 0.0, 0.0) for i, r in enumerate([0.1, 0.2, 0.3, 0.3, 0.3, 0.3])]
    assert not reward_plateaued(rows[:4], 2, 0.0)
    assert reward_plateaued(rows, 2, 0.0)
    assert not reward_plateaued(rows, 0, 0.0)


def test_plateau_stops_stage1(prior):
    cfg = replace(SMALL, plateau_window=1, plateau_tol=10.0)
    _, rows = run_stage(prior, generate_tasks(8, 3, 0), STAGE1, cfg, iters=5)
    assert len(rows) == 2


def test_two_stage_run_and_artifacts(tmp_path, monkeypatch):
    seen = {}
    real = trainer.run_stage

    def spy(policy, tasks, stage, cfg, ref=None, **kw):
        if stage == STAGE2:
            seen["ref"] = ref
        return real(policy, tasks, stage, cfg, ref=ref, **kw)

    monkeypatch.setattr(trainer, "run_stage", spy)
    res = train_two_stage(SMALL, out_dir=tmp_path)
    assert len(res.metrics) == SMALL.stage1_iters + SMALL.stage2_iters
    assert [r.stage for r in res.metrics] == [STAGE1] * 3 + [STAGE2] * 2
    ckpt1 = load_checkpoint(tmp_path / "checkpoints" / "stage1_final.ckpt")
    assert np.array_equal(seen["ref"].theta, ckpt1.theta)
    assert np.array_equal(load_checkpoint(tmp_path / "checkpoints" / "stage2_final.ckpt").theta, res.policy.theta)
    with open(tmp_path / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == METRICS_HEADER
    assert len(rows) == 6
    assert (tmp_path / "fused_tasks.jsonl").exists()
    with open(tmp_path / "difficulty.csv", newline="") as fh:
        assert next(csv.reader(fh)) == ["question_id", "successes", "G", "bucket"]


def test_stage2_zero_equals_stage1():
    res = train_two_stage(replace(SMALL, stage2_iters=0))
    assert res.policy is res.stage1_policy
    assert len(res.metrics) == SMALL.stage1_iters


def test_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    train_two_stage(SMALL, out_dir=a)
    train_two_stage(SMALL, out_dir=b)
    for name in ("checkpoints/stage1_final.ckpt", "checkpoints/stage2_final.ckpt", "metrics.csv",
                 "fused_tasks.jsonl", "difficulty.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_acc_at_k_extremes():
    tasks = task_with_truth(7, 5)
    perfect = scripted_policy({"?": ["answer"], "answer": ["7"], "7": [EOS]})
    mute = scripted_policy({"?": [EOS]})
    assert evaluate_acc_at_k(perfect, tasks) == 1.0
    assert evaluate_acc_at_k(mute, tasks) == 0.0
    assert evaluate_acc_at_k(mute, []) == 0.0
    with pytest.raises(ValueError):
        evaluate_acc_at_k(perfect, tasks, k=0)


def test_task_files_round_trip(tmp_path):
    tasks = generate_tasks(5, 3, 1)
    p = tmp_path / "t.jsonl"
    write_tasks(tasks, p)
    assert read_tasks(p) == tasks
    p.write_text('{"id": "a", "seed_value": 3, "ops": [["+", 4]]}\n{"oops": 1}\n')
    with pytest.raises(ValueError, match="line 2"):
        read_tasks(p)
    p.write_text('{"id": "a", "seed_value": 3, "ops": [["+", 4]]}\n')
    assert read_tasks(p)[0].ground_truth == (DEFAULT_VOCAB.id("7"),)


def test_presets_and_validation():
    p = paper_preset()
    assert (p.learning_rate, p.batch_questions, p.G) == (1e-6, 192, 8)
    g = grpo_baseline(SMALL)
    assert g.modulation.alpha == 0.0 and not g.curriculum
    assert g.stage1_iters == 5 and g.stage2_iters == 0
    for bad in (dict(G=1), dict(batch_questions=0), dict(stage1_iters=-1), dict(trainable=("nope",))):
        with pytest.raises(ValueError):
            replace(SMALL, **bad)
