"""Command-line entry point: ``acpo {train,eval,analyze-trace,verify-math,report}``.

Exit codes: 0 success, 1 validation error (bad flags, inputs or configs),
2 runtime failure. Errors go to stderr prefixed with ``acpo-error:``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import IO, Sequence

from . import __version__
from .advantage import ModulationParams, group_base_advantage, modulation_weight
from .attribution import AttributionConfig, AttributionProfile, attribution_profile
from .config import ConfigError, load_config
from .infotheory import verify_math
from .policy import load_checkpoint
from .segmentation import SegmentationConfig, load_marker_lexicon, segment_trajectory
from .trace import SegmentedTrajectory, TraceError, load_trace
from .trainer import METRICS_HEADER, evaluate_acc_at_k, read_tasks, train_two_stage

log = logging.getLogger("acpo")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
PLOT_COLUMNS = (("reward", "mean_reward"), ("entropy", "mean_entropy"), ("length", "mean_len"))


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _configure_logging() -> None:
    level = os.environ.get("ACPO_LOG", "error").strip().lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if level not in LOG_LEVELS:
        log.error("ignoring ACPO_LOG=%r; expected one of %s", level, ", ".join(LOG_LEVELS))


def write_segments(out: IO[str], seg: SegmentedTrajectory, profile: AttributionProfile | None = None,
                   weights: Sequence[float] | None = None) -> None:
    steps = []
    for k, s in enumerate(seg.steps):
        step = {"start": s.start, "end": s.end}
        if profile is not None:
            step["c_attr"] = profile.scores[k]
            step["h_cond"] = profile.step_entropies[k]
            if weights is not None:
                step["w"] = weights[k]
        steps.append(step)
    out.write(json.dumps({"id": seg.trajectory.id, "boundaries": seg.boundaries, "steps": steps}) + "\n")


def read_metrics(path: str | Path) -> list[list[str]]:
    """Rows of a metrics CSV as raw strings; header checked, numbers validated."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []
    header = rows[0]
    if header != METRICS_HEADER:
        raise ValidationError(f"{path}: row 1: expected header {','.join(METRICS_HEADER)}")
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(METRICS_HEADER):
            raise ValidationError(f"{path}: row {n}: expected {len(METRICS_HEADER)} columns, got {len(row)}")
        try:
            int(row[0])
            for v in row[2:]:
                float(v)
        except ValueError as exc:
            raise ValidationError(f"{path}: row {n}: {exc}") from exc
    return rows[1:]


def write_report(metrics_path: str | Path, out_dir: str | Path) -> list[Path]:
    rows = read_metrics(metrics_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, column in PLOT_COLUMNS:
        col = METRICS_HEADER.index(column)
        path = out / f"{name}.tsv"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in rows:
                fh.write(f"{row[0]}\t{row[col]}\n")
        written.append(path)
    return written


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    res = train_two_stage(cfg, out_dir=args.out)
    acc = evaluate_acc_at_k(res.policy, res.eval_tasks, cfg.eval_k, cfg.eval_temperature, cfg.eval_top_p,
                            seed=cfg.seed)
    with open(Path(args.out) / "summary.json", "w", encoding="utf-8") as fh:
        json.dump({"seed": cfg.seed, "iterations": len(res.metrics), "fused_tasks": len(res.fused),
                   f"acc_at_{cfg.eval_k}": acc}, fh, indent=2)
        fh.write("\n")
    print(f"trained {len(res.metrics)} iterations; acc@{cfg.eval_k} = {acc:.4f}; outputs in {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    if args.k < 1:
        raise ValidationError("--k must be >= 1")
    policy = load_checkpoint(args.checkpoint)
    tasks = read_tasks(args.tasks)
    acc = evaluate_acc_at_k(policy, tasks, args.k, args.temperature, args.top_p, seed=args.seed or 0)
    print(f"acc@{args.k} = {acc:.4f} over {len(tasks)} tasks")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"k": args.k, "temperature": args.temperature, "top_p": args.top_p, "tasks": len(tasks),
                       "acc": acc}, fh)
            fh.write("\n")
    return EXIT_OK


def _group_weights(segs, profiles, params: ModulationParams) -> dict[int, list[float]]:
    """Modulation weights for trajectories that share a question with at least one rewarded peer."""
    groups: dict[tuple, list[int]] = {}
    for k, seg in enumerate(segs):
        groups.setdefault(seg.trajectory.question, []).append(k)
    weights = {}
    for members in groups.values():
        if len(members) < 2 or any(segs[k].trajectory.reward is None for k in members):
            continue
        bases = group_base_advantage([segs[k].trajectory.reward for k in members])
        hs = [h for k in members for h in profiles[k].step_entropies]
        lo, hi = min(hs), max(hs)
        for k, A in zip(members, bases):
            prof = profiles[k]
            weights[k] = [modulation_weight(h, c, A, lo, hi, params)
                          for c, h in zip(prof.scores, prof.step_entropies)]
    return weights


def _cmd_analyze(args) -> int:
    markers = load_marker_lexicon(args.markers)
    with open(args.input, "rb") as fh:
        trajectories = load_trace(fh)
    boundary_texts = set(args.boundary_tokens or ())
    boundary_ids = {tok.token_id for t in trajectories for tok in t.output if tok.text.strip() in boundary_texts}
    seg_cfg = SegmentationConfig(args.quantile, markers, args.min_interval, frozenset(boundary_ids))
    segs = [segment_trajectory(t, seg_cfg) for t in trajectories]
    profiles = weights = None
    if args.checkpoint:
        judge = load_checkpoint(args.checkpoint)
        attr_cfg = AttributionConfig(answer_cue_len=args.answer_cue_len)
        for t in trajectories:
            bad = [i for i in (*t.question, *t.output_ids) if not 0 <= i < len(judge.vocab)]
            if bad:
                raise ValidationError(f"trajectory {t.id}: token id {bad[0]} outside the judge vocabulary")
        profiles = [attribution_profile(judge, s, attr_cfg) for s in segs]
        weights = _group_weights(segs, profiles, ModulationParams())
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8", newline="\n") as out:
        for k, seg in enumerate(segs):
            write_segments(out, seg, profiles[k] if profiles else None, weights.get(k) if weights else None)
    print(f"segmented {len(segs)} trajectories -> {args.out}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    if args.samples < 1:
        raise ValidationError("--samples must be >= 1")
    report = verify_math(args.samples, seed=args.seed or 0)
    lines = [
        f"joints checked: {report.joints_checked} (bound failures {report.joint_failures}, "
        f"identity failures {report.identity_failures}, symmetry failures {report.symmetry_failures})",
        f"entropy chains checked: {report.chains_checked} of {report.chains_drawn} drawn "
        f"(failures {report.chain_failures})",
    ]
    for line in lines:
        print(line)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(vars(report) | {"passed": report.passed}, fh)
            fh.write("\n")
    if not report.passed:
        print("acpo-error: verification failed", file=sys.stderr)
        return EXIT_VALIDATION
    print("all checks passed")
    return EXIT_OK


def _cmd_report(args) -> int:
    paths = write_report(args.metrics, args.out)
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="acpo", description="Attribution-based credit assignment for toy policy optimization.")
    p.add_argument("--version", action="version", version=f"acpo {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=out_required)

    t = sub.add_parser("train", help="two-stage training run")
    t.add_argument("--config", required=True)
    common(t, True)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="Acc@k of a checkpoint on a task file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--tasks", required=True)
    e.add_argument("--k", type=int, default=8)
    e.add_argument("--temperature", type=float, default=0.8)
    e.add_argument("--top-p", type=float, default=0.95)
    common(e, False)
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("analyze-trace", help="offline segmentation and attribution of a JSONL trace")
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--markers", required=True)
    a.add_argument("--checkpoint", help="judge policy; without it only segmentation is emitted")
    a.add_argument("--quantile", type=float, default=0.05)
    a.add_argument("--min-interval", type=int, default=1)
    a.add_argument("--boundary-tokens", nargs="*", help="token texts that end a sentence")
    a.add_argument("--answer-cue-len", type=int, default=0)
    common(a, True)
    a.set_defaults(func=_cmd_analyze)

    v = sub.add_parser("verify-math", help="brute-force information-theory checks")
    v.add_argument("--samples", type=int, default=1000)
    common(v, False)
    v.set_defaults(func=_cmd_verify)

    r = sub.add_parser("report", help="plot-data files from metrics.csv")
    r.add_argument("--metrics", required=True)
    common(r, True)
    r.set_defaults(func=_cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ValidationError, ConfigError, TraceError, FileNotFoundError, ValueError) as exc:
        print(f"acpo-error: {_describe(exc)}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - top-level contract maps everything else to exit 2
        log.debug("runtime failure", exc_info=True)
        print(f"acpo-error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _describe(exc: BaseException) -> str:
    if isinstance(exc, FileNotFoundError) and exc.filename:
        return f"no such file: {exc.filename}"
    return str(exc)


if __name__ == "__main__":
    sys.exit(main())
