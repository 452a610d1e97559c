"""Entropy-driven step segmentation of a trajectory's reasoning region.

Pipeline: per-token statistic -> top-quantile candidates -> marker filter ->
minimum interval -> sentence alignment -> contiguous step spans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .trace import SegmentedTrajectory, StepSpan, Trajectory

DISTRIBUTION_ENTROPY = "distribution_entropy"
SURPRISAL = "surprisal"

DEFAULT_MARKERS = frozenset({"first", "next", "then", "so", "thus", "however", "therefore", "wait"})


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentationConfig:
    entropy_quantile: float = 0.05
    marker_lexicon: frozenset[str] = DEFAULT_MARKERS
    min_interval: int = 1
    boundary_token_ids: frozenset[int] = frozenset()
    fallback_to_surprisal: bool = True

    def __post_init__(self):
        if not 0.0 < self.entropy_quantile <= 1.0:
            raise ValueError(f"entropy_quantile must be in (0, 1], got {self.entropy_quantile}")
        if self.min_interval < 1:
            raise ValueError(f"min_interval must be >= 1, got {self.min_interval}")
        object.__setattr__(self, "marker_lexicon", frozenset(_fold(m) for m in self.marker_lexicon))
        object.__setattr__(self, "boundary_token_ids", frozenset(int(b) for b in self.boundary_token_ids))


@dataclass(frozen=True)
class CandidateSet:
    indices: tuple[int, ...]
    statistic_used: str = DISTRIBUTION_ENTROPY

    def __len__(self) -> int:
        return len(self.indices)


def _fold(text: str) -> str:
    return text.strip().casefold()


def load_marker_lexicon(path: str | Path) -> frozenset[str]:
    """Read a marker file: one marker per line, '#' starts a comment."""
    markers = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            markers.add(_fold(line))
    return frozenset(markers)


def statistic_kind(t: Trajectory, cfg: SegmentationConfig) -> str:
    region = t.output[: t.reasoning_len]
    if all(tok.entropy is not None for tok in region):
        return DISTRIBUTION_ENTROPY
    if not cfg.fallback_to_surprisal:
        raise SegmentationError("trace lacks distribution entropy and surprisal fallback is disabled")
    return SURPRISAL


def segmentation_statistic(t: Trajectory, cfg: SegmentationConfig) -> list[float]:
    """Per-token uncertainty over the reasoning region.

    Distribution entropy when every token carries it, otherwise surprisal
    (-logprob) if the config allows the fallback.
    """
    region = t.output[: t.reasoning_len]
    if statistic_kind(t, cfg) == DISTRIBUTION_ENTROPY:
        return [float(tok.entropy) for tok in region]
    return [-float(tok.logprob) for tok in region]


def select_high_entropy_candidates(
    stats: list[float], quantile: float, statistic_used: str = DISTRIBUTION_ENTROPY
) -> CandidateSet:
    if not stats:
        raise ValueError("statistics must be non-empty")
    n = len(stats)
    k = min(n, math.ceil(quantile * n - 1e-12))
    k = max(k, 1)
    # stable sort on (-stat, index): lower index wins ties
    order = sorted(range(n), key=lambda i: (-stats[i], i))
    return CandidateSet(tuple(sorted(order[:k])), statistic_used)


def apply_marker_and_constraints(cands: CandidateSet, t: Trajectory, cfg: SegmentationConfig) -> list[int]:
    region_len = t.reasoning_len
    texts = [_fold(tok.text) for tok in t.output[:region_len]]

    marked = [i for i in cands.indices if 0 < i < region_len and texts[i] in cfg.marker_lexicon]

    spaced: list[int] = []
    prev = None
    for i in marked:
        if prev is None or i - prev >= cfg.min_interval:
            spaced.append(i)
            prev = i

    if not cfg.boundary_token_ids:
        return spaced

    ids = [tok.token_id for tok in t.output[:region_len]]
    kept: list[int] = []
    for i in spaced:
        pos = i
        while pos < region_len and ids[pos - 1] not in cfg.boundary_token_ids:
            pos += 1
        if pos >= region_len:
            continue
        # collisions include landing inside the min interval of the last kept boundary
        if kept and pos - kept[-1] < cfg.min_interval:
            continue
        kept.append(pos)
    return kept


def steps_from_boundaries(boundaries: Iterable[int], region_len: int) -> tuple[StepSpan, ...]:
    cuts = [0, *boundaries, region_len]
    return tuple(StepSpan(a, b) for a, b in zip(cuts, cuts[1:]))


def segment_trajectory(t: Trajectory, cfg: SegmentationConfig) -> SegmentedTrajectory:
    region_len = t.reasoning_len
    if region_len < 1:
        raise SegmentationError("no reasoning region")
    kind = statistic_kind(t, cfg)
    stats = segmentation_statistic(t, cfg)
    cands = select_high_entropy_candidates(stats, cfg.entropy_quantile, kind)
    boundaries = apply_marker_and_constraints(cands, t, cfg)
    return SegmentedTrajectory(t, steps_from_boundaries(boundaries, region_len), kind)


def step_initial_statistics(seg: SegmentedTrajectory, cfg: SegmentationConfig) -> tuple[list[float], list[float]]:
    """Split the per-token statistic into (step-initial, non-initial) values."""
    stats = segmentation_statistic(seg.trajectory, cfg)
    starts = {s.start for s in seg.steps}
    initial = [v for i, v in enumerate(stats) if i in starts]
    rest = [v for i, v in enumerate(stats) if i not in starts]
    return initial, rest
