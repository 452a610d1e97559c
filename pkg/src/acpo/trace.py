"""Trajectory data model and the JSONL trace interchange format.

All log quantities are natural-log (nats). One trajectory per line.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Iterator, Sequence


class TraceError(ValueError):
    """Base class for trace parsing and validation failures."""


class TraceParseError(TraceError):
    def __init__(self, message: str, offset: int | None = None, line: int | None = None):
        self.offset = offset
        self.line = line
        super().__init__(message)


class TraceSchemaError(TraceError):
    def __init__(self, field_name: str, message: str | None = None):
        self.field = field_name
        super().__init__(message or f"missing or invalid field: {field_name}")


class TraceValidationError(TraceError):
    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class TokenRecord:
    token_id: int
    text: str
    logprob: float
    entropy: float | None = None


@dataclass(frozen=True)
class Trajectory:
    id: str
    question: tuple[int, ...]
    output: tuple[TokenRecord, ...]
    answer_span: tuple[int, int]
    reward: float | None = None
    question_text: str = ""

    @property
    def reasoning_len(self) -> int:
        return self.answer_span[0]

    @property
    def output_ids(self) -> list[int]:
        return [tok.token_id for tok in self.output]

    @property
    def answer_ids(self) -> list[int]:
        a, b = self.answer_span
        return [tok.token_id for tok in self.output[a:b]]

    @property
    def logprobs(self) -> list[float]:
        return [tok.logprob for tok in self.output]

    def with_reward(self, reward: float) -> "Trajectory":
        return replace(self, reward=float(reward))


@dataclass(frozen=True)
class StepSpan:
    start: int
    end: int

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class SegmentedTrajectory:
    trajectory: Trajectory
    steps: tuple[StepSpan, ...]
    statistic_used: str = "distribution_entropy"

    def __post_init__(self):
        region = self.trajectory.reasoning_len
        if not self.steps:
            raise ValueError("segmented trajectory needs at least one step")
        if self.steps[0].start != 0 or self.steps[-1].end != region:
            raise ValueError("steps must cover the reasoning region exactly")
        for a, b in zip(self.steps, self.steps[1:]):
            if a.end != b.start:
                raise ValueError("steps must be contiguous")
        for s in self.steps:
            if not 0 <= s.start < s.end:
                raise ValueError(f"empty or inverted step {s}")

    @property
    def boundaries(self) -> list[int]:
        return [s.start for s in self.steps[1:]]

    def step_of(self) -> list[int]:
        """Step index for every token of the reasoning region."""
        owner = []
        for k, s in enumerate(self.steps):
            owner.extend([k] * (s.end - s.start))
        return owner


@dataclass(frozen=True)
class RolloutGroup:
    question_id: str
    members: tuple[Trajectory, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("a rollout group needs G >= 2 members")
        q = self.members[0].question
        if any(m.question != q for m in self.members):
            raise ValueError("all members of a rollout group must share the question")

    @property
    def rewards(self) -> list[float]:
        return [0.0 if m.reward is None else m.reward for m in self.members]

    def __len__(self) -> int:
        return len(self.members)


def validate_trajectory(t: Trajectory) -> list[str]:
    """Return every invariant violation; an empty list means the trajectory is ok."""
    violations = []
    n = len(t.output)
    if n == 0:
        violations.append("output non-empty")
    for i, tok in enumerate(t.output):
        if not math.isfinite(tok.logprob) or tok.logprob > 0:
            violations.append(f"logprob <= 0 (token {i})")
        if tok.entropy is not None and (not math.isfinite(tok.entropy) or tok.entropy < 0):
            violations.append(f"entropy >= 0 (token {i})")
    a, b = t.answer_span
    if not (0 <= a < b <= n):
        violations.append(f"answer_span within output bounds and non-empty ({a},{b}) vs |output|={n}")
    if t.reward is not None and t.reward not in (0.0, 1.0):
        violations.append("reward in {0,1}")
    return violations


_REQUIRED = ("id", "question", "output", "answer_span")
_TOKEN_REQUIRED = ("token_id", "text", "logprob")


def _parse_token(obj, k: int) -> TokenRecord:
    if not isinstance(obj, dict):
        raise TraceSchemaError(f"output[{k}]", f"output[{k}] is not an object")
    for name in _TOKEN_REQUIRED:
        if name not in obj:
            raise TraceSchemaError(name, f"output[{k}] missing field: {name}")
    entropy = obj.get("entropy")
    try:
        return TokenRecord(
            token_id=int(obj["token_id"]),
            text=str(obj["text"]),
            logprob=float(obj["logprob"]),
            entropy=None if entropy is None else float(entropy),
        )
    except (TypeError, ValueError) as exc:
        raise TraceSchemaError(f"output[{k}]", f"output[{k}] has a non-numeric field: {exc}") from exc


def trajectory_from_dict(obj: dict) -> Trajectory:
    if not isinstance(obj, dict):
        raise TraceSchemaError("<record>", "trace record must be a JSON object")
    for name in _REQUIRED:
        if name not in obj:
            raise TraceSchemaError(name)
    span = obj["answer_span"]
    if not (isinstance(span, (list, tuple)) and len(span) == 2):
        raise TraceSchemaError("answer_span", "answer_span must be [start, end]")
    reward = obj.get("reward")
    t = Trajectory(
        id=str(obj["id"]),
        question=tuple(int(x) for x in obj["question"]),
        output=tuple(_parse_token(tok, k) for k, tok in enumerate(obj["output"])),
        answer_span=(int(span[0]), int(span[1])),
        reward=None if reward is None else float(reward),
        question_text=str(obj.get("question_text", "")),
    )
    violations = validate_trajectory(t)
    if violations:
        raise TraceValidationError(violations)
    return t


def parse_trace_record(line: str) -> Trajectory:
    """Parse one JSONL line into a validated :class:`Trajectory`."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceParseError(f"malformed JSON at byte offset {exc.pos}: {exc.msg}", offset=exc.pos) from exc
    return trajectory_from_dict(obj)


def trajectory_to_dict(t: Trajectory) -> dict:
    return {
        "id": t.id,
        "question": list(t.question),
        "question_text": t.question_text,
        "output": [
            {"token_id": tok.token_id, "text": tok.text, "logprob": tok.logprob, "entropy": tok.entropy}
            for tok in t.output
        ],
        "answer_span": list(t.answer_span),
        "reward": t.reward,
    }


def serialize_trajectory(t: Trajectory) -> str:
    return json.dumps(trajectory_to_dict(t), ensure_ascii=False)


def iter_trace(stream: IO) -> Iterator[Trajectory]:
    for lineno, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        if not raw.strip():
            continue
        try:
            yield parse_trace_record(raw)
        except TraceError as exc:
            raise _with_line(exc, lineno) from exc


def _with_line(exc: TraceError, lineno: int) -> TraceParseError:
    return TraceParseError(f"line {lineno}: {exc}", offset=getattr(exc, "offset", None), line=lineno)


def load_trace(stream: IO | bytes | str) -> list[Trajectory]:
    """Read newline-delimited JSON trajectories, preserving file order."""
    if isinstance(stream, bytes):
        stream = io.BytesIO(stream)
    elif isinstance(stream, str):
        stream = io.StringIO(stream)
    return list(iter_trace(stream))


def dump_trace(trajectories: Iterable[Trajectory], stream: IO[str]) -> None:
    for t in trajectories:
        stream.write(serialize_trajectory(t))
        stream.write("\n")
