"""Toy autoregressive policy and verifiable arithmetic-chain tasks.

The policy is linear-softmax over sparse binary context features, so
log-probability gradients are closed form: feature(context) outer
(onehot(chosen) - probs). Parameters are stored feature-major, shape
``(feature_dim, |V|)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _pykernels
from . import kernels
from .trace import RolloutGroup, TokenRecord, Trajectory

DIGITS = tuple(str(d) for d in range(10))
OPERATORS = ("+", "-", "*")
# units of Z_10: every op is a permutation of residues, so chain values stay uniform
MULTIPLIERS = (1, 3, 7, 9)
VALUE_MARKERS = ("first", "next", "then", "so", "thus", "however", "therefore")
RECHECK_MARKER = "wait"
QUESTION_END = "?"
TERMINATOR = "."
ANSWER = "answer"
EOS = "<eos>"

MODULUS = _pykernels.MOD


@dataclass(frozen=True)
class ToyVocabulary:
    symbols: tuple[str, ...] = (
        *DIGITS, *OPERATORS, QUESTION_END, TERMINATOR, ANSWER, EOS, *VALUE_MARKERS, RECHECK_MARKER,
    )

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be distinct")
        for required in (*DIGITS, *OPERATORS, QUESTION_END, TERMINATOR, ANSWER, EOS, RECHECK_MARKER):
            if required not in self.symbols:
                raise ValueError(f"vocabulary lacks required symbol {required!r}")
        if not any(m in self.symbols for m in VALUE_MARKERS):
            raise ValueError("vocabulary needs at least one transition marker")
        index = {s: i for i, s in enumerate(self.symbols)}
        cls = np.full(len(self.symbols), _pykernels.OTHER, dtype=np.int64)
        dval = np.zeros(len(self.symbols), dtype=np.int64)
        opc = np.zeros(len(self.symbols), dtype=np.int64)
        for d in DIGITS:
            cls[index[d]] = _pykernels.DIGIT
            dval[index[d]] = int(d)
        for k, op in enumerate(OPERATORS):
            cls[index[op]] = _pykernels.OP
            opc[index[op]] = k
        cls[index[QUESTION_END]] = _pykernels.QMARK
        cls[index[TERMINATOR]] = _pykernels.TERM
        cls[index[ANSWER]] = _pykernels.ANSWER
        cls[index[EOS]] = _pykernels.EOS
        for m in VALUE_MARKERS:
            if m in index:
                cls[index[m]] = _pykernels.VMARK
        cls[index[RECHECK_MARKER]] = _pykernels.WAIT
        for name, arr in (("token_class", cls), ("digit_value", dval), ("op_code", opc)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.symbols)

    def id(self, symbol: str) -> int:
        return self._index[symbol]

    def text(self, token_id: int) -> str:
        return self.symbols[token_id]

    def encode(self, symbols: Sequence[str]) -> list[int]:
        return [self._index[s] for s in symbols]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.symbols[i] for i in ids]

    @property
    def feature_dim(self) -> int:
        return _pykernels.layout(len(self))["dim"]

    @property
    def marker_ids(self) -> list[int]:
        return [self._index[m] for m in (*VALUE_MARKERS, RECHECK_MARKER) if m in self._index]


DEFAULT_VOCAB = ToyVocabulary()


def apply_op(value: int, op: str, operand: int) -> int:
    if op == "+":
        return (value + operand) % MODULUS
    if op == "-":
        return (value - operand) % MODULUS
    if op == "*":
        return (value * operand) % MODULUS
    raise ValueError(f"unknown operator {op!r}")


@dataclass(frozen=True)
class ArithChainTask:
    """A seed digit followed by ``difficulty`` modular operations."""

    id: str
    seed_value: int
    ops: tuple[tuple[str, int], ...]
    question: tuple[int, ...]
    ground_truth: tuple[int, ...]
    parent_id: str | None = None

    @property
    def difficulty(self) -> int:
        return len(self.ops)

    def describe(self) -> str:
        expr = str(self.seed_value)
        for op, a in self.ops:
            expr = f"({expr} {op} {a}) mod {MODULUS}"
        return expr


def chain_values(seed_value: int, ops: Sequence[tuple[str, int]]) -> list[int]:
    values = [seed_value]
    for op, a in ops:
        values.append(apply_op(values[-1], op, a))
    return values


def generate_task(difficulty: int, rng_seed: int, vocab: ToyVocabulary = DEFAULT_VOCAB,
                  task_id: str | None = None) -> ArithChainTask:
    if difficulty < 1:
        raise ValueError("difficulty must be >= 1")
    rng = np.random.default_rng(rng_seed)
    seed_value = int(rng.integers(MODULUS))
    ops = []
    for _ in range(difficulty):
        op = OPERATORS[int(rng.integers(len(OPERATORS)))]
        operand = int(rng.choice(MULTIPLIERS)) if op == "*" else int(rng.integers(MODULUS))
        ops.append((op, operand))
    ops = tuple(ops)
    symbols = [str(seed_value)]
    for op, a in ops:
        symbols += [op, str(a)]
    symbols.append(QUESTION_END)
    truth = chain_values(seed_value, ops)[-1]
    return ArithChainTask(
        id=task_id or f"d{difficulty}-s{rng_seed}",
        seed_value=seed_value,
        ops=ops,
        question=tuple(vocab.encode(symbols)),
        ground_truth=(vocab.id(str(truth)),),
    )


def generate_tasks(n: int, difficulty: int, seed: int, vocab: ToyVocabulary = DEFAULT_VOCAB,
                   prefix: str = "t") -> list[ArithChainTask]:
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)
    return [generate_task(difficulty, int(s), vocab, task_id=f"{prefix}{i}") for i, s in enumerate(seeds)]


def answer_span_of(output_ids: Sequence[int], vocab: ToyVocabulary = DEFAULT_VOCAB) -> tuple[int, int]:
    """Tokens after the first answer delimiter up to the end token.

    Without a delimiter the whole output is reasoning and the span is empty.
    """
    ans, eos = vocab.id(ANSWER), vocab.id(EOS)
    n = len(output_ids)
    for i, tok in enumerate(output_ids):
        if tok == ans:
            end = i + 1
            while end < n and output_ids[end] != eos:
                end += 1
            return (i + 1, end)
    return (n, n)


def chain_consistent(task: ArithChainTask, t: Trajectory, vocab: ToyVocabulary = DEFAULT_VOCAB) -> bool:
    """True when every value stated before the answer matches the true chain.

    Reasoning carried over in a prefixed question is checked too. A recheck
    must restate the current value.
    """
    truth = chain_values(task.seed_value, task.ops)
    stream = [vocab.symbols[i] for i in task.question]
    stream = stream[stream.index(QUESTION_END) + 1:] + [vocab.symbols[i] for i in t.output_ids]
    step = 0
    for prev, tok in zip(stream, stream[1:]):
        if prev == ANSWER:
            break
        if tok not in DIGITS:
            continue
        if prev in VALUE_MARKERS:
            step += 1
            if step >= len(truth) or int(tok) != truth[step]:
                return False
        elif prev == RECHECK_MARKER and int(tok) != truth[step]:
            return False
    return True


def verify_answer(task: ArithChainTask, t: Trajectory) -> float:
    a, b = t.answer_span
    if b <= a:
        return 0.0
    return 1.0 if tuple(t.answer_ids) == tuple(task.ground_truth) else 0.0


@dataclass(frozen=True)
class PolicySnapshot:
    theta: np.ndarray
    vocab: ToyVocabulary = DEFAULT_VOCAB
    version: str = "init"

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64, order="C", copy=True)
        expected = (self.vocab.feature_dim, len(self.vocab))
        if theta.shape != expected:
            raise ValueError(f"parameter shape {theta.shape} != {expected}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("policy parameters must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, vocab: ToyVocabulary = DEFAULT_VOCAB) -> "PolicySnapshot":
        return cls(np.zeros((vocab.feature_dim, len(vocab))), vocab, "zeros")

    def with_theta(self, theta: np.ndarray, version: str) -> "PolicySnapshot":
        return PolicySnapshot(theta, self.vocab, version)

    @property
    def n_params(self) -> int:
        return self.theta.size

    def _args(self):
        v = self.vocab
        return v.token_class, v.digit_value, v.op_code


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    max_len: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


def _ids(seq) -> np.ndarray:
    return np.ascontiguousarray(seq, dtype=np.int64)


def next_token_distribution(policy: PolicySnapshot, context: Sequence[int], temperature: float = 1.0,
                            impl=None) -> tuple[np.ndarray, float]:
    impl = impl or kernels
    return impl.next_distribution(policy.theta, _ids(context), *policy._args(), float(temperature))


def score_tokens(policy: PolicySnapshot, context: Sequence[int], start: int, temperature: float = 1.0,
                 top_p: float = 1.0, impl=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-position (nucleus logprob, full logprob, distribution entropy) for ``context[start:]``."""
    impl = impl or kernels
    return impl.score_tokens(policy.theta, _ids(context), int(start), *policy._args(), float(temperature),
                             float(top_p))


def accumulate_log_gradient(policy: PolicySnapshot, context: Sequence[int], start: int, grad: np.ndarray,
                            coef_nucleus=None, coef_full=None, temperature: float = 1.0, top_p: float = 1.0,
                            impl=None) -> None:
    """grad += sum_t coef_nucleus[t] dlogp_nucleus(t) + coef_full[t] dlogp_full(t) in place."""
    impl = impl or kernels
    n = len(context) - start
    cn = np.zeros(n) if coef_nucleus is None else np.ascontiguousarray(coef_nucleus, dtype=np.float64)
    cf = np.zeros(n) if coef_full is None else np.ascontiguousarray(coef_full, dtype=np.float64)
    if cn.shape != (n,) or cf.shape != (n,):
        raise ValueError("coefficient arrays must cover context[start:]")
    impl.accumulate_grad(policy.theta, _ids(context), int(start), *policy._args(), float(temperature),
                         float(top_p), cn, cf, grad)


def policy_log_gradient(policy: PolicySnapshot, context: Sequence[int], chosen_token: int,
                        temperature: float = 1.0, top_p: float = 1.0, impl=None) -> np.ndarray:
    """d log pi(chosen | context) / d theta."""
    grad = np.zeros_like(policy.theta)
    ctx = list(context) + [int(chosen_token)]
    accumulate_log_gradient(policy, ctx, len(ctx) - 1, grad, coef_nucleus=[1.0], temperature=temperature,
                            top_p=top_p, impl=impl)
    return grad


def sample_trajectory(policy: PolicySnapshot, task: ArithChainTask, cfg: SamplerConfig,
                      rng: np.random.Generator | None = None, traj_id: str | None = None,
                      impl=None) -> Trajectory:
    impl = impl or kernels
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    uniforms = rng.random(cfg.max_len)
    eos = policy.vocab.id(EOS)
    toks, logps, ents = impl.sample_tokens(policy.theta, _ids(task.question), *policy._args(),
                                           float(cfg.temperature), float(cfg.top_p), uniforms, eos)
    vocab = policy.vocab
    output = tuple(
        TokenRecord(int(t), vocab.text(int(t)), float(lp), float(h)) for t, lp, h in zip(toks, logps, ents)
    )
    span = answer_span_of([tok.token_id for tok in output], vocab)
    traj = Trajectory(
        id=traj_id or task.id,
        question=task.question,
        output=output,
        answer_span=span,
        question_text=" ".join(vocab.decode(task.question)),
    )
    return traj.with_reward(verify_answer(task, traj))


def rollout_group(policy: PolicySnapshot, task: ArithChainTask, G: int, cfg: SamplerConfig,
                  impl=None) -> RolloutGroup:
    """G rollouts; member j draws from a stream seeded with ``cfg.seed + j``."""
    if G < 2:
        raise ValueError("G must be >= 2")
    members = tuple(
        sample_trajectory(policy, task, cfg, np.random.default_rng(cfg.seed + j), f"{task.id}/{j}", impl=impl)
        for j in range(G)
    )
    return RolloutGroup(task.id, members)


def trajectory_log_prob(policy: PolicySnapshot, t: Trajectory, temperature: float = 1.0,
                        top_p: float = 1.0) -> float:
    ctx = list(t.question) + t.output_ids
    lpn, _, _ = score_tokens(policy, ctx, len(t.question), temperature, top_p)
    return float(np.sum(lpn))


def finite_difference_check(policy: PolicySnapshot, trajectory: Trajectory, h: float = 1e-5,
                            temperature: float = 1.0, top_p: float = 1.0, n_coords: int | None = None,
                            seed: int = 0) -> float:
    """Max relative error of the analytic sum_t dlogpi against central differences.

    Only parameters that the trajectory touches (non-zero analytic gradient)
    plus a handful of untouched ones are probed when ``n_coords`` is given.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    ctx = list(trajectory.question) + trajectory.output_ids
    start = len(trajectory.question)
    grad = np.zeros_like(policy.theta)
    accumulate_log_gradient(policy, ctx, start, grad, coef_nucleus=np.ones(len(ctx) - start),
                            temperature=temperature, top_p=top_p)
    flat = policy.theta.ravel()
    coords = np.arange(flat.size)
    if n_coords is not None and n_coords < flat.size:
        rng = np.random.default_rng(seed)
        touched = np.flatnonzero(grad.ravel())
        coords = np.unique(np.concatenate([
            rng.choice(touched, size=min(n_coords, touched.size), replace=False) if touched.size else touched,
            rng.choice(flat.size, size=min(8, flat.size), replace=False),
        ]))

    def logp(theta_flat):
        snap = policy.with_theta(theta_flat.reshape(policy.theta.shape), "fd")
        return trajectory_log_prob(snap, trajectory, temperature, top_p)

    worst = 0.0
    g = grad.ravel()
    for i in coords:
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += h
        minus[i] -= h
        numeric = (logp(plus) - logp(minus)) / (2 * h)
        err = abs(numeric - g[i]) / max(1.0, abs(numeric), abs(g[i]))
        worst = max(worst, err)
    return worst


@dataclass(frozen=True)
class PriorConfig:
    """Hand-built 'pretrained' initialization: follows the output grammar and
    knows arithmetic imperfectly."""

    arith_margin: float = 1.5
    arith_noise: float = 1.0
    copy_margin: float = 6.0
    marker_spread: float = 0.3
    recheck_logit: float = -1.0
    grammar_margin: float = 8.0
    seed: int = 0


def base_policy(vocab: ToyVocabulary = DEFAULT_VOCAB, prior: PriorConfig = PriorConfig()) -> PolicySnapshot:
    lay = _pykernels.layout(len(vocab))
    V = len(vocab)
    theta = np.zeros((lay["dim"], V))
    rng = np.random.default_rng(prior.seed)
    neg = -prior.grammar_margin
    digits = [vocab.id(d) for d in DIGITS]
    vmarkers = [vocab.id(m) for m in VALUE_MARKERS if m in vocab.symbols]
    wait = vocab.id(RECHECK_MARKER)
    term, ans, eos = vocab.id(TERMINATOR), vocab.id(ANSWER), vocab.id(EOS)
    qmark = vocab.id(QUESTION_END)

    def last_row(tok):
        return theta[lay["last"] + tok]

    def rem_row(bucket, tok):
        return theta[lay["rem"] + bucket * V + tok]

    # after the question or a sentence end: open a new step, or answer when no ops remain
    for tok in (qmark, term):
        row = last_row(tok)
        row[:] = neg
        row[vmarkers] = rng.normal(0.0, prior.marker_spread, size=len(vmarkers))
        row[wait] = prior.recheck_logit
        row[ans] = 0.0
        for bucket in range(1, 5):
            rem_row(bucket, tok)[ans] = -prior.grammar_margin / 2
        rem_row(0, tok)[ans] = prior.grammar_margin
    for tok in (*vmarkers, wait, ans):
        row = last_row(tok)
        row[:] = neg
        row[digits] = 0.0
    for d in digits:
        row = last_row(d)
        row[:] = neg
        row[term] = 0.0
        rem_row(5, d)[eos] = 2 * prior.grammar_margin
        rem_row(5, d)[term] = neg
    last_row(eos)[:] = neg
    last_row(eos)[eos] = 0.0

    for value in range(MODULUS):
        for k, op in enumerate(OPERATORS):
            for operand in range(MODULUS):
                row = theta[lay["arith"] + (value * len(OPERATORS) + k) * MODULUS + operand]
                row[digits] = rng.normal(0.0, prior.arith_noise, size=len(digits))
                row[vocab.id(str(apply_op(value, op, operand)))] += prior.arith_margin
    for value in range(MODULUS):
        theta[lay["ans"] + value, vocab.id(str(value))] = prior.copy_margin
        theta[lay["wait"] + value, vocab.id(str(value))] = prior.copy_margin
    return PolicySnapshot(theta, vocab, "prior")


CHECKPOINT_MAGIC = "acpo-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(policy: PolicySnapshot, path: str | Path) -> None:
    """Text checkpoint: one header line, then one hex-float parameter per line (feature-major)."""
    D, V = policy.theta.shape
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {V} {D} {policy.version}"]
    lines.extend(float(x).hex() for x in policy.theta.ravel())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path, vocab: ToyVocabulary = DEFAULT_VOCAB) -> PolicySnapshot:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty checkpoint")
    header = lines[0].split()
    if len(header) < 4 or header[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an acpo checkpoint")
    if int(header[1]) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header[1]}")
    V, D = int(header[2]), int(header[3])
    if (D, V) != (vocab.feature_dim, len(vocab)):
        raise ValueError(f"{path}: shape ({D}, {V}) does not match vocabulary")
    values = [float.fromhex(s) for s in lines[1:] if s]
    if len(values) != D * V:
        raise ValueError(f"{path}: expected {D * V} parameters, found {len(values)}")
    version = header[4] if len(header) > 4 else "loaded"
    return PolicySnapshot(np.array(values).reshape(D, V), vocab, version)
