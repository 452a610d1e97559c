import math

import numpy as np
import pytest

from acpo import kernels
from acpo.policy import DEFAULT_VOCAB, PolicySnapshot, base_policy
from acpo.trace import TokenRecord, Trajectory

ACCEPTANCE_LINES: list[str] = []


def make_traj(words, entropies=None, logprobs=None, question=("4", "+", "3", "?"), reward=None, traj_id="t"):
    """Toy-vocabulary trajectory from symbol strings; the answer span follows the first 'answer'."""
    ids = DEFAULT_VOCAB.encode(words)
    n = len(ids)
    entropies = entropies if entropies is not None else [None] * n
    logprobs = logprobs if logprobs is not None else [-0.5] * n
    out = tuple(TokenRecord(i, w, lp, h) for i, w, lp, h in zip(ids, words, logprobs, entropies))
    if "answer" in words:
        a = words.index("answer") + 1
        b = a
        while b < n and words[b] != "<eos>":
            b += 1
        span = (a, b)
    else:
        span = (n - 1, n)
    return Trajectory(traj_id, tuple(DEFAULT_VOCAB.encode(question)), out, span, reward)


def scripted_policy(transitions, margin=50.0):
    """Policy driven only by the last token: ``{symbol: [next symbols]}`` with equal odds among the options."""
    V = len(DEFAULT_VOCAB)
    last = kernels.layout(V)["last"]
    theta = np.zeros((DEFAULT_VOCAB.feature_dim, V))
    for prev, options in transitions.items():
        for nxt in options:
            theta[last + DEFAULT_VOCAB.id(prev), DEFAULT_VOCAB.id(nxt)] = margin
    return PolicySnapshot(theta, DEFAULT_VOCAB, "scripted")


@pytest.fixture(scope="session")
def prior():
    return base_policy()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


LN2 = math.log(2.0)
