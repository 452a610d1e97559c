"""Exact information-theoretic checks on small discrete distributions.

Everything is computed by enumeration in nats. These routines back the
``verify-math`` command and serve as ground truth for attribution tests.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

TOL = 1e-12
MAX_ALPHABET = 8
MAX_CHAIN = 5


@dataclass(frozen=True)
class JointDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError("joint distribution must be a matrix")
        if max(p.shape) > MAX_ALPHABET:
            raise ValueError(f"alphabets are capped at {MAX_ALPHABET} symbols")
        if np.any(p < 0):
            raise ValueError("probabilities must be non-negative")
        if abs(p.sum() - 1.0) > TOL:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def marginal_x(self) -> np.ndarray:
        return self.probs.sum(axis=1)

    @property
    def marginal_y(self) -> np.ndarray:
        return self.probs.sum(axis=0)

    def transpose(self) -> "JointDistribution":
        return JointDistribution(self.probs.T)


def entropy(dist) -> float:
    """Shannon entropy in nats; zero-probability terms contribute nothing."""
    h = 0.0
    for p in np.ravel(dist):
        if p > 0:
            h -= p * math.log(p)
    return h


def mutual_information(j: JointDistribution) -> float:
    px, py = j.marginal_x, j.marginal_y
    total = 0.0
    rows, cols = j.probs.shape
    for a in range(rows):
        for b in range(cols):
            p = j.probs[a, b]
            if p > 0:
                total += p * (math.log(p) - math.log(px[a]) - math.log(py[b]))
    return total


def mutual_information_by_entropies(j: JointDistribution) -> float:
    return entropy(j.marginal_x) + entropy(j.marginal_y) - entropy(j.probs)


def check_theorem_a(j: JointDistribution, tol: float = TOL) -> bool:
    """0 <= I(X;Y) <= min(H(X), H(Y)) within ``tol``."""
    mi = mutual_information(j)
    bound = min(entropy(j.marginal_x), entropy(j.marginal_y))
    return -tol <= mi <= bound + tol


def random_joint(rng: np.random.Generator, shape=(3, 3), sparsity: float = 0.0) -> JointDistribution:
    p = rng.dirichlet(np.full(shape[0] * shape[1], 0.5)).reshape(shape)
    if sparsity > 0:
        p = p * (rng.random(shape) >= sparsity)
        if p.sum() == 0:
            p[rng.integers(shape[0]), rng.integers(shape[1])] = 1.0
    return JointDistribution(p / p.sum())


class ChainResult(enum.Enum):
    HOLDS = "holds"
    FAILS = "fails"
    PREMISE_NOT_MET = "premise not met"

    def __bool__(self) -> bool:
        return self is ChainResult.HOLDS


@dataclass(frozen=True)
class AutoregressiveChain:
    """Conditional tables with full-history conditioning.

    ``tables[k]`` has shape ``(A,)*k + (A,)``: the distribution of token k
    given tokens 0..k-1.
    """

    alphabet: int
    tables: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not 1 <= self.alphabet <= MAX_ALPHABET:
            raise ValueError(f"alphabet must be in [1, {MAX_ALPHABET}]")
        if not 1 <= len(self.tables) <= MAX_CHAIN:
            raise ValueError(f"chain length must be in [1, {MAX_CHAIN}]")
        for k, tab in enumerate(self.tables):
            tab = np.asarray(tab, dtype=np.float64)
            if tab.shape != (self.alphabet,) * (k + 1):
                raise ValueError(f"table {k} has shape {tab.shape}")
            if np.any(tab < 0) or np.any(np.abs(tab.sum(axis=-1) - 1.0) > TOL):
                raise ValueError(f"table {k} rows must be distributions")

    @property
    def length(self) -> int:
        return len(self.tables)

    def joint(self) -> np.ndarray:
        m = self.length
        joint = np.asarray(self.tables[0], dtype=np.float64)
        for k in range(1, m):
            joint = joint[..., None] * self.tables[k]
        return joint

    @classmethod
    def random(cls, rng: np.random.Generator, length: int = 4, alphabet: int = 2,
               concentration: float = 1.0, sharpening: float = 1.0) -> "AutoregressiveChain":
        """Dirichlet tables; ``sharpening > 1`` makes later tokens more peaked."""
        tables = []
        for k in range(length):
            conc = concentration / sharpening**k
            tab = rng.dirichlet(np.full(alphabet, conc), size=(alphabet,) * k)
            tables.append(np.asarray(tab).reshape((alphabet,) * (k + 1)))
        return cls(alphabet, tuple(tables))

    @classmethod
    def iid(cls, dist, length: int) -> "AutoregressiveChain":
        dist = np.asarray(dist, dtype=np.float64)
        A = dist.size
        return cls(A, tuple(np.broadcast_to(dist, (A,) * k + (A,)).copy() for k in range(length)))


def _marginal(joint: np.ndarray, keep: tuple[int, ...]) -> np.ndarray:
    drop = tuple(ax for ax in range(joint.ndim) if ax not in keep)
    return joint.sum(axis=drop) if drop else joint


def conditional_entropy(joint: np.ndarray, target: int, given: tuple[int, ...]) -> float:
    """H(T_target | T_given) = H(T_given, T_target) - H(T_given), by marginalization."""
    both = tuple(sorted(set(given) | {target}))
    h_both = entropy(_marginal(joint, both))
    h_given = entropy(_marginal(joint, tuple(sorted(given)))) if given else 0.0
    return h_both - h_given


def chain_conditional_entropies(chain: AutoregressiveChain) -> list[float]:
    """[H(T1), H(T2|T1), H(T3|T1,T2), ...]."""
    joint = chain.joint()
    return [conditional_entropy(joint, k, tuple(range(k))) for k in range(chain.length)]


def chain_premise_holds(chain: AutoregressiveChain, tol: float = 0.0) -> bool:
    """H(T_k | T_1..T_{k-1}) >= H(T_{k+1} | T_2..T_k) for every k."""
    joint = chain.joint()
    for k in range(chain.length - 1):
        lhs = conditional_entropy(joint, k, tuple(range(k)))
        rhs = conditional_entropy(joint, k + 1, tuple(range(1, k + 1)))
        if lhs < rhs - tol:
            return False
    return True


def check_entropy_chain(chain: AutoregressiveChain, tol: float = TOL) -> ChainResult:
    if not chain_premise_holds(chain):
        return ChainResult.PREMISE_NOT_MET
    h = chain_conditional_entropies(chain)
    ok = all(a >= b - tol for a, b in zip(h, h[1:]))
    return ChainResult.HOLDS if ok else ChainResult.FAILS


@dataclass
class MathReport:
    joints_checked: int = 0
    joint_failures: int = 0
    identity_failures: int = 0
    symmetry_failures: int = 0
    chains_checked: int = 0
    chains_drawn: int = 0
    chain_failures: int = 0

    @property
    def passed(self) -> bool:
        return not (self.joint_failures or self.identity_failures or self.symmetry_failures or self.chain_failures)


def verify_math(samples: int = 1000, seed: int = 0, chains: int | None = None) -> MathReport:
    """Random sweep: ``samples`` 3x3 joints and ``samples // 2`` premise-satisfying chains."""
    rng = np.random.default_rng(seed)
    report = MathReport()
    for i in range(samples):
        j = random_joint(rng, (3, 3), sparsity=0.3 if i % 4 == 0 else 0.0)
        report.joints_checked += 1
        if not check_theorem_a(j):
            report.joint_failures += 1
        mi = mutual_information(j)
        if abs(mi - mutual_information_by_entropies(j)) > TOL:
            report.identity_failures += 1
        if abs(mi - mutual_information(j.transpose())) > TOL:
            report.symmetry_failures += 1
    target = samples // 2 if chains is None else chains
    while report.chains_checked < target:
        chain = AutoregressiveChain.random(
            rng, length=4, alphabet=2,
            concentration=float(rng.choice([1.0, 3.0, 10.0])),
            sharpening=float(rng.choice([1.0, 2.0, 4.0])),
        )
        report.chains_drawn += 1
        result = check_entropy_chain(chain)
        if result is ChainResult.PREMISE_NOT_MET:
            continue
        report.chains_checked += 1
        if result is ChainResult.FAILS:
            report.chain_failures += 1
    return report
