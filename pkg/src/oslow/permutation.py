"""Permutation machinery: matching, Sinkhorn, Gumbel sampling, Boltzmann weights.

Convention: a permutation matrix ``P`` has ``P[i, j] == 1`` when variable ``j``
sits at position ``i`` of the ordering. An ordering is a tuple of 0-based
variable indices, ``ordering[i]`` being the variable at position ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import Node, Tape
from .exceptions import InvalidPermutationError, NumericalError

Ordering = tuple[int, ...]

DEFAULT_SINKHORN_ITERS = 50
DEFAULT_TAU = 0.1


def squash(raw: np.ndarray) -> np.ndarray:
    """Elementwise sigmoid of the raw permutation-belief parameter."""
    raw = np.asarray(raw, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * raw))


def is_permutation_matrix(p: np.ndarray) -> bool:
    p = np.asarray(p)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        return False
    if not np.all((p == 0) | (p == 1)):
        return False
    return bool(np.all(p.sum(axis=0) == 1) and np.all(p.sum(axis=1) == 1))


def matching(score: np.ndarray) -> np.ndarray:
    """Permutation matrix maximizing the Frobenius inner product with ``score``."""
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2 or score.shape[0] != score.shape[1] or score.shape[0] < 1:
        raise ValueError(f"score must be a non-empty square matrix, got shape {score.shape}")
    if not np.all(np.isfinite(score)):
        raise NumericalError("matching: non-finite score")
    rows, cols = linear_sum_assignment(score, maximize=True)
    p = np.zeros_like(score)
    p[rows, cols] = 1.0
    return p


def sinkhorn(score: np.ndarray, tau: float = DEFAULT_TAU, iters: int = DEFAULT_SINKHORN_ITERS) -> np.ndarray:
    """Doubly-stochastic relaxation of :func:`matching` at temperature ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if iters < 1:
        raise ValueError("iters must be positive")
    score = np.asarray(score, dtype=np.float64)
    if not np.all(np.isfinite(score)):
        raise NumericalError("sinkhorn: non-finite score")
    z = score / tau
    s = np.exp(z - z.max(axis=1, keepdims=True))
    for _ in range(iters):
        s = s / s.sum(axis=1, keepdims=True)
        s = s / s.sum(axis=0, keepdims=True)
    return s


def sinkhorn_node(tape: Tape, score: Node, tau: float = DEFAULT_TAU, iters: int = DEFAULT_SINKHORN_ITERS) -> Node:
    """:func:`sinkhorn` recorded on a tape (row max subtracted as a constant)."""
    z = tape.multiply(score, 1.0 / tau)
    s = tape.exp(z - z.value.max(axis=1, keepdims=True))
    for _ in range(iters):
        s = tape.col_normalize(tape.row_normalize(s))
    return s


def sample_gumbel(d: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``sigma`` times a d x d matrix of standard Gumbel draws."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.zeros((d, d))
    return sigma * rng.gumbel(size=(d, d))


def sample_hard_perms(raw: np.ndarray, sigma: float, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    if k < 1:
        raise ValueError("k must be >= 1")
    belief = squash(raw)
    d = belief.shape[0]
    return [matching(belief + sample_gumbel(d, sigma, rng)) for _ in range(k)]


@dataclass
class CandidateSet:
    """Deduplicated permutations with optional truncated-Boltzmann weights."""

    perms: list[np.ndarray]
    weights: np.ndarray | None = None
    counts: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.perms)

    @property
    def orderings(self) -> list[Ordering]:
        return [to_ordering(p) for p in self.perms]


def dedupe(perms: list[np.ndarray]) -> CandidateSet:
    """Order-preserving deduplication; ``counts`` records multiplicities."""
    if not perms:
        raise ValueError("cannot dedupe an empty permutation list")
    index: dict[bytes, int] = {}
    unique, counts = [], []
    for p in perms:
        key = np.asarray(p, dtype=np.int8).tobytes()
        if key in index:
            counts[index[key]] += 1
        else:
            index[key] = len(unique)
            unique.append(np.asarray(p, dtype=np.float64))
            counts.append(1)
    return CandidateSet(unique, None, counts)


def boltzmann_weights(raw: np.ndarray, cset: CandidateSet) -> CandidateSet:
    if len(cset) == 0:
        raise ValueError("empty candidate set")
    belief = squash(raw)
    energies = np.array([np.sum(p * belief) for p in cset.perms])
    w = np.exp(energies - energies.max())
    return CandidateSet(cset.perms, w / w.sum(), list(cset.counts))


def boltzmann_weights_node(tape: Tape, belief: Node, perms: list[np.ndarray]) -> Node:
    """Weights as a (1, n) node, differentiable w.r.t. the squashed belief."""
    n = len(perms)
    energies = None
    for i, p in enumerate(perms):
        e_i = tape.sum(tape.mask_multiply(belief, p))
        onehot = np.zeros((1, n))
        onehot[0, i] = 1.0
        term = tape.multiply(e_i, onehot)
        energies = term if energies is None else energies + term
    shifted = energies - energies.value.max()
    return tape.row_normalize(tape.exp(shifted))


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_init: float = 0.5
    total_epochs: int = 1

    def __post_init__(self):
        if self.sigma_init < 0:
            raise ValueError("sigma_init must be non-negative")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")

    def __call__(self, epoch: int) -> float:
        return schedule_sigma(self, epoch)


def schedule_sigma(s: NoiseSchedule, epoch: int) -> float:
    """Linearly annealed Gumbel scale, reaching zero at ``total_epochs``."""
    if not 0 <= epoch <= s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs}]")
    return s.sigma_init * (1.0 - epoch / s.total_epochs)


def to_ordering(p: np.ndarray) -> Ordering:
    if not is_permutation_matrix(p):
        raise InvalidPermutationError("not a permutation matrix")
    return tuple(int(j) for j in np.argmax(p, axis=1))


def from_ordering(ordering) -> np.ndarray:
    seq = [int(v) for v in ordering]
    d = len(seq)
    if sorted(seq) != list(range(d)):
        raise InvalidPermutationError(f"{seq} is not a permutation of 0..{d - 1}")
    p = np.zeros((d, d))
    p[np.arange(d), seq] = 1.0
    return p


def positions(ordering) -> np.ndarray:
    """Inverse of an ordering: ``positions(o)[v]`` is the position of variable ``v``."""
    seq = np.asarray(ordering, dtype=int)
    pos = np.empty_like(seq)
    pos[seq] = np.arange(len(seq))
    return pos
