"""Mixing matrices for ring-based model averaging and their consensus theory.

Three families are built here: the uniform (allreduce) matrix, the fixed
three-neighbour ring, and the ring reindexed by a random permutation.  The
closed-form spectral quantities are checked against dense eigensolvers and
Monte-Carlo sampling elsewhere in the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, InvalidOrderError, NumericalError, OutOfRegimeError

FIXED = "fixed"
RANDOM = "random"
UNIFORM = "uniform"

STOCHASTIC_TOL = 1e-12
LEADING_EIG_TOL = 1e-9


@dataclass(frozen=True)
class Permutation:
    """Bijection on ``{0, ..., L-1}``.

    ``mapping[i]`` is the learner sitting at ring position ``i``.
    """

    mapping: tuple

    def __post_init__(self):
        if sorted(self.mapping) != list(range(len(self.mapping))):
            raise ValueError(f"not a permutation: {self.mapping}")

    @property
    def order(self) -> int:
        return len(self.mapping)

    def inverse(self) -> np.ndarray:
        inv = np.empty(self.order, dtype=np.int64)
        inv[np.asarray(self.mapping, dtype=np.int64)] = np.arange(self.order)
        return inv

    def matrix(self) -> np.ndarray:
        """Permutation matrix P with ``P[i, mapping[i]] = 1``."""
        p = np.zeros((self.order, self.order))
        p[np.arange(self.order), self.mapping] = 1.0
        return p


@dataclass(frozen=True)
class MixingMatrix:
    entries: np.ndarray
    kind: str
    permutation: Optional[Permutation] = field(default=None, compare=False)

    @property
    def order(self) -> int:
        return self.entries.shape[0]

    def is_doubly_stochastic(self, tol: float = STOCHASTIC_TOL) -> bool:
        return is_doubly_stochastic(self.entries, tol)


@dataclass(frozen=True)
class SpectralReport:
    lambda_hat: float
    spectral_gap: float


def is_doubly_stochastic(m: np.ndarray, tol: float = STOCHASTIC_TOL) -> bool:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        return False
    if np.any(m < 0):
        return False
    return bool(
        np.all(np.abs(m.sum(axis=0) - 1.0) <= tol) and np.all(np.abs(m.sum(axis=1) - 1.0) <= tol)
    )


def build_fixed_ring(L: int) -> MixingMatrix:
    """Each learner averages itself with its left and right ring neighbours."""
    if L < 3:
        raise InvalidOrderError(f"fixed ring needs L >= 3, got {L}")
    t = np.zeros((L, L))
    idx = np.arange(L)
    third = 1.0 / 3.0
    # at L=3 the three slots cover the whole ring, so plain assignment is safe
    t[idx, idx] = third
    t[idx, (idx - 1) % L] = third
    t[idx, (idx + 1) % L] = third
    return MixingMatrix(t, FIXED)


def build_uniform(L: int) -> MixingMatrix:
    if L < 2:
        raise InvalidOrderError(f"uniform matrix needs L >= 2, got {L}")
    return MixingMatrix(np.full((L, L), 1.0 / L), UNIFORM)


def random_permutation(L: int, rng: np.random.Generator) -> Permutation:
    """Fisher-Yates shuffle of ``range(L)`` driven by ``rng``."""
    a = list(range(L))
    for i in range(L - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        a[i], a[j] = a[j], a[i]
    return Permutation(tuple(a))


def build_random_ring(L: int, p: Permutation) -> MixingMatrix:
    """Return ``P^T T_f P`` for the permutation matrix P of ``p``.

    Learner ``a`` ends up averaging with the learners at the ring positions
    adjacent to its own position ``inverse(p)[a]``.
    """
    if p.order != L:
        raise DimensionError(f"permutation of order {p.order} for ring of order {L}")
    tf = build_fixed_ring(L).entries
    inv = p.inverse()
    return MixingMatrix(tf[np.ix_(inv, inv)], RANDOM, p)


def second_eigenvalue_magnitude(m: MixingMatrix | np.ndarray) -> SpectralReport:
    """Largest eigenvalue magnitude once the leading eigenvalue 1 is removed."""
    a = m.entries if isinstance(m, MixingMatrix) else np.asarray(m, dtype=float)
    try:
        eig = np.linalg.eigvals(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver failed on matrix:\n{a}") from exc
    lead = int(np.argmin(np.abs(eig - 1.0)))
    if abs(eig[lead] - 1.0) > LEADING_EIG_TOL:
        raise NumericalError(f"leading eigenvalue {eig[lead]} is not 1 for matrix:\n{a}")
    rest = np.delete(np.abs(eig), lead)
    lam = float(rest.max()) if rest.size else 0.0
    lam = min(max(lam, 0.0), 1.0)
    return SpectralReport(lam, 1.0 - lam)


def fm_lambda_closed_form(L: int) -> float:
    if L < 3:
        raise InvalidOrderError(f"fixed ring needs L >= 3, got {L}")
    return 1.0 / 3.0 + 2.0 / 3.0 * math.cos(2.0 * math.pi / L)


def _check_pre(L: int, k: int, min_order: int) -> None:
    if L < min_order:
        raise InvalidOrderError(f"need L >= {min_order}, got {L}")
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")


def fm_consensus_log10_bound(L: int, k: int) -> float:
    _check_pre(L, k, 3)
    if k == 0:
        return 0.0
    lam = fm_lambda_closed_form(L)
    # cos(2*pi/3) makes lam a rounding residue of 0 at L=3
    if lam <= 1e-15:
        return -math.inf
    return k * math.log10(lam)


def fm_consensus_bound(L: int, k: int) -> float:
    """Spectral-norm bound on the distance of ``T_f^k`` from the averaging matrix."""
    _check_pre(L, k, 3)
    if k == 0:
        return 1.0
    lam = fm_lambda_closed_form(L)
    if lam <= 1e-15:
        return 0.0
    return lam**k


def rm_consensus_log10_bound(L: int, k: int) -> float:
    _check_pre(L, k, 2)
    return 0.5 * math.log10(L - 1) - 0.5 * k * math.log10(3.0)


def rm_consensus_bound(L: int, k: int) -> float:
    """Bound on the expected distance from consensus after ``k`` random rings."""
    return 10.0 ** rm_consensus_log10_bound(L, k)


def consensus_distance(m: np.ndarray, mode: str = "product") -> float:
    """Spectral-norm distance from consensus.

    ``mode="product"`` treats ``m`` as an L x L product of mixing matrices and
    measures ``||m - 11^T/L||_2``.  ``mode="columns"`` treats ``m`` as a D x L
    matrix of learner parameters and measures ``||m (I - 11^T/L)||_2``.
    """
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise NumericalError("consensus distance of a non-finite matrix")
    if mode == "product":
        dev = m - 1.0 / m.shape[1]
    elif mode == "columns":
        dev = m - m.mean(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    gram = dev.T @ dev if dev.shape[1] <= dev.shape[0] else dev @ dev.T
    top = np.linalg.eigvalsh(gram)[-1]
    return math.sqrt(max(float(top), 0.0))


def rm_expected_gram(L: int) -> np.ndarray:
    """Closed form of E[T_r^T T_r] over uniform permutations (valid for L >= 6)."""
    if L <= 5:
        raise OutOfRegimeError(f"closed-form expected Gram matrix needs L >= 6, got {L}")
    g = np.full((L, L), 2.0 / (3.0 * (L - 1)))
    np.fill_diagonal(g, 1.0 / 3.0)
    return g


def rm_expected_gram_eigenvalues(L: int) -> np.ndarray:
    """Eigenvalues of :func:`rm_expected_gram`, descending."""
    if L <= 5:
        raise OutOfRegimeError(f"closed-form expected Gram matrix needs L >= 6, got {L}")
    rest = 1.0 / 3.0 - 2.0 / (3.0 * (L - 1))
    return np.concatenate([[1.0], np.full(L - 1, rest)])


def monte_carlo_gram(L: int, trials: int, rng: np.random.Generator) -> np.ndarray:
    """Sample mean of T_r^T T_r over ``trials`` independent random rings."""
    acc = np.zeros((L, L))
    for _ in range(trials):
        t = build_random_ring(L, random_permutation(L, rng)).entries
        acc += t.T @ t
    return acc / trials


@dataclass(frozen=True)
class DecayPoint:
    k: int
    measured: float
    bound: float
    log10_measured: float
    log10_bound: float
    std_error: float = 0.0
    sample_std: float = 0.0


def _log10(x: float) -> float:
    return math.log10(x) if x > 0 else -math.inf


def verify_consensus_decay(
    kind: str,
    L: int,
    k_max: int,
    trials: int = 1,
    rng: Optional[np.random.Generator] = None,
) -> list[DecayPoint]:
    """Measured distance of mixing products from consensus next to the bound.

    For the fixed ring the product ``T_f^k`` is formed exactly.  For the random
    ring the distance is averaged over ``trials`` independent permutation
    sequences; ``std_error`` is the standard error of that mean.
    """
    if k_max < 0 or trials < 1:
        raise ValueError("need k_max >= 0 and trials >= 1")
    if kind == FIXED:
        tf = build_fixed_ring(L).entries
        prod = np.eye(L)
        out = []
        for k in range(k_max + 1):
            if k:
                prod = prod @ tf
            d = consensus_distance(prod)
            out.append(
                DecayPoint(k, d, fm_consensus_bound(L, k), _log10(d), fm_consensus_log10_bound(L, k))
            )
        return out
    if kind == RANDOM:
        if L < 6:
            raise InvalidOrderError(f"random-ring decay check needs L >= 6, got {L}")
        if rng is None:
            raise ValueError("random-ring decay needs a random source")
        tf = build_fixed_ring(L).entries
        dist = np.empty((trials, k_max + 1))
        for t in range(trials):
            prod = np.eye(L)
            dist[t, 0] = consensus_distance(prod)
            for k in range(1, k_max + 1):
                inv = random_permutation(L, rng).inverse()
                prod = prod @ tf[np.ix_(inv, inv)]
                dist[t, k] = consensus_distance(prod)
        mean = dist.mean(axis=0)
        std = dist.std(axis=0, ddof=1) if trials > 1 else np.zeros(k_max + 1)
        se = std / math.sqrt(trials)
        return [
            DecayPoint(
                k,
                float(mean[k]),
                rm_consensus_bound(L, k),
                _log10(float(mean[k])),
                rm_consensus_log10_bound(L, k),
                float(se[k]),
                float(std[k]),
            )
            for k in range(k_max + 1)
        ]
    raise ValueError(f"unknown kind {kind!r}")


def adpsgd_rate_bound(K: int, M: int, mu: float, sigma: float, f0_gap: float) -> float:
    """Right-hand side of the ergodic rate bound for asynchronous decentralized SGD.

    ``mu`` is the gradient Lipschitz constant, ``sigma`` the gradient-variance
    bound and ``f0_gap`` the initial suboptimality ``f(w0) - f*``.
    """
    for name, v in (("K", K), ("M", M), ("mu", mu), ("sigma", sigma), ("f0_gap", f0_gap)):
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")
    return 20.0 * f0_gap * mu / K + 2.0 * (f0_gap + mu) * sigma / math.sqrt(M * K)


def mixing_matrix(kind: str, L: int, rng: Optional[np.random.Generator] = None) -> MixingMatrix:
    """Build one matrix of ``kind``; random rings draw a fresh permutation."""
    if kind == FIXED:
        return build_fixed_ring(L)
    if kind == UNIFORM:
        return build_uniform(L)
    if kind == RANDOM:
        if rng is None:
            raise ValueError("random ring needs a random source")
        return build_random_ring(L, random_permutation(L, rng))
    raise ValueError(f"unknown mixing kind {kind!r}")
