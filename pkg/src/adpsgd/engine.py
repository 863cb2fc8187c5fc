"""Training loop for synchronous and asynchronous decentralized SGD.

All strategies are instances of the matrix update

    W_{k+1} = W_k T_k - lr * G(Phi_k)

where column ``l`` of ``W_k`` is learner ``l``'s model, ``T_k`` a doubly
stochastic mixing matrix and column ``l`` of ``G`` the minibatch gradient at
the model ``Phi_k[:, l]`` learner ``l`` used.  The engine runs them one global
iteration at a time, so results are reproducible bit for bit given a seed.
"""

from __future__ import annotations

import copy
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import mixing
from .errors import ConfigError, NumericalError, StalenessOverflowError, SynchronizationError
from .objectives import Objective, sample_batch

SDPSGD = "sdpsgd"
FM = "adpsgd_fm"
RM = "adpsgd_rm"
D1D = "adpsgd_d1d"
GENERIC = "generic"
STRATEGIES = (SDPSGD, FM, RM, D1D, GENERIC)

DIVERGENCE_FACTOR = 10.0
SYNC_TOL = 1e-12


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from ``base_lr`` to ``peak_lr``, then geometric annealing.

    The rate reaches ``peak_lr`` at epoch ``warmup_epochs`` and is multiplied by
    ``anneal_factor`` once per epoch from ``anneal_start_epoch`` on.
    """

    base_lr: float
    peak_lr: float
    warmup_epochs: int = 0
    anneal_factor: float = 1.0 / math.sqrt(2.0)
    anneal_start_epoch: int = 10**9

    def __post_init__(self):
        if self.base_lr <= 0 or self.peak_lr <= 0 or self.anneal_factor <= 0:
            raise ConfigError("learning rates and anneal factor must be positive")
        if self.warmup_epochs < 0 or self.anneal_start_epoch < 0:
            raise ConfigError("epoch counts must be non-negative")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    s = schedule
    if epoch < s.warmup_epochs:
        lr = s.base_lr + (s.peak_lr - s.base_lr) * epoch / s.warmup_epochs
    else:
        lr = s.peak_lr
    if epoch >= s.anneal_start_epoch:
        lr *= s.anneal_factor ** (epoch - s.anneal_start_epoch)
    return lr


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str
    L: int
    M: int
    epochs: int
    schedule: LrSchedule
    seed: int = 0
    tau_max: int = 0
    generic_mixing: str = mixing.FIXED

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.L < 1 or self.M < 1 or self.epochs < 0:
            raise ConfigError("need L >= 1, M >= 1, epochs >= 0")
        # L=1 degenerates to plain SGD for every strategy; a 2-ring has no distinct neighbours
        if self.strategy in (FM, RM) and self.L == 2:
            raise ConfigError(f"{self.strategy} needs L >= 3 (or L = 1)")
        if self.strategy == GENERIC and self.generic_mixing != mixing.UNIFORM and self.L == 2:
            raise ConfigError("ring mixing needs L >= 3")
        if self.tau_max < 0:
            raise ConfigError("tau_max must be non-negative")

    @property
    def history_depth(self) -> int:
        return self.tau_max + 1


class LearnerState:
    """One learner's current model plus a bounded history of earlier ones.

    ``history[0]`` is the current model, ``history[t]`` the model ``t``
    iterations back.  The buffer starts filled with copies of ``w0`` so that
    lags reaching before iteration 0 resolve to the initial model.
    """

    def __init__(self, learner_id: int, w0: np.ndarray, depth: int = 1):
        if depth < 1:
            raise ValueError("history depth must be >= 1")
        self.learner_id = learner_id
        self.history = deque((w0.copy() for _ in range(depth)), maxlen=depth)

    @property
    def model(self) -> np.ndarray:
        return self.history[0]

    @property
    def depth(self) -> int:
        return self.history.maxlen

    def lagged(self, tau: int) -> np.ndarray:
        if tau < 0 or tau >= self.depth:
            raise StalenessOverflowError(
                f"learner {self.learner_id}: staleness {tau} exceeds history depth {self.depth}"
            )
        return self.history[tau]

    def push(self, w: np.ndarray) -> None:
        self.history.appendleft(w)


def init_states(w0: np.ndarray, L: int, depth: int = 1) -> list[LearnerState]:
    return [LearnerState(l, w0, depth) for l in range(L)]


def clone_states(states: Sequence[LearnerState]) -> list[LearnerState]:
    return copy.deepcopy(list(states))


def stack(states: Sequence[LearnerState]) -> np.ndarray:
    """D x L matrix whose columns are the learners' current models."""
    return np.column_stack([s.model for s in states])


def learner_streams(seed: int, L: int) -> list[np.random.Generator]:
    """Independent per-learner random sources; stream ``l`` depends only on (seed, l)."""
    return [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, l))) for l in range(L)]


def mixing_stream(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))


def aux_stream(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))


def weighted_sum(vectors: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """``sum_i weights[i] * vectors[i]`` accumulated left to right."""
    acc = weights[0] * vectors[0]
    for v, t in zip(vectors[1:], weights[1:]):
        acc = acc + t * v
    return acc


def mix_columns(w: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``W @ T`` with each output column summed over non-zero weights in learner order."""
    out = np.empty_like(w)
    for l in range(t.shape[1]):
        rows = np.flatnonzero(t[:, l])
        out[:, l] = weighted_sum([w[:, j] for j in rows], t[rows, l])
    return out


def average_columns(w: np.ndarray) -> np.ndarray:
    acc = w[:, 0].copy()
    for j in range(1, w.shape[1]):
        acc += w[:, j]
    return acc / w.shape[1]


def _gradients(points: Sequence[np.ndarray], objective: Objective, M: int, rngs) -> np.ndarray:
    ds = objective.dataset
    return np.column_stack(
        [objective.gradient(p, sample_batch(ds, M, rng)) for p, rng in zip(points, rngs)]
    )


def _commit(states: list[LearnerState], w_new: np.ndarray) -> list[LearnerState]:
    for l, s in enumerate(states):
        s.push(w_new[:, l].copy())
    return states


# The step functions update ``states`` in place and return them.


def step_sdpsgd(states, objective: Objective, M: int, lr: float, rngs) -> list[LearnerState]:
    """Allreduce SGD: local step from the shared model, then exact averaging."""
    w = stack(states)
    spread = float(np.max(np.abs(w - w[:, :1]))) if w.size else 0.0
    if spread > SYNC_TOL:
        raise SynchronizationError(f"learner models differ by {spread:.3e} at a synchronous step")
    g = _gradients([w[:, l] for l in range(w.shape[1])], objective, M, rngs)
    local = w - lr * g
    avg = average_columns(local)
    return _commit(states, np.repeat(avg[:, None], w.shape[1], axis=1))


def ring_matrix(mix_kind: str, L: int, mix_rng: Optional[np.random.Generator]) -> np.ndarray:
    if L == 1:
        return np.ones((1, 1))
    kind = {FM: mixing.FIXED, RM: mixing.RANDOM}.get(mix_kind, mix_kind)
    return mixing.mixing_matrix(kind, L, mix_rng).entries


def step_adpsgd_mixing(
    states, objective: Objective, M: int, lr: float, mix_kind: str, rngs, mix_rng=None, t: Optional[np.ndarray] = None
) -> list[LearnerState]:
    """Gradient at each learner's pre-averaging model, applied to the mixed model.

    ``mix_kind`` is ``FM`` or ``RM``; RM draws a fresh permutation from
    ``mix_rng`` on every call.  ``t`` overrides the matrix (used by coupled
    replays that already drew it).
    """
    w = stack(states)
    L = w.shape[1]
    if t is None:
        t = ring_matrix(mix_kind, L, mix_rng)
    g = _gradients([w[:, l] for l in range(L)], objective, M, rngs)
    return _commit(states, mix_columns(w, t) - lr * g)


def step_d1d(states, objective: Objective, M: int, lr: float, rngs) -> list[LearnerState]:
    """Delay-by-one: allreduce of the models overlapped with local gradients.

    Learner ``l`` evaluates its gradient at its own, not yet averaged model
    while the exact average is formed, then steps from the average.
    """
    w = stack(states)
    L = w.shape[1]
    g = _gradients([w[:, l] for l in range(L)], objective, M, rngs)
    avg = average_columns(w)
    return _commit(states, avg[:, None] - lr * g)


def step_generic_staleness(
    states, objective: Objective, M: int, lr: float, t: np.ndarray | mixing.MixingMatrix, taus: Sequence[int], rngs
) -> list[LearnerState]:
    """``W T - lr G`` where learner ``l``'s gradient uses its model ``taus[l]`` iterations back."""
    if isinstance(t, mixing.MixingMatrix):
        t = t.entries
    points = [s.lagged(int(tau)) for s, tau in zip(states, taus)]
    g = _gradients(points, objective, M, rngs)
    return _commit(states, mix_columns(stack(states), t) - lr * g)


@dataclass
class RunRecord:
    strategy: str
    iteration: list = field(default_factory=list)
    consensus: list = field(default_factory=list)
    iteration_lr: list = field(default_factory=list)
    epoch: list = field(default_factory=list)
    heldout_loss: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    epoch_lr: list = field(default_factory=list)
    epoch_wallclock: list = field(default_factory=list)
    initial_heldout_loss: float = float("nan")
    final_model: Optional[np.ndarray] = None
    diverged: bool = False
    divergence_epoch: Optional[int] = None
    iterations_per_epoch: int = 0
    staleness: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.iteration)

    def final_heldout_loss(self) -> float:
        return self.heldout_loss[-1] if self.heldout_loss else self.initial_heldout_loss


def iterations_per_epoch(n_train: int, L: int, M: int) -> int:
    return max(1, n_train // (L * M))


def _is_diverged(loss: float, initial: float) -> bool:
    return not math.isfinite(loss) or loss > DIVERGENCE_FACTOR * initial


def run_training(cfg: StrategyConfig, objective: Objective, dataset=None) -> RunRecord:
    """Run ``cfg.epochs`` epochs of the configured strategy.

    An epoch is ``N_train // (L * M)`` global iterations.  The heldout loss of
    the learner-averaged model is recorded after each epoch; a non-finite value,
    or one above ten times the initial loss, marks divergence and stops the run.
    """
    if dataset is not None and dataset is not objective.dataset:
        raise ValueError("dataset does not belong to objective")
    L, M = cfg.L, cfg.M
    ipe = iterations_per_epoch(objective.dataset.n_train, L, M)
    rngs = learner_streams(cfg.seed, L)
    mix_rng = mixing_stream(cfg.seed)
    aux = aux_stream(cfg.seed)
    w0 = objective.init(aux)
    depth = cfg.history_depth if cfg.strategy == GENERIC else 1
    states = init_states(w0, L, depth)
    rec = RunRecord(cfg.strategy, iterations_per_epoch=ipe)
    rec.initial_heldout_loss = objective.heldout_loss(w0)

    k = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for e in range(cfg.epochs):
            lr = lr_at(cfg.schedule, e)
            for _ in range(ipe):
                _step(cfg, states, objective, lr, rngs, mix_rng, aux, k)
                k += 1
                w = stack(states)
                try:
                    d = mixing.consensus_distance(w, "columns")
                except NumericalError:
                    d = math.inf
                rec.iteration.append(k)
                rec.consensus.append(d)
                rec.iteration_lr.append(lr)
                if not math.isfinite(d):
                    break
            w_bar = average_columns(stack(states))
            h = objective.heldout_loss(w_bar) if np.all(np.isfinite(w_bar)) else math.inf
            rec.epoch.append(e + 1)
            rec.heldout_loss.append(h)
            rec.train_loss.append(objective.train_loss(w_bar) if math.isfinite(h) else math.inf)
            rec.epoch_lr.append(lr)
            if _is_diverged(h, rec.initial_heldout_loss):
                rec.diverged = True
                rec.divergence_epoch = e + 1
                break
    rec.final_model = average_columns(stack(states))
    return rec


def _step(cfg, states, objective, lr, rngs, mix_rng, aux, k):
    s = cfg.strategy
    if s == SDPSGD:
        step_sdpsgd(states, objective, cfg.M, lr, rngs)
    elif s in (FM, RM):
        step_adpsgd_mixing(states, objective, cfg.M, lr, s, rngs, mix_rng)
    elif s == D1D:
        step_d1d(states, objective, cfg.M, lr, rngs)
    else:
        t = np.ones((1, 1)) if cfg.L == 1 else mixing.mixing_matrix(cfg.generic_mixing, cfg.L, mix_rng).entries
        taus = aux.integers(0, min(cfg.tau_max, k) + 1, size=cfg.L)
        step_generic_staleness(states, objective, cfg.M, lr, t, taus, rngs)
