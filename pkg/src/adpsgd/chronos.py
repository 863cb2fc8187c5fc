"""Discrete-event timing model of a training cluster with stragglers.

Synchronous strategies (SDPSGD, D1D) advance in global rounds that wait for
the slowest learner.  The asynchronous ring strategies (FM, RM) let every
learner loop at its own pace: each round overlaps one gradient computation with
one averaging exchange, and the averaging reads whatever model each partner
last published, never waiting for it.

``coupled_run`` attaches the training arithmetic to the asynchronous event
stream, so the interleaving decides which partner models get mixed and how
stale each gradient is.
"""

from __future__ import annotations

import csv
import heapq
import itertools
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import engine, mixing
from .engine import D1D, FM, RM, SDPSGD, RunRecord, StrategyConfig
from .errors import ConfigError, NumericalError, StalenessOverflowError
from .objectives import Objective, sample_batch

EVENT_KINDS = ("grad_start", "grad_done", "avg_start", "avg_done", "update")
_RANK = {k: i for i, k in enumerate(EVENT_KINDS)}


@dataclass(frozen=True)
class ClusterProfile:
    """Per-learner cost model, in seconds.

    ``compute_time`` is the base time for one minibatch gradient, scaled per
    learner by ``multipliers`` and by any straggler factor.  ``pair_comm_time``
    is one neighbour-averaging exchange, ``allreduce_time`` one global model
    allreduce, and ``sync_overhead`` a fixed barrier cost per D1D round.
    """

    L: int
    compute_time: float = 1.0
    pair_comm_time: float = 0.1
    allreduce_time: float = 0.1
    sync_overhead: float = 0.0
    multipliers: tuple = ()
    stragglers: tuple = ()

    def __post_init__(self):
        if self.L < 1:
            raise ConfigError("cluster needs at least one learner")
        if min(self.compute_time, self.pair_comm_time, self.allreduce_time) <= 0:
            raise ConfigError("compute and communication times must be positive")
        if self.sync_overhead < 0:
            raise ConfigError("sync overhead must be non-negative")
        if self.multipliers and (len(self.multipliers) != self.L or min(self.multipliers) <= 0):
            raise ConfigError("need one positive multiplier per learner")
        for lid, factor in self.stragglers:
            if not 0 <= lid < self.L:
                raise ConfigError(f"straggler id {lid} outside 0..{self.L - 1}")
            if factor < 1:
                raise ConfigError(f"straggler factor must be >= 1, got {factor}")

    def compute_of(self, learner: int) -> float:
        c = self.compute_time
        if self.multipliers:
            c *= self.multipliers[learner]
        for lid, factor in self.stragglers:
            if lid == learner:
                c *= factor
        return c

    def without_stragglers(self) -> "ClusterProfile":
        return replace(self, stragglers=())

    def with_straggler(self, learner: int, factor: float) -> "ClusterProfile":
        return replace(self, stragglers=((learner, float(factor)),))


@dataclass(frozen=True)
class Event:
    t: float
    learner: int
    kind: str
    iteration: int


@dataclass
class EventLog:
    events: list = field(default_factory=list)
    epoch_ends: list = field(default_factory=list)
    wallclock: float = 0.0

    def of_kind(self, kind: str) -> list:
        return [e for e in self.events if e.kind == kind]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "learner", "event", "iteration"])
            for e in self.events:
                w.writerow([f"{e.t:.17g}", e.learner, e.kind, e.iteration])


@dataclass(frozen=True)
class SlowdownReport:
    strategy: str
    factor: float
    baseline_epoch_time: float
    straggler_epoch_time: float

    @property
    def ratio(self) -> float:
        return self.straggler_epoch_time / self.baseline_epoch_time


class _Loop:
    """Priority queue of events ordered by (time, learner, kind)."""

    def __init__(self, record: bool = True):
        self._heap = []
        self._seq = itertools.count()
        self.log = EventLog()
        self.record = record

    def schedule(self, t: float, learner: int, kind: str, iteration: int) -> None:
        heapq.heappush(self._heap, (t, learner, _RANK[kind], next(self._seq), Event(t, learner, kind, iteration)))

    def pop(self) -> Optional[Event]:
        if not self._heap:
            return None
        ev = heapq.heappop(self._heap)[-1]
        if self.record:
            self.log.events.append(ev)
        return ev


def _simulate_sync(strategy: str, profile: ClusterProfile, rounds: int, epochs: int, record: bool) -> EventLog:
    L = profile.L
    loop = _Loop(record)
    t0 = 0.0
    compute = [profile.compute_of(l) for l in range(L)]
    for r in range(epochs * rounds):
        if strategy == SDPSGD:
            for l in range(L):
                loop.schedule(t0, l, "grad_start", r)
                loop.schedule(t0 + compute[l], l, "grad_done", r)
                loop.schedule(t0 + compute[l], l, "update", r)
            barrier = t0 + max(compute)
            for l in range(L):
                loop.schedule(barrier, l, "avg_start", r)
                loop.schedule(barrier + profile.allreduce_time, l, "avg_done", r)
            end = barrier + profile.allreduce_time
        else:
            for l in range(L):
                loop.schedule(t0, l, "grad_start", r)
                loop.schedule(t0, l, "avg_start", r)
                loop.schedule(t0 + compute[l], l, "grad_done", r)
                loop.schedule(t0 + profile.allreduce_time, l, "avg_done", r)
            end = t0 + max(max(compute), profile.allreduce_time) + profile.sync_overhead
            for l in range(L):
                loop.schedule(end, l, "update", r)
        while loop.pop() is not None:
            pass
        t0 = end
        if (r + 1) % rounds == 0:
            loop.log.epoch_ends.append(end)
    loop.log.wallclock = t0
    return loop.log


class _AsyncRing:
    """Event loop for FM/RM; learners run rounds independently.

    A round starts gradient computation and averaging together; the local
    update happens once both have finished, and the next round starts at once.
    ``hooks`` (optional) receives ``on_grad_start``, ``on_avg_done`` and
    ``on_update`` callbacks carrying the training arithmetic.
    """

    def __init__(self, profile: ClusterProfile, total_updates: int, updates_per_epoch: int, hooks=None, record=True):
        self.p = profile
        self.total = total_updates
        self.per_epoch = updates_per_epoch
        self.hooks = hooks
        self.loop = _Loop(record)
        self.done = 0
        self.pending = [0] * profile.L

    def _start_round(self, l: int, t: float, r: int) -> None:
        self.loop.schedule(t, l, "grad_start", r)
        self.loop.schedule(t, l, "avg_start", r)
        self.loop.schedule(t + self.p.compute_of(l), l, "grad_done", r)
        self.loop.schedule(t + self.p.pair_comm_time, l, "avg_done", r)

    def run(self) -> EventLog:
        for l in range(self.p.L):
            self._start_round(l, 0.0, 0)
        log = self.loop.log
        while self.done < self.total:
            ev = self.loop.pop()
            l, t, r = ev.learner, ev.t, ev.iteration
            if ev.kind == "grad_start" and self.hooks:
                self.hooks.on_grad_start(ev)
            elif ev.kind in ("grad_done", "avg_done"):
                if ev.kind == "avg_done" and self.hooks:
                    self.hooks.on_avg_done(ev)
                self.pending[l] += 1
                if self.pending[l] == 2:
                    self.pending[l] = 0
                    self.loop.schedule(t, l, "update", r)
            elif ev.kind == "update":
                self.done += 1
                if self.hooks:
                    stop = self.hooks.on_update(ev, self.done)
                else:
                    stop = False
                if self.done % self.per_epoch == 0:
                    log.epoch_ends.append(t)
                if stop:
                    break
                self._start_round(l, t, r + 1)
        log.wallclock = log.epoch_ends[-1] if log.epoch_ends else (log.events[-1].t if log.events else 0.0)
        return log


def simulate_wallclock(
    strategy: str, profile: ClusterProfile, iterations_per_learner: int, epochs: int = 1, record: bool = True
) -> EventLog:
    """Simulated wall-clock for ``epochs`` epochs of ``iterations_per_learner`` rounds.

    For FM/RM an epoch ends when the cluster has processed
    ``L * iterations_per_learner`` batches in total, whichever learners did them.
    """
    if iterations_per_learner < 1 or epochs < 1:
        raise ValueError("need at least one iteration and one epoch")
    if strategy in (SDPSGD, D1D):
        return _simulate_sync(strategy, profile, iterations_per_learner, epochs, record)
    if strategy in (FM, RM):
        per_epoch = profile.L * iterations_per_learner
        return _AsyncRing(profile, per_epoch * epochs, per_epoch, record=record).run()
    raise ValueError(f"no timing model for strategy {strategy!r}")


def slowdown_experiment(
    strategy: str,
    L: int,
    factors,
    profile: Optional[ClusterProfile] = None,
    iterations_per_learner: int = 20,
    straggler: int = 0,
) -> list[SlowdownReport]:
    """Epoch time with one slowed learner relative to the homogeneous cluster."""
    base_profile = (profile or ClusterProfile(L)).without_stragglers()
    if base_profile.L != L:
        raise ConfigError(f"profile has {base_profile.L} learners, expected {L}")
    base = simulate_wallclock(strategy, base_profile, iterations_per_learner, record=False).wallclock
    out = []
    for f in factors:
        if f < 1:
            raise ConfigError(f"straggler factor must be >= 1, got {f}")
        slow = simulate_wallclock(
            strategy, base_profile.with_straggler(straggler, f), iterations_per_learner, record=False
        ).wallclock
        out.append(SlowdownReport(strategy, float(f), base, slow))
    return out


class _Published:
    """A learner's last published model, visible to reads strictly after publication."""

    def __init__(self, w0: np.ndarray):
        self.t = -math.inf
        self.model = w0
        self.previous = w0

    def publish(self, t: float, w: np.ndarray) -> None:
        self.previous, self.model, self.t = self.model, w, t

    def read(self, t: float) -> np.ndarray:
        return self.model if self.t < t else self.previous


class _CoupledTrainer:
    def __init__(self, cfg: StrategyConfig, objective: Objective, L: int, ipe: int):
        self.cfg, self.obj, self.L, self.ipe = cfg, objective, L, ipe
        self.rngs = engine.learner_streams(cfg.seed, L)
        self.mix_rng = engine.mixing_stream(cfg.seed)
        w0 = objective.init(engine.aux_stream(cfg.seed))
        self.models = [w0.copy() for _ in range(L)]
        self.published = [_Published(self.models[l]) for l in range(L)]
        self.snap = [None] * L
        self.batch = [None] * L
        self.t_start = [0.0] * L
        self.half = [None] * L
        self.update_times = []
        self.perms = {}
        self.fixed = engine.ring_matrix(FM, L, None)
        self.rec = RunRecord(cfg.strategy, iterations_per_epoch=ipe)
        self.rec.initial_heldout_loss = objective.heldout_loss(w0)
        self.taus = []

    def _matrix(self, r: int) -> np.ndarray:
        if self.cfg.strategy == FM or self.L == 1:
            return self.fixed
        # permutations are drawn in round order so that lockstep learners share them
        while len(self.perms) <= r:
            self.perms[len(self.perms)] = engine.ring_matrix(RM, self.L, self.mix_rng)
        return self.perms[r]

    def on_grad_start(self, ev: Event) -> None:
        l = ev.learner
        self.snap[l] = self.models[l]
        self.batch[l] = sample_batch(self.obj.dataset, self.cfg.M, self.rngs[l])
        self.t_start[l] = ev.t

    def on_avg_done(self, ev: Event) -> None:
        l = ev.learner
        t = self._matrix(ev.iteration)
        rows = np.flatnonzero(t[:, l])
        vecs = [self.models[j] if j == l else self.published[j].read(ev.t) for j in rows]
        self.half[l] = engine.weighted_sum(vecs, t[rows, l])

    def on_update(self, ev: Event, done: int) -> bool:
        l = ev.learner
        inside = bisect_left(self.update_times, ev.t) - bisect_right(self.update_times, self.t_start[l])
        tau = inside // self.L
        if tau > self.cfg.tau_max:
            raise StalenessOverflowError(
                f"derived staleness {tau} exceeds tau_max {self.cfg.tau_max} at {ev}", event=ev
            )
        self.taus.append((l, tau))
        epoch = (done - 1) // (self.ipe * self.L)
        lr = engine.lr_at(self.cfg.schedule, epoch)
        g = self.obj.gradient(self.snap[l], self.batch[l])
        new = self.half[l] - lr * g
        self.models[l] = new
        self.published[l].publish(ev.t, new)
        self.update_times.append(ev.t)
        rec = self.rec
        if done % self.L == 0:
            w = np.column_stack(self.models)
            try:
                d = mixing.consensus_distance(w, "columns")
            except NumericalError:
                d = math.inf
            rec.iteration.append(done // self.L)
            rec.consensus.append(d)
            rec.iteration_lr.append(lr)
        if done % (self.ipe * self.L) == 0:
            w_bar = engine.average_columns(np.column_stack(self.models))
            h = self.obj.heldout_loss(w_bar) if np.all(np.isfinite(w_bar)) else math.inf
            rec.epoch.append(epoch + 1)
            rec.heldout_loss.append(h)
            rec.train_loss.append(self.obj.train_loss(w_bar) if math.isfinite(h) else math.inf)
            rec.epoch_lr.append(lr)
            rec.epoch_wallclock.append(ev.t)
            if engine._is_diverged(h, rec.initial_heldout_loss):
                rec.diverged = True
                rec.divergence_epoch = epoch + 1
                return True
        return False


def coupled_run(strategy: str, profile: ClusterProfile, cfg: StrategyConfig, objective: Objective, dataset=None):
    """Train under the timing model; returns ``(RunRecord, EventLog)``.

    FM/RM learners mix with partner models as published at event time, and the
    derived staleness of each gradient is the number of whole global
    iterations (``L`` updates) completed strictly while it was computed.
    Synchronous strategies are unaffected by timing statistically, so their
    record comes from the deterministic engine with wall-clock attached.
    """
    if strategy != cfg.strategy:
        cfg = replace(cfg, strategy=strategy)
    if profile.L != cfg.L:
        raise ConfigError(f"profile has {profile.L} learners, config has {cfg.L}")
    ipe = engine.iterations_per_epoch(objective.dataset.n_train, cfg.L, cfg.M)
    if strategy in (SDPSGD, D1D):
        rec = engine.run_training(cfg, objective, dataset)
        log = simulate_wallclock(strategy, profile, ipe, epochs=max(1, cfg.epochs))
        rec.epoch_wallclock = log.epoch_ends[: len(rec.epoch)]
        return rec, log
    if strategy not in (FM, RM):
        raise ValueError(f"no coupled mode for strategy {strategy!r}")
    if cfg.epochs < 1:
        raise ConfigError("coupled run needs at least one epoch")
    trainer = _CoupledTrainer(cfg, objective, cfg.L, ipe)
    per_epoch = ipe * cfg.L
    with np.errstate(over="ignore", invalid="ignore"):
        log = _AsyncRing(profile, per_epoch * cfg.epochs, per_epoch, hooks=trainer).run()
    rec = trainer.rec
    rec.final_model = engine.average_columns(np.column_stack(trainer.models))
    rec.staleness = trainer.taus
    return rec, log
