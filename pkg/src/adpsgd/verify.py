"""Oracle suite: closed forms against numerics, Monte-Carlo against expectations.

Each check returns a :class:`CheckResult`; :func:`run_all` collects them for
the ``verify`` subcommand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine, mixing
from .objectives import SampleBatch, gradient_check, make_logistic, make_mlp, make_quadratic, sample_batch


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def check_fm_closed_form(L_range=range(3, 129), tol: float = 1e-9) -> CheckResult:
    worst, at = 0.0, None
    for L in L_range:
        err = abs(mixing.fm_lambda_closed_form(L) - mixing.second_eigenvalue_magnitude(mixing.build_fixed_ring(L)).lambda_hat)
        if err >= worst:
            worst, at = err, L
    return CheckResult(
        "fixed-ring second eigenvalue closed form",
        worst <= tol,
        f"max |closed form - eigensolver| = {worst:.3e} (at L={at}), tol {tol:g}",
    )


def check_rm_expected_gram(seed: int, orders=(8, 16), trials: int = 20000, tol: float = 0.01) -> CheckResult:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(10,)))
    parts, ok = [], True
    for L in orders:
        mc = mixing.monte_carlo_gram(L, trials, rng)
        entry_err = float(np.max(np.abs(mc - mixing.rm_expected_gram(L))))
        eig_err = float(np.max(np.abs(np.sort(np.linalg.eigvalsh(mc)) - np.sort(mixing.rm_expected_gram_eigenvalues(L)))))
        ok &= entry_err <= tol and eig_err <= tol
        parts.append(f"L={L}: entry {entry_err:.4f}, eigen {eig_err:.4f}")
    return CheckResult(f"random-ring expected Gram matrix ({trials} draws)", ok, "; ".join(parts) + f", tol {tol:g}")


def check_fm_exact_product(orders=(8, 16, 64), k_max: int = 200, slack: float = 1e-12) -> CheckResult:
    worst = -np.inf
    for L in orders:
        for p in mixing.verify_consensus_decay(mixing.FIXED, L, k_max):
            worst = max(worst, p.measured - p.bound)
    return CheckResult(
        "fixed-ring product consensus bound",
        worst <= slack,
        f"max (measured - bound) = {worst:.3e} over L in {tuple(orders)}, k <= {k_max}",
    )


def check_rm_decay(seed: int, orders=(16, 32), k_max: int = 30, trials: int = 1000) -> CheckResult:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    worst = -np.inf
    for L in orders:
        for p in mixing.verify_consensus_decay(mixing.RANDOM, L, k_max, trials, rng):
            worst = max(worst, p.measured - p.bound - 3 * p.std_error)
    return CheckResult(
        "random-ring expected consensus bound",
        worst <= 0,
        f"max (mean - bound - 3 s.e.) = {worst:.3e} over L in {tuple(orders)}, k <= {k_max}, {trials} trials",
    )


def sdpsgd_pooled_error(seed: int, L: int = 4, M: int = 8, lr: float = 0.1) -> float:
    """Distance between one allreduce step and SGD on the concatenated batches."""
    obj, _ = make_logistic(6, 512, seed)
    w0 = np.random.default_rng(seed).standard_normal(obj.dimension)
    states = engine.step_sdpsgd(engine.init_states(w0, L), obj, M, lr, engine.learner_streams(seed, L))
    replay = engine.learner_streams(seed, L)
    pooled = np.concatenate([sample_batch(obj.dataset, M, r).indices for r in replay])
    sgd = w0 - lr * obj.gradient(w0, SampleBatch(pooled))
    return max(float(np.max(np.abs(s.model - sgd))) for s in states)


def check_sdpsgd_pooled(seed: int, trials: int = 20, tol: float = 1e-10) -> CheckResult:
    worst = max(sdpsgd_pooled_error(seed * 1000 + i, L=2 + i % 7, M=1 + (3 * i) % 11) for i in range(trials))
    return CheckResult(
        "allreduce step equals pooled-batch SGD",
        worst <= tol,
        f"max deviation {worst:.3e} over {trials} trials, tol {tol:g}",
    )


def check_gradients(seed: int, points: int = 20) -> CheckResult:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(12,)))
    cases = [
        ("quadratic", make_quadratic(8, 10.0, 0.5, seed)[0], 1e-5),
        ("logistic", make_logistic(6, 256, seed)[0], 1e-5),
        ("mlp", make_mlp(4, 5, 3, 256, seed)[0], 1e-4),
    ]
    parts, ok = [], True
    for name, obj, tol in cases:
        err = gradient_check(obj, points, rng)
        ok &= err <= tol
        parts.append(f"{name} {err:.2e} (tol {tol:g})")
    return CheckResult("finite-difference gradients", ok, "; ".join(parts))


def run_all(seed: int = 0) -> list[CheckResult]:
    return [
        check_fm_closed_form(),
        check_rm_expected_gram(seed),
        check_fm_exact_product(),
        check_rm_decay(seed),
        check_sdpsgd_pooled(seed),
        check_gradients(seed),
    ]
