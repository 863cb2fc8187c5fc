import math

import numpy as np
import pytest

from adpsgd import engine, mixing
from adpsgd.engine import D1D, FM, GENERIC, RM, SDPSGD, LrSchedule, StrategyConfig
from adpsgd.errors import ConfigError, StalenessOverflowError, SynchronizationError
from adpsgd.objectives import Objective, SampleBatch, make_logistic, make_mlp, make_quadratic, sample_batch


@pytest.fixture(scope="module")
def logi():
    return make_logistic(5, 400, seed=0)[0]


@pytest.fixture(scope="module")
def quad():
    return make_quadratic(6, 10.0, 0.2, seed=0, N=2048)[0]


def zero_gradient(obj):
    return Objective(
        "zero", obj.dimension, obj.dataset, obj._loss, lambda w, idx: np.zeros_like(w), obj._heldout, obj.init
    )


def spread_states(L, D, seed=0, depth=1):
    rng = np.random.default_rng(seed)
    states = [engine.LearnerState(l, rng.standard_normal(D), depth) for l in range(L)]
    return states


def replay_batches(obj, seed, L, M, iterations=1):
    """Batches each learner stream produces, in order."""
    rngs = engine.learner_streams(seed, L)
    return [[sample_batch(obj.dataset, M, rngs[l]) for l in range(L)] for _ in range(iterations)]


class TestSchedule:
    def test_warmup_endpoints(self):
        s = LrSchedule(0.32, 3.2, warmup_epochs=10)
        assert engine.lr_at(s, 0) == pytest.approx(0.32)
        assert engine.lr_at(s, 10) == pytest.approx(3.2)
        assert engine.lr_at(s, 5) == pytest.approx(0.32 + 0.5 * (3.2 - 0.32))

    def test_anneal_halves_after_two_epochs(self):
        s = LrSchedule(0.32, 3.2, warmup_epochs=10, anneal_start_epoch=12)
        assert engine.lr_at(s, 14) == pytest.approx(1.6, rel=1e-14)
        assert engine.lr_at(s, 11) == pytest.approx(3.2)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            engine.lr_at(LrSchedule(0.1, 0.1), -1)


class TestConfig:
    def test_rejects_unknown_strategy(self):
        with pytest.raises(ConfigError):
            StrategyConfig("gossip", 4, 4, 1, LrSchedule(0.1, 0.1))

    def test_ring_needs_three(self):
        with pytest.raises(ConfigError):
            StrategyConfig(FM, 2, 4, 1, LrSchedule(0.1, 0.1))
        StrategyConfig(FM, 1, 4, 1, LrSchedule(0.1, 0.1))


class TestSdpsgd:
    def test_equals_pooled_batch_sgd(self, logi):
        L, M, lr, seed = 4, 8, 0.3, 11
        w0 = np.random.default_rng(0).standard_normal(5)
        states = engine.step_sdpsgd(engine.init_states(w0, L), logi, M, lr, engine.learner_streams(seed, L))
        pooled = np.concatenate([b.indices for b in replay_batches(logi, seed, L, M)[0]])
        expected = w0 - lr * logi.gradient(w0, SampleBatch(pooled))
        for s in states:
            np.testing.assert_allclose(s.model, expected, atol=1e-10, rtol=0)

    def test_single_learner_is_plain_sgd(self, logi):
        w0 = np.ones(5)
        s = engine.step_sdpsgd(engine.init_states(w0, 1), logi, 8, 0.2, engine.learner_streams(3, 1))
        b = replay_batches(logi, 3, 1, 8)[0][0]
        np.testing.assert_array_equal(s[0].model, w0 - 0.2 * logi.gradient(w0, b))

    def test_zero_gradient_leaves_models(self, logi):
        w0 = np.arange(5.0)
        s = engine.step_sdpsgd(engine.init_states(w0, 3), zero_gradient(logi), 4, 0.5, engine.learner_streams(0, 3))
        for st in s:
            np.testing.assert_array_equal(st.model, w0)

    def test_requires_identical_models(self, logi):
        with pytest.raises(SynchronizationError):
            engine.step_sdpsgd(spread_states(3, 5), logi, 4, 0.1, engine.learner_streams(0, 3))


class TestRingMixing:
    def test_matches_dense_oracle(self, logi):
        L, M, lr, seed = 5, 6, 0.25, 4
        states = spread_states(L, 5, seed=1)
        w = engine.stack(states)
        t = mixing.build_random_ring(L, mixing.random_permutation(L, engine.mixing_stream(seed))).entries
        batches = replay_batches(logi, seed, L, M)[0]
        g = np.column_stack([logi.gradient(w[:, l], batches[l]) for l in range(L)])
        expected = w @ t - lr * g
        engine.step_adpsgd_mixing(states, logi, M, lr, RM, engine.learner_streams(seed, L), engine.mixing_stream(seed))
        np.testing.assert_allclose(engine.stack(states), expected, atol=1e-13)

    @pytest.mark.parametrize("kind", [FM, RM])
    def test_zero_gradient_is_pure_averaging(self, logi, kind):
        states = spread_states(8, 5, seed=2)
        w = engine.stack(states)
        mix_rng = engine.mixing_stream(0)
        t = engine.ring_matrix(kind, 8, engine.mixing_stream(0))
        engine.step_adpsgd_mixing(states, zero_gradient(logi), 4, 0.3, kind, engine.learner_streams(0, 8), mix_rng)
        np.testing.assert_allclose(engine.stack(states), w @ t, atol=1e-14)
        np.testing.assert_allclose(engine.stack(states).mean(axis=1), w.mean(axis=1), atol=1e-12)

    def test_identical_columns_reduce_to_local_sgd(self, logi):
        w0 = np.full(5, 0.3)
        states = engine.init_states(w0, 6)
        engine.step_adpsgd_mixing(states, logi, 4, 0.1, FM, engine.learner_streams(8, 6))
        for l, b in enumerate(replay_batches(logi, 8, 6, 4)[0]):
            np.testing.assert_allclose(states[l].model, w0 - 0.1 * logi.gradient(w0, b), atol=1e-15)

    def test_equals_generic_with_zero_staleness(self, logi):
        a = spread_states(6, 5, seed=3)
        b = engine.clone_states(a)
        engine.step_adpsgd_mixing(a, logi, 4, 0.2, FM, engine.learner_streams(1, 6))
        t = mixing.build_fixed_ring(6)
        engine.step_generic_staleness(b, logi, 4, 0.2, t, [0] * 6, engine.learner_streams(1, 6))
        np.testing.assert_array_equal(engine.stack(a), engine.stack(b))


class TestD1d:
    def test_columns_differ_by_scaled_gradients(self, logi):
        L, lr, seed = 5, 0.4, 2
        states = spread_states(L, 5, seed=4)
        w = engine.stack(states)
        batches = replay_batches(logi, seed, L, 4)[0]
        g = [logi.gradient(w[:, l], batches[l]) for l in range(L)]
        engine.step_d1d(states, logi, 4, lr, engine.learner_streams(seed, L))
        out = engine.stack(states)
        for i in range(L):
            for j in range(L):
                np.testing.assert_allclose(out[:, i] - out[:, j], -lr * (g[i] - g[j]), atol=1e-13)

    def test_zero_gradient_consensus_in_one_step(self, logi):
        states = spread_states(7, 5, seed=5)
        mean = engine.stack(states).mean(axis=1)
        engine.step_d1d(states, zero_gradient(logi), 4, 0.3, engine.learner_streams(0, 7))
        assert mixing.consensus_distance(engine.stack(states), "columns") == pytest.approx(0.0, abs=1e-14)
        np.testing.assert_allclose(states[0].model, mean, atol=1e-14)

    def test_first_step_matches_sdpsgd_gradient_point(self, logi):
        w0 = np.full(5, -0.2)
        a = engine.step_d1d(engine.init_states(w0, 4), logi, 4, 0.1, engine.learner_streams(6, 4))
        b = engine.step_sdpsgd(engine.init_states(w0, 4), logi, 4, 0.1, engine.learner_streams(6, 4))
        np.testing.assert_allclose(engine.average_columns(engine.stack(a)), b[0].model, atol=1e-15)

    def test_reconciliation_with_generic_staleness(self, logi):
        """The delay-by-one step is the generic step with zero staleness and uniform mixing.

        The one-iteration lag lives in the gradient point: learner l's model
        w_k^(l) equals the previous allreduced model minus its own last step,
        so the gradient is taken one averaging behind ``mean(W_k)``.  The
        generic step with tau = 1 and uniform mixing instead differentiates
        at w_{k-1}^(l), which is a different recursion.
        """
        L, lr, K = 4, 0.15, 5
        uni = mixing.build_uniform(L)
        d1d = spread_states(L, 5, seed=6)
        gen0 = engine.clone_states(d1d)
        gen1 = [engine.LearnerState(s.learner_id, s.model, 2) for s in d1d]
        r_d, r_0, r_1, replay = (engine.learner_streams(9, L) for _ in range(4))
        for k in range(K):
            before = engine.stack(d1d)
            engine.step_d1d(d1d, logi, 4, lr, r_d)
            engine.step_generic_staleness(gen0, logi, 4, lr, uni, [0] * L, r_0)
            engine.step_generic_staleness(gen1, logi, 4, lr, uni, [1] * L, r_1)
            np.testing.assert_allclose(engine.stack(d1d), engine.stack(gen0), atol=1e-14)
            after = engine.stack(d1d)
            grads = [logi.gradient(before[:, l], sample_batch(logi.dataset, 4, replay[l])) for l in range(L)]
            for l in range(L):
                np.testing.assert_allclose(after[:, l], before.mean(axis=1) - lr * grads[l], atol=1e-14)
                if k:
                    # the gradient point is one averaging behind: mean(W_{k-1}) minus the learner's own step
                    np.testing.assert_allclose(before[:, l], prev_mean - lr * prev_grads[l], atol=1e-14)
            prev_mean, prev_grads = before.mean(axis=1), grads
        assert np.max(np.abs(engine.stack(gen1) - engine.stack(d1d))) > 1e-6

    def test_generic_uniform_mean_follows_allreduce_sgd(self, logi):
        w0 = np.full(5, 0.4)
        gen = engine.step_generic_staleness(
            engine.init_states(w0, 4), logi, 4, 0.1, mixing.build_uniform(4), [0] * 4, engine.learner_streams(2, 4)
        )
        sd = engine.step_sdpsgd(engine.init_states(w0, 4), logi, 4, 0.1, engine.learner_streams(2, 4))
        np.testing.assert_allclose(engine.average_columns(engine.stack(gen)), sd[0].model, atol=1e-15)


class TestGenericStaleness:
    def test_lagged_gradient_point(self, logi):
        L, D = 3, 5
        states = [engine.LearnerState(l, np.zeros(D), 3) for l in range(L)]
        hist = [np.full(D, 0.1 * i) for i in range(1, 3)]
        for s in states:
            for h in hist:
                s.push(h.copy())
        # history is now [0.2, 0.1, 0.0] per learner
        taus = [0, 1, 2]
        batches = replay_batches(logi, 5, L, 4)[0]
        expected_g = np.column_stack([logi.gradient(states[l].lagged(taus[l]), batches[l]) for l in range(L)])
        w = engine.stack(states)
        t = mixing.build_fixed_ring(3)
        engine.step_generic_staleness(states, logi, 4, 0.3, t, taus, engine.learner_streams(5, L))
        np.testing.assert_allclose(engine.stack(states), w @ t.entries - 0.3 * expected_g, atol=1e-14)

    def test_overflow(self, logi):
        states = engine.init_states(np.zeros(5), 3, depth=2)
        with pytest.raises(StalenessOverflowError):
            engine.step_generic_staleness(
                states, logi, 4, 0.1, mixing.build_fixed_ring(3), [0, 2, 0], engine.learner_streams(0, 3)
            )


class TestRunTraining:
    def test_epoch_length_and_series(self, quad):
        cfg = StrategyConfig(FM, 4, 8, 3, LrSchedule(0.05, 0.05))
        rec = engine.run_training(cfg, quad)
        ipe = quad.dataset.n_train // 32
        assert rec.iterations_per_epoch == ipe
        assert rec.iteration == list(range(1, 3 * ipe + 1))
        assert len(rec.consensus) == len(rec.iteration_lr) == 3 * ipe
        assert rec.epoch == [1, 2, 3] and len(rec.heldout_loss) == 3
        assert all(d >= 0 for d in rec.consensus)

    def test_bit_identical_reruns(self, quad):
        cfg = StrategyConfig(RM, 6, 4, 2, LrSchedule(0.05, 0.05), seed=7)
        a, b = engine.run_training(cfg, quad), engine.run_training(cfg, quad)
        assert a.consensus == b.consensus and a.heldout_loss == b.heldout_loss
        np.testing.assert_array_equal(a.final_model, b.final_model)

    def test_single_learner_strategies_coincide(self, quad):
        recs = [
            engine.run_training(StrategyConfig(s, 1, 8, 2, LrSchedule(0.05, 0.05), seed=3), quad)
            for s in (SDPSGD, FM, RM, D1D)
        ]
        for r in recs[1:]:
            np.testing.assert_array_equal(r.final_model, recs[0].final_model)
            assert r.heldout_loss == recs[0].heldout_loss

    def test_single_learner_matches_hand_rolled_sgd(self, quad):
        rec = engine.run_training(StrategyConfig(SDPSGD, 1, 8, 1, LrSchedule(0.05, 0.05), seed=3), quad)
        w = quad.init(engine.aux_stream(3))
        rng = engine.learner_streams(3, 1)[0]
        for _ in range(rec.iterations_per_epoch):
            w = w - 0.05 * quad.gradient(w, sample_batch(quad.dataset, 8, rng))
        np.testing.assert_allclose(rec.final_model, w, atol=1e-14)

    def test_affine_gradient_makes_mean_trajectories_agree(self, quad):
        # with an affine gradient the learner mean evolves identically under every strategy
        finals = [
            engine.run_training(StrategyConfig(s, 8, 4, 2, LrSchedule(0.05, 0.05), seed=1), quad).final_model
            for s in (SDPSGD, FM, RM, D1D)
        ]
        for f in finals[1:]:
            np.testing.assert_allclose(f, finals[0], atol=1e-10)

    def test_generic_strategy_runs(self, quad):
        cfg = StrategyConfig(GENERIC, 5, 4, 1, LrSchedule(0.05, 0.05), tau_max=3, generic_mixing="random")
        rec = engine.run_training(cfg, quad)
        assert not rec.diverged and rec.final_heldout_loss() < rec.initial_heldout_loss

    def test_divergence_is_recorded_not_raised(self, quad):
        rec = engine.run_training(StrategyConfig(SDPSGD, 2, 8, 5, LrSchedule(1.0, 1.0)), quad)
        assert rec.diverged and rec.divergence_epoch == 1
        assert len(rec.heldout_loss) == 1
        assert not math.isfinite(rec.heldout_loss[-1]) or rec.heldout_loss[-1] > 10 * rec.initial_heldout_loss

    def test_dataset_must_match(self, quad):
        other = make_quadratic(6, 10.0, 0.2, seed=1)[1]
        with pytest.raises(ValueError):
            engine.run_training(StrategyConfig(SDPSGD, 1, 4, 1, LrSchedule(0.1, 0.1)), quad, other)

    def test_mlp_learns(self):
        obj, _ = make_mlp(4, 8, 3, 600, seed=0)
        rec = engine.run_training(StrategyConfig(RM, 4, 16, 6, LrSchedule(0.5, 0.5)), obj)
        assert rec.final_heldout_loss() < 0.7 * rec.initial_heldout_loss
