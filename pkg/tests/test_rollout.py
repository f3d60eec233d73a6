"""Update mechanism and autoregressive rollout behavior."""

import numpy as np
import pytest

from gns import features as F
from gns import model as M
from gns.errors import RolloutError
from gns.rollout import (Rollout, euler_update, oracle_one_step_positions,
                         rollout, teacher_forced_positions, window_state)


def small_model(seed=0, **overrides):
    base = dict(latent_size=16, mlp_hidden_size=16, message_passing_steps=2,
                connectivity_radius=0.08, dims=2)
    base.update(overrides)
    return M.init_model(M.GnsConfig(**base), seed=seed, dtype=np.float64)


def seeded_stats(rng):
    stats = F.NormStats(2, 5, F.RELATIVE, 1)
    stats.node.update(rng.standard_normal((50, stats.node.width)))
    stats.edge.update(rng.standard_normal((50, stats.edge.width)))
    stats.accel.update(1e-3 * rng.standard_normal((50, 2)))
    return stats


def moving_state(rng, n=8, c=5):
    base = rng.uniform(0.3, 0.7, size=(n, 2))
    vel = rng.uniform(-0.002, 0.002, size=(n, 2))
    hist = np.stack([base + k * vel for k in range(c + 1)], axis=0)
    return F.ParticleState(hist, np.full(n, F.MATERIAL_IDS["sand"]),
                           np.array([1e-4]), [0, 0], [1, 1])


class TestEulerUpdate:
    def test_at_rest(self):
        p, v = euler_update(np.array([1.0]), np.array([0.0]), np.array([0.0]))
        assert p == 1.0 and v == 0.0

    def test_substitution(self):
        p, v = euler_update(np.array([0.0]), np.array([1.0]), np.array([1.0]))
        assert v == 2.0 and p == 2.0

    def test_finite_difference_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            p_prev, p_curr, p_next = rng.standard_normal((3, 4, 2))
            acc = F.finite_diff_accel(p_prev, p_curr, p_next)
            got, _ = euler_update(p_curr, p_curr - p_prev, acc)
            np.testing.assert_allclose(got, p_next, atol=1e-12)


class TestRollout:
    def test_zero_decoder_weights_is_inertial(self):
        rng = np.random.default_rng(1)
        model = small_model()
        model.params["decoder/w2"].data[:] = 0.0
        model.params["decoder/b2"].data[:] = 0.0
        stats = seeded_stats(rng)
        stats.accel = F.RunningMoments(2)  # mean 0/std 1 so zero stays zero
        state = moving_state(rng)
        result = rollout(model, stats, state, steps=10)
        v0 = state.positions - state.position_history[-2]
        for k in range(10):
            expected = state.positions + (k + 1) * v0
            np.testing.assert_allclose(result.predicted[k], expected, atol=1e-9)

    def test_boundary_particles_never_move(self):
        rng = np.random.default_rng(2)
        model = small_model(seed=3)
        stats = seeded_stats(rng)
        state = moving_state(rng)
        state.material[1] = F.BOUNDARY
        state.material[5] = F.BOUNDARY
        # boundary rows should be static in the window too
        state.position_history[:, [1, 5]] = state.position_history[-1, [1, 5]]
        result = rollout(model, stats, state, steps=100)
        for idx in (1, 5):
            np.testing.assert_array_equal(
                result.predicted[:, idx],
                np.broadcast_to(state.positions[idx], (100, 2)))

    def test_one_step_equals_predict_plus_euler(self):
        rng = np.random.default_rng(3)
        model = small_model(seed=4)
        stats = seeded_stats(rng)
        state = moving_state(rng)
        result = rollout(model, stats, state, steps=1)
        accel = M.predict_accel(state, model, stats)
        expected, _ = euler_update(state.positions,
                                   state.positions - state.position_history[-2],
                                   accel)
        np.testing.assert_array_equal(result.predicted[0], expected)

    def test_initial_window_preserved(self):
        rng = np.random.default_rng(4)
        model = small_model(seed=5)
        stats = seeded_stats(rng)
        state = moving_state(rng)
        result = rollout(model, stats, state, steps=3)
        np.testing.assert_array_equal(result.full_positions[:6],
                                      state.position_history)
        assert result.num_steps == 3
        assert len(result.step_seconds) == 3

    def test_blow_up_reports_step_and_partial(self):
        rng = np.random.default_rng(5)
        model = small_model(seed=6)
        stats = seeded_stats(rng)
        # force huge denormalized accelerations
        stats.accel = F.RunningMoments(2)
        stats.accel.update(np.full((2, 2), 1e4))
        stats.accel.update(np.full((2, 2), -1e4))
        state = moving_state(rng)
        with pytest.raises(RolloutError) as err:
            rollout(model, stats, state, steps=50)
        assert err.value.step is not None
        assert isinstance(err.value.partial, Rollout)
        assert err.value.partial.num_steps == err.value.step

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        model = small_model(seed=7)
        stats = seeded_stats(rng)
        state = moving_state(rng)
        a = rollout(model, stats, state, steps=20).predicted
        b = rollout(model, stats, state, steps=20).predicted
        assert np.array_equal(a, b)

    def test_size_agnostic(self):
        # the same parameters drive a different particle count with no change
        rng = np.random.default_rng(7)
        model = small_model(seed=8)
        stats = seeded_stats(rng)
        big = moving_state(rng, n=40)
        result = rollout(model, stats, big, steps=5)
        assert result.predicted.shape == (5, 40, 2)


class TestTeacherForcing:
    def test_oracle_accelerations_reproduce_truth(self):
        from gns import datagen as D
        traj = D.simulate_scenario(D.Scenario(steps=40), seed=0)
        preds = oracle_one_step_positions(traj, num_velocities=5)
        np.testing.assert_allclose(preds, traj.positions[6:], atol=1e-12)

    def test_predictions_align_with_truth_frames(self):
        from gns import datagen as D
        rng = np.random.default_rng(8)
        traj = D.simulate_scenario(D.Scenario(steps=30, n_min=20, n_max=20), seed=1)
        model = small_model(seed=9, connectivity_radius=0.06)
        stats = seeded_stats(rng)
        preds = teacher_forced_positions(model, stats, traj, 5)
        assert preds.shape == (30 - 6, 20, 2)

    def test_window_state_slices_history(self):
        from gns import datagen as D
        traj = D.simulate_scenario(D.Scenario(steps=20), seed=2)
        state = window_state(traj, 7, 5)
        np.testing.assert_array_equal(state.position_history,
                                      traj.positions[2:8])
        np.testing.assert_array_equal(state.globals_, traj.globals_per_step[7])
