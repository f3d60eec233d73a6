"""Noise injection and the target-adjustment round trips."""

import numpy as np
import pytest

from gns import noise as N
from gns.errors import ConfigError
from gns.features import BOUNDARY, MATERIAL_IDS, ParticleState, finite_diff_accel
from gns.rollout import euler_update


def make_state(rng, n=8, c=5):
    base = rng.uniform(0.3, 0.7, size=(n, 2))
    steps = rng.uniform(-0.003, 0.003, size=(c, n, 2))
    hist = np.concatenate([base[None], base[None] + np.cumsum(steps, axis=0)], axis=0)
    return ParticleState(hist, np.full(n, MATERIAL_IDS["sand"]),
                         np.array([1e-4]), [0, 0], [1, 1])


class TestCorrupt:
    def test_zero_sigma_is_identity(self):
        rng = np.random.default_rng(0)
        state = make_state(rng)
        noisy, n_v, n_p = N.corrupt(state, N.NoiseConfig(sigma_v=0.0), rng)
        assert noisy is state
        assert np.array_equal(n_v, np.zeros((8, 2)))
        assert np.array_equal(n_p, np.zeros((8, 2)))

    def test_only_last_touches_only_last_velocity(self):
        rng = np.random.default_rng(1)
        state = make_state(rng)
        noisy, n_v, _ = N.corrupt(state, N.NoiseConfig(noise_type=N.ONLY_LAST,
                                                       sigma_v=1e-3), rng)
        clean_vel = np.diff(state.position_history, axis=0)
        noisy_vel = np.diff(noisy.position_history, axis=0)
        np.testing.assert_allclose(noisy_vel[:-1], clean_vel[:-1], atol=1e-15)
        assert np.abs(noisy_vel[-1] - clean_vel[-1]).max() > 0
        np.testing.assert_allclose(noisy_vel[-1] - clean_vel[-1], n_v, atol=1e-12)

    @pytest.mark.parametrize("kind", N.NOISE_TYPES)
    def test_last_step_velocity_noise_std(self, kind):
        # Monte-Carlo: accumulated velocity noise at the last input step has
        # std sigma_v for every accumulation mode (2% tolerance, 1e5 draws).
        rng = np.random.default_rng(2)
        sigma = 3e-4
        draws = N._velocity_noise((5, 20000, 1), N.NoiseConfig(noise_type=kind,
                                                               sigma_v=sigma), rng)
        measured = draws[-1].std()
        assert abs(measured - sigma) / sigma < 0.02

    def test_position_velocity_consistency(self):
        rng = np.random.default_rng(3)
        state = make_state(rng)
        cfg = N.NoiseConfig(sigma_v=1e-3)
        noisy, n_v, n_p = N.corrupt(state, cfg, rng)
        # earliest position untouched; last carries the accumulated noise
        np.testing.assert_array_equal(noisy.position_history[0],
                                      state.position_history[0])
        np.testing.assert_allclose(noisy.positions - state.positions, n_p, atol=1e-15)
        # velocity noise at the last step equals the returned n_v
        dvel = np.diff(noisy.position_history, axis=0) - np.diff(state.position_history, axis=0)
        np.testing.assert_allclose(dvel[-1], n_v, atol=1e-12)

    def test_boundary_particles_exempt(self):
        rng = np.random.default_rng(4)
        state = make_state(rng)
        state.material[2] = BOUNDARY
        noisy, n_v, n_p = N.corrupt(state, N.NoiseConfig(sigma_v=1e-3), rng)
        np.testing.assert_array_equal(noisy.position_history[:, 2],
                                      state.position_history[:, 2])
        assert np.array_equal(n_v[2], [0, 0])
        assert np.array_equal(n_p[2], [0, 0])

    def test_reproducible_from_seed(self):
        state = make_state(np.random.default_rng(5))
        cfg = N.NoiseConfig(sigma_v=1e-3)
        a = N.corrupt(state, cfg, np.random.default_rng(42))
        b = N.corrupt(state, cfg, np.random.default_rng(42))
        np.testing.assert_array_equal(a[0].position_history, b[0].position_history)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            N.NoiseConfig(noise_type="bogus")
        with pytest.raises(ConfigError):
            N.NoiseConfig(sigma_v=-1.0)
        with pytest.raises(ConfigError):
            N.NoiseConfig(position_correction_fraction=1.5)


class TestAdjustTarget:
    def test_zero_noise_identity(self):
        acc = np.array([[1.0, 2.0]])
        out = N.adjust_target(acc, np.zeros((1, 2)), np.zeros((1, 2)), 0.0)
        np.testing.assert_array_equal(out, acc)

    def _round_trip(self, gamma, rng):
        state = make_state(rng)
        next_position = state.positions + rng.uniform(-0.003, 0.003, size=(8, 2))
        noisy, n_v, n_p = N.corrupt(state, N.NoiseConfig(sigma_v=1e-3), rng)
        true_accel = finite_diff_accel(state.position_history[-2],
                                       state.positions, next_position)
        target = N.adjust_target(true_accel, n_v, n_p, gamma)
        noisy_vel = noisy.positions - noisy.position_history[-2]
        return euler_update(noisy.positions, noisy_vel, target), state, next_position

    def test_gamma_zero_restores_clean_velocity(self):
        rng = np.random.default_rng(6)
        (p_next, v_next), state, clean_next = self._round_trip(0.0, rng)
        clean_velocity = clean_next - state.positions
        np.testing.assert_allclose(v_next, clean_velocity, atol=1e-12)

    def test_gamma_one_restores_clean_position(self):
        rng = np.random.default_rng(7)
        (p_next, _), _, clean_next = self._round_trip(1.0, rng)
        np.testing.assert_allclose(p_next, clean_next, atol=1e-12)

    def test_intermediate_gamma_blends_linearly(self):
        rng = np.random.default_rng(8)
        acc = rng.standard_normal((4, 2))
        n_v = rng.standard_normal((4, 2))
        n_p = rng.standard_normal((4, 2))
        lo = N.adjust_target(acc, n_v, n_p, 0.0)
        hi = N.adjust_target(acc, n_v, n_p, 1.0)
        mid = N.adjust_target(acc, n_v, n_p, 0.3)
        np.testing.assert_allclose(mid, 0.7 * lo + 0.3 * hi, atol=1e-12)
