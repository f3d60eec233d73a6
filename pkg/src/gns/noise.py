"""Input corruption during training and the matching target adjustment.

Velocity noise is drawn per input step and folded into the position history
so that finite-difference velocities stay consistent: the earliest position
is left untouched and the most recent one absorbs the accumulated position
noise. The per-step scale is chosen so the accumulated velocity noise at
the final input step always has std sigma_v, whatever the accumulation
mode. Boundary-material particles are never corrupted (they are static and
masked out of the loss).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gns.errors import ConfigError
from gns.features import BOUNDARY, ParticleState

RANDOM_WALK = "random_walk"
ONLY_LAST = "only_last"
CORRELATED = "correlated"
UNCORRELATED = "uncorrelated"
NOISE_TYPES = (RANDOM_WALK, ONLY_LAST, CORRELATED, UNCORRELATED)


@dataclass
class NoiseConfig:
    noise_type: str = RANDOM_WALK
    sigma_v: float = 3e-4
    # Fraction of the accumulated position noise the target also corrects:
    # 0 trains the model to restore the clean next velocity, 1 the clean
    # next position; the Euler update cannot do both at once.
    position_correction_fraction: float = 0.0
    reconnect_after_noise: bool = False

    def __post_init__(self):
        if self.noise_type not in NOISE_TYPES:
            raise ConfigError(f"unknown noise_type '{self.noise_type}'")
        if self.sigma_v < 0:
            raise ConfigError(f"sigma_v must be >= 0, got {self.sigma_v}")
        if not 0.0 <= self.position_correction_fraction <= 1.0:
            raise ConfigError("position_correction_fraction must be in [0, 1]")


def _velocity_noise(shape, cfg: NoiseConfig, rng) -> np.ndarray:
    """Accumulated velocity noise per input step, shaped (C, N, D)."""
    steps, n, dims = shape
    if cfg.noise_type == RANDOM_WALK:
        draws = rng.normal(0.0, cfg.sigma_v / np.sqrt(steps), size=shape)
        return np.cumsum(draws, axis=0)
    if cfg.noise_type == UNCORRELATED:
        return rng.normal(0.0, cfg.sigma_v, size=shape)
    if cfg.noise_type == ONLY_LAST:
        noise = np.zeros(shape)
        noise[-1] = rng.normal(0.0, cfg.sigma_v, size=(n, dims))
        return noise
    # correlated: one draw per particle/dimension applied to every step
    return np.broadcast_to(rng.normal(0.0, cfg.sigma_v, size=(n, dims)), shape).copy()


def corrupt(state: ParticleState, cfg: NoiseConfig, rng):
    """Returns (noisy state, final-step velocity noise, final-step position noise).

    The returned noises are what adjust_target needs to keep the supervised
    target consistent with the corrupted inputs.
    """
    steps = state.num_velocities
    n, dims = state.n_particles, state.dims
    if cfg.sigma_v == 0.0 or n == 0:
        zero = np.zeros((n, dims))
        return state, zero, zero.copy()

    vel_noise = _velocity_noise((steps, n, dims), cfg, rng)
    vel_noise[:, state.material == BOUNDARY, :] = 0.0

    pos_noise = np.concatenate(
        [np.zeros((1, n, dims)), np.cumsum(vel_noise, axis=0)], axis=0)
    noisy = state.with_history(state.position_history + pos_noise)
    return noisy, vel_noise[-1], pos_noise[-1]


def adjust_target(true_accel, n_v, n_p, gamma: float = 0.0) -> np.ndarray:
    """Training target given the clean acceleration and the final-step noises.

    Subtracting n_v makes the Euler-integrated next velocity match the
    clean one; additionally subtracting n_p (gamma = 1) makes the next
    position match instead. Intermediate gamma blends the two corrections.
    """
    return np.asarray(true_accel) - np.asarray(n_v) - gamma * np.asarray(n_p)
