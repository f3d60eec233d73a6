"""Autoregressive simulation with the semi-implicit Euler update.

Each step predicts accelerations from the current window, integrates
velocity first and position second (unit timestep), drops the oldest
history frame, and rebuilds connectivity from the new positions. The model
carries no memory beyond the window. Boundary-material particles are
pinned to their current positions for every predicted frame.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from gns.errors import RolloutError
from gns.features import BOUNDARY, NormStats, ParticleState, finite_diff_accel
from gns.model import GnsModel, predict_accel


def euler_update(p, v, a):
    """Semi-implicit Euler: new velocity first, then position with it."""
    v_next = np.asarray(v) + np.asarray(a)
    p_next = np.asarray(p) + v_next
    return p_next, v_next


@dataclass
class Rollout:
    initial_window: np.ndarray      # (C+1, N, D)
    predicted: np.ndarray           # (K, N, D)
    step_seconds: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def full_positions(self) -> np.ndarray:
        """Initial window followed by the K predicted frames."""
        return np.concatenate([self.initial_window, self.predicted], axis=0)

    @property
    def num_steps(self) -> int:
        return self.predicted.shape[0]


def rollout(model: GnsModel, stats: NormStats, initial: ParticleState,
            steps: int, metadata: dict | None = None) -> Rollout:
    """Rolls the simulator forward `steps` frames from the initial window.

    On blow-up (non-finite coordinate or a particle straying past 10 box
    diagonals) a RolloutError carrying the partial rollout is raised.
    """
    if steps < 1:
        raise RolloutError(f"need at least 1 rollout step, got {steps}")
    window = initial.position_history.copy()
    boundary = initial.material == BOUNDARY
    pinned = window[-1, boundary]
    diag = float(np.linalg.norm(initial.box_hi - initial.box_lo))
    center = (initial.box_hi + initial.box_lo) / 2.0

    predicted = np.empty((steps,) + window.shape[1:], dtype=np.float64)
    timings = []
    state = initial
    for k in range(steps):
        t0 = time.perf_counter()
        accel = predict_accel(state, model, stats)
        p_next, _ = euler_update(window[-1], window[-1] - window[-2], accel)
        p_next[boundary] = pinned
        timings.append(time.perf_counter() - t0)

        bad = ~np.isfinite(p_next).all(axis=1)
        bad |= np.abs(p_next - center).max(axis=1) > 10.0 * diag
        if bad.any():
            partial = Rollout(initial.position_history.copy(), predicted[:k],
                              timings, metadata or {})
            raise RolloutError(
                f"rollout blew up at step {k} (particle {int(np.flatnonzero(bad)[0])})",
                step=k, partial=partial)

        predicted[k] = p_next
        window = np.concatenate([window[1:], p_next[None]], axis=0)
        state = state.with_history(window)

    return Rollout(initial.position_history.copy(), predicted, timings,
                   metadata or {})


def window_state(traj, t: int, num_velocities: int) -> ParticleState:
    """ParticleState for the window of C+1 positions ending at frame t.

    Positions are a read-only view into the trajectory; materials are
    copied (callers sometimes retag particles)."""
    c = num_velocities
    return ParticleState(
        position_history=traj.positions[t - c:t + 1],
        material=traj.materials.copy(),
        globals_=traj.globals_per_step[t],
        box_lo=traj.box_lo,
        box_hi=traj.box_hi,
    )


def teacher_forced_positions(model: GnsModel, stats: NormStats, traj,
                             num_velocities: int) -> np.ndarray:
    """One-step predicted positions from ground-truth windows.

    Frame k of the result predicts truth frame C+k+1; shape is
    (K - C - 1, N, D), aligned with traj.positions[C+1:].
    """
    c = num_velocities
    k_total = traj.num_steps - c - 1
    out = np.empty((k_total, traj.n_particles, traj.dims), dtype=np.float64)
    boundary = traj.materials == BOUNDARY
    for i, t in enumerate(range(c, traj.num_steps - 1)):
        state = window_state(traj, t, c)
        accel = predict_accel(state, model, stats)
        p_next, _ = euler_update(traj.positions[t],
                                 traj.positions[t] - traj.positions[t - 1], accel)
        p_next[boundary] = traj.positions[t][boundary]
        out[i] = p_next
    return out


def oracle_one_step_positions(traj, num_velocities: int) -> np.ndarray:
    """Teacher-forced positions using ground-truth finite-difference
    accelerations instead of a model; reproduces the truth exactly and
    anchors the evaluation plumbing."""
    c = num_velocities
    out = np.empty((traj.num_steps - c - 1, traj.n_particles, traj.dims))
    for i, t in enumerate(range(c, traj.num_steps - 1)):
        accel = finite_diff_accel(traj.positions[t - 1], traj.positions[t],
                                  traj.positions[t + 1])
        p_next, _ = euler_update(traj.positions[t],
                                 traj.positions[t] - traj.positions[t - 1], accel)
        out[i] = p_next
    return out
