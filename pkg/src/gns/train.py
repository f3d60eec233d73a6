"""One-step supervised training with noise injection.

Each step draws windows from a shuffle buffer, corrupts the inputs,
computes noise-adjusted normalized acceleration targets, folds the
post-noise features into the running statistics, and takes one Adam step
on the masked MSE. The two samples of a batch are concatenated into one
block-diagonal graph so scatter/gather stay simple.

Everything that touches randomness draws from generators derived from
(seed, stream, step), so a run is fully determined by (seed, config,
dataset) and can resume bit-exactly from a checkpoint.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gns import tensor as T
from gns.datagen import TrajectoryDataset, Trajectory
from gns.errors import ConfigError, DataError, TrainingError, RolloutError
from gns.features import (NormStats, ParticleState, FeaturizedSample,
                          assemble_sample, finite_diff_accel, raw_features,
                          stats_update)
from gns.graph import build_kdtree, concat_edges, radius_edges
from gns.metrics import mse
from gns.model import GnsConfig, GnsModel, forward, init_model
from gns.noise import NoiseConfig, adjust_target, corrupt
from gns.rollout import rollout, window_state

STEP_NAME = "__train_step__"
CONSUMED_NAME = "__sampler_consumed__"
BEST_VAL_NAME = "__best_val_mse__"


@dataclass
class TrainConfig:
    """Desk-scale defaults; the source-scale schedule (20M steps, 5M decay)
    is reached by overriding max_steps and lr_decay_steps."""

    batch_size: int = 2
    max_steps: int = 50_000
    lr_start: float = 1e-4
    lr_final: float = 1e-6
    lr_decay_steps: float = 25_000
    shuffle_buffer: int = 10_000
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    eval_every: int = 2_500
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = noise_config_from_dict(self.noise)
        if not self.lr_start >= self.lr_final > 0:
            raise ConfigError("need lr_start >= lr_final > 0")
        if self.shuffle_buffer < self.batch_size:
            raise ConfigError("shuffle_buffer must be >= batch_size")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def noise_config_from_dict(data: dict) -> NoiseConfig:
    known = {f.name for f in dataclasses.fields(NoiseConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown noise config keys: {sorted(unknown)}")
    return NoiseConfig(**data)


def desk_model_config(connectivity_radius: float, **overrides) -> GnsConfig:
    """Reduced-width model preset sized for single-core desk training."""
    base = dict(latent_size=64, mlp_hidden_size=64, message_passing_steps=5,
                connectivity_radius=connectivity_radius)
    base.update(overrides)
    return GnsConfig(**base)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Exponential decay from lr_start toward the lr_final asymptote."""
    return cfg.lr_final + (cfg.lr_start - cfg.lr_final) * 0.1 ** (step / cfg.lr_decay_steps)


class WindowSampler:
    """Streams (trajectory, start) windows through a shuffle buffer.

    Trajectories are visited sequentially in a per-epoch shuffled order and
    every window of C+1 positions plus a successor is emitted once per
    epoch: a K-step trajectory yields K-C-1 windows. The buffer swaps a
    uniformly random slot per draw (size 1 degenerates to stream order).
    The draw sequence depends only on (seed, trajectory lengths), so
    fast_forward() replays it without touching position data.
    """

    def __init__(self, dataset: TrajectoryDataset, split: str,
                 num_velocities: int, buffer_size: int, seed: int):
        self.dataset = dataset
        self.paths = dataset.split(split)
        if not self.paths:
            raise DataError(f"split '{split}' is empty")
        self.num_velocities = num_velocities
        self.buffer_size = buffer_size
        self.rng = np.random.default_rng((seed, 1))
        self.consumed = 0
        lengths = []
        for path in self.paths:
            k = dataset.load(path).num_steps
            if k < num_velocities + 2:
                raise DataError(
                    f"trajectory '{path}' too short: {k} steps, need at least "
                    f"{num_velocities + 2}")
            lengths.append(k)
        self._lengths = lengths
        self._stream = self._windows()
        self._buffer = []

    def _windows(self):
        while True:
            for ti in self.rng.permutation(len(self.paths)):
                for t0 in range(self._lengths[ti] - self.num_velocities - 1):
                    yield (int(ti), t0)

    def next_window(self) -> tuple[int, int]:
        while len(self._buffer) < self.buffer_size:
            self._buffer.append(next(self._stream))
        slot = int(self.rng.integers(len(self._buffer)))
        item = self._buffer[slot]
        self._buffer[slot] = next(self._stream)
        self.consumed += 1
        return item

    def fast_forward(self, n: int) -> None:
        for _ in range(n):
            self.next_window()

    def materialize(self, window: tuple[int, int]):
        """Loads (ParticleState, next_position) for a (traj, start) window."""
        ti, t0 = window
        traj = self.dataset.load(self.paths[ti])
        t = t0 + self.num_velocities
        return window_state(traj, t, self.num_velocities), traj.positions[t + 1]


def _batch_graph(samples: list[FeaturizedSample]):
    offsets = np.cumsum([0] + [s.n_nodes for s in samples])[:-1]
    node_features = T.concat([s.node_features for s in samples], axis=0)
    edge_features = None
    if samples[0].edge_features is not None:
        edge_features = T.concat([s.edge_features for s in samples], axis=0)
    edges = concat_edges([s.edges for s in samples], offsets)
    target = T.concat([s.target_accel for s in samples], axis=0)
    mask = np.concatenate([s.loss_mask for s in samples])
    return FeaturizedSample(node_features, edge_features, edges, target, mask,
                            int(sum(s.n_nodes for s in samples)))


def corrupt_and_target(state: ParticleState, next_position, noise_cfg: NoiseConfig,
                       rng) -> tuple[ParticleState, np.ndarray]:
    """Noisy input state plus the matching adjusted acceleration target.

    The clean acceleration comes from positions before noise; the
    adjustment removes the final-step velocity noise (plus the configured
    fraction of position noise)."""
    noisy, n_v, n_p = corrupt(state, noise_cfg, rng)
    true_accel = finite_diff_accel(state.position_history[-2],
                                   state.positions, next_position)
    target = adjust_target(true_accel, n_v, n_p,
                           noise_cfg.position_correction_fraction)
    return noisy, target


def train_step(model: GnsModel, stats: NormStats, adam: T.AdamState,
               batch, cfg: TrainConfig, step: int) -> float:
    """One optimization step over a batch of (state, next_position) pairs.

    Statistics are updated with the whole batch's post-noise rows first,
    then every sample is normalized with the same updated statistics."""
    rng = np.random.default_rng((cfg.seed, 2, step))
    mcfg = model.cfg
    raws = []
    for state, next_position in batch:
        noisy, target = corrupt_and_target(state, next_position, cfg.noise, rng)
        edge_source = noisy if cfg.noise.reconnect_after_noise else state
        tree = build_kdtree(edge_source.positions)
        edges = radius_edges(tree, mcfg.connectivity_radius, mcfg.include_self_edges)
        raws.append(raw_features(noisy, edges, mcfg.encoder_variant,
                                 mcfg.connectivity_radius, target_accel=target))
    for raw in raws:
        stats_update(stats, node_rows=raw.node_rows, edge_rows=raw.edge_rows,
                     accel_rows=raw.target_accel)
    samples = [assemble_sample(raw, stats, model.embedding) for raw in raws]

    merged = _batch_graph(samples) if len(samples) > 1 else samples[0]
    with T.Tape() as tape:
        pred = forward(merged, model)
        loss = T.mse_loss(pred, merged.target_accel, merged.loss_mask)
        tape.backward(loss)
    loss_value = float(loss.data)

    lr = lr_schedule(step, cfg)
    if not np.isfinite(loss_value):
        norms = {name: float(np.linalg.norm(p.grad)) for name, p in
                 model.params.items() if p.grad is not None}
        worst = max(norms, key=norms.get) if norms else "n/a"
        raise TrainingError(
            f"non-finite loss at step {step} (lr={lr:.3e}, "
            f"largest grad norm {worst}={norms.get(worst, float('nan')):.3e})")
    grads = {name: p.grad for name, p in model.params.items()}
    T.adam_step(model.params, grads, adam, lr)
    T.zero_grads(model.params)
    return loss_value


def validation_rollout_mse(model: GnsModel, stats: NormStats,
                           dataset: TrajectoryDataset, split: str = "valid",
                           max_trajectories: int = 5) -> float:
    """Full-length rollout MSE averaged over held-out trajectories.

    Blown-up rollouts count as +inf so they can never win model selection.
    """
    c = model.cfg.velocity_history
    errors = []
    for rel in dataset.split(split)[:max_trajectories]:
        traj = dataset.load(rel)
        initial = window_state(traj, c, c)
        steps = traj.num_steps - c - 1
        try:
            result = rollout(model, stats, initial, steps)
        except RolloutError:
            errors.append(np.inf)
            continue
        errors.append(mse(result.predicted, traj.positions[c + 1:]))
    return float(np.mean(errors))


@dataclass
class FitResult:
    best_path: Path
    last_path: Path
    log_path: Path
    best_val_mse: float
    steps_done: int
    model: GnsModel
    stats: NormStats


def save_training_state(path, model: GnsModel, stats: NormStats,
                        adam: T.AdamState, step: int, consumed: int,
                        best_val: float) -> None:
    entries = dict(model.param_entries())
    entries.update(T.adam_entries(adam))
    entries.update(stats.state_entries())
    entries[STEP_NAME] = np.asarray([step], dtype=np.int64)
    entries[CONSUMED_NAME] = np.asarray([consumed], dtype=np.int64)
    entries[BEST_VAL_NAME] = np.asarray([best_val], dtype=np.float64)
    T.save_checkpoint(path, entries)
    with open(str(path) + ".config.json", "w") as fh:
        fh.write(model.cfg.to_json())


def load_model(path, dtype=np.float32) -> tuple[GnsModel, NormStats, dict]:
    """Rebuilds (model, stats) from a checkpoint plus its config sidecar."""
    sidecar = str(path) + ".config.json"
    try:
        with open(sidecar) as fh:
            cfg = GnsConfig.from_dict(json.load(fh))
    except FileNotFoundError:
        raise ConfigError(f"missing config sidecar {sidecar}")
    entries = T.load_checkpoint(path)
    model = init_model(cfg, seed=0, dtype=dtype)
    model.load_entries(entries)
    stats = NormStats(cfg.dims, cfg.velocity_history, cfg.encoder_variant,
                      cfg.num_globals)
    stats.load_state(entries)
    return model, stats, entries


def fit(dataset: TrajectoryDataset, cfg: TrainConfig,
        model_cfg: GnsConfig | None = None, out_dir="runs/run",
        resume_from=None) -> FitResult:
    """Runs the training loop, keeping the checkpoint with best validation
    rollout MSE; writes a CSV log (step, loss, lr, val_rollout_mse)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if model_cfg is None:
        model_cfg = desk_model_config(dataset.connectivity_radius)

    model = init_model(model_cfg, seed=cfg.seed)
    stats = NormStats(model_cfg.dims, model_cfg.velocity_history,
                      model_cfg.encoder_variant, model_cfg.num_globals)
    adam = T.AdamState()
    sampler = WindowSampler(dataset, "train", model_cfg.velocity_history,
                            cfg.shuffle_buffer, cfg.seed)
    start_step = 0
    best_val = np.inf
    if resume_from is not None:
        entries = T.load_checkpoint(resume_from)
        model.load_entries(entries)
        adam = T.adam_from_entries(entries)
        stats.load_state(entries)
        start_step = int(entries[STEP_NAME][0])
        best_val = float(entries[BEST_VAL_NAME][0])
        sampler.fast_forward(int(entries[CONSUMED_NAME][0]))

    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    log_path = out_dir / "train_log.csv"
    log_fh = open(log_path, "a" if resume_from else "w")
    if not resume_from:
        log_fh.write("step,loss,lr,val_rollout_mse\n")

    try:
        for step in range(start_step, cfg.max_steps):
            batch = [sampler.materialize(sampler.next_window())
                     for _ in range(cfg.batch_size)]
            loss = train_step(model, stats, adam, batch, cfg, step)

            done = step + 1
            val_cell = ""
            if done % cfg.eval_every == 0 or done == cfg.max_steps:
                val = validation_rollout_mse(model, stats, dataset)
                val_cell = repr(val)
                if val < best_val:
                    best_val = val
                    save_training_state(best_path, model, stats, adam, done,
                                        sampler.consumed, best_val)
            if done % cfg.log_every == 0 or val_cell or done == 1:
                log_fh.write(f"{done},{loss!r},{lr_schedule(step, cfg)!r},{val_cell}\n")
    finally:
        log_fh.close()

    save_training_state(last_path, model, stats, adam, cfg.max_steps,
                        sampler.consumed, best_val)
    if not best_path.exists():
        # no evaluation ever ran (e.g. max_steps=0): best is the last state
        save_training_state(best_path, model, stats, adam, cfg.max_steps,
                            sampler.consumed, best_val)
    return FitResult(best_path, last_path, log_path, best_val,
                     cfg.max_steps, model, stats)
