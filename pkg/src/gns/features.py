"""Input featurization, supervised targets, and streaming normalization.

Node features are assembled as [flattened velocity history, clipped wall
distances, (raw position, absolute variant only), material embedding,
globals]; edge features are [receiver - sender displacement, its norm].
Every continuous block is normalized elementwise by streaming statistics;
the learned material embedding is excluded. Velocities and accelerations
are unit-timestep finite differences of positions, which keeps them
algebraically consistent with the semi-implicit Euler update used at
rollout time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gns import tensor as T
from gns.errors import DataError, DimensionError
from gns.graph import EdgeList

MATERIALS = ("water", "sand", "goop", "rigid", "boundary")
MATERIAL_IDS = {name: i for i, name in enumerate(MATERIALS)}
BOUNDARY = MATERIAL_IDS["boundary"]
NUM_MATERIALS = len(MATERIALS)
MATERIAL_EMBEDDING_SIZE = 16

STD_FLOOR = 1e-8

RELATIVE = "relative"
ABSOLUTE = "absolute"


@dataclass
class ParticleState:
    """Positions with velocity history plus per-particle and global context.

    position_history holds the last C+1 positions, oldest first, shaped
    (C+1, N, D); the current position is the final frame. The axis-aligned
    box is part of the world state (wall features are measured against it).
    """

    position_history: np.ndarray
    material: np.ndarray
    globals_: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray

    def __post_init__(self):
        self.position_history = np.asarray(self.position_history, dtype=np.float64)
        self.material = np.asarray(self.material, dtype=np.int64)
        self.globals_ = np.atleast_1d(np.asarray(self.globals_, dtype=np.float64))
        self.box_lo = np.asarray(self.box_lo, dtype=np.float64)
        self.box_hi = np.asarray(self.box_hi, dtype=np.float64)
        if self.position_history.ndim != 3:
            raise DimensionError(
                f"position_history must be (C+1, N, D), got {self.position_history.shape}")
        if not np.isfinite(self.position_history).all():
            raise DataError("non-finite coordinate in position history")

    @property
    def positions(self) -> np.ndarray:
        return self.position_history[-1]

    @property
    def n_particles(self) -> int:
        return self.position_history.shape[1]

    @property
    def dims(self) -> int:
        return self.position_history.shape[2]

    @property
    def num_velocities(self) -> int:
        return self.position_history.shape[0] - 1

    def with_history(self, history) -> "ParticleState":
        return ParticleState(history, self.material, self.globals_,
                             self.box_lo, self.box_hi)


def finite_diff_velocity(history: np.ndarray) -> np.ndarray:
    """C per-step velocities from C+1 positions (unit timestep)."""
    return np.diff(history, axis=0)


def finite_diff_accel(p_prev, p_curr, p_next) -> np.ndarray:
    """Average acceleration over one step: next - 2*current + previous."""
    return np.asarray(p_next) - 2.0 * np.asarray(p_curr) + np.asarray(p_prev)


def wall_distances(positions, box_lo, box_hi, r: float) -> np.ndarray:
    """Distance to each of the 2D axis-aligned walls, saturated at r.

    Columns are the D lower walls then the D upper walls. Interior particles
    farther than r from every wall see the constant vector (r, ..., r),
    which keeps the features translation-invariant away from walls.
    """
    lower = positions - np.asarray(box_lo)
    upper = np.asarray(box_hi) - positions
    return np.minimum(np.concatenate([lower, upper], axis=1), r)


class RunningMoments:
    """Streaming per-feature sum, sum of squares, and row count."""

    def __init__(self, width: int):
        self.width = width
        self.total = np.zeros(width, dtype=np.float64)
        self.total_sq = np.zeros(width, dtype=np.float64)
        self.count = 0

    def update(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.size == 0:
            return
        if rows.shape[1] != self.width:
            raise DimensionError(f"stats width {self.width} got rows of width {rows.shape[1]}")
        self.total += rows.sum(axis=0)
        self.total_sq += (rows * rows).sum(axis=0)
        self.count += rows.shape[0]

    @property
    def usable(self) -> bool:
        return self.count > 0

    def mean(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros(self.width)
        return self.total / self.count

    def std(self) -> np.ndarray:
        if self.count == 0:
            return np.ones(self.width)
        var = self.total_sq / self.count - self.mean() ** 2
        return np.sqrt(np.maximum(var, 0.0)) + STD_FLOOR

    def normalize(self, rows: np.ndarray) -> np.ndarray:
        if not self.usable:
            return np.asarray(rows, dtype=np.float64)
        return (rows - self.mean()) / self.std()

    def denormalize(self, rows: np.ndarray) -> np.ndarray:
        if not self.usable:
            return np.asarray(rows, dtype=np.float64)
        return rows * self.std() + self.mean()

    def state_entries(self, prefix: str):
        return {
            f"{prefix}/sum": self.total,
            f"{prefix}/sum_sq": self.total_sq,
            f"{prefix}/count": np.asarray([self.count], dtype=np.int64),
        }

    def load_state(self, entries, prefix: str) -> None:
        self.total = entries[f"{prefix}/sum"].astype(np.float64).copy()
        self.total_sq = entries[f"{prefix}/sum_sq"].astype(np.float64).copy()
        self.count = int(entries[f"{prefix}/count"][0])
        self.width = self.total.shape[0]


STATS_PREFIX = "__stats__"


def node_feature_width(dims, num_velocities, variant, num_globals,
                       embedding_size=MATERIAL_EMBEDDING_SIZE) -> int:
    width = num_velocities * dims + 2 * dims + embedding_size + num_globals
    if variant == ABSOLUTE:
        width += dims
    return width


def edge_feature_width(dims, variant) -> int:
    return 0 if variant == ABSOLUTE else dims + 1


def _continuous_width(dims, num_velocities, variant, num_globals) -> int:
    return node_feature_width(dims, num_velocities, variant, num_globals,
                              embedding_size=0)


class NormStats:
    """Streaming moments for node inputs, edge inputs, and targets."""

    def __init__(self, dims, num_velocities, variant, num_globals):
        self.node = RunningMoments(_continuous_width(dims, num_velocities, variant, num_globals))
        self.edge = RunningMoments(edge_feature_width(dims, RELATIVE))
        self.accel = RunningMoments(dims)

    @property
    def usable(self) -> bool:
        return self.node.usable

    def state_entries(self):
        out = {}
        out.update(self.node.state_entries(f"{STATS_PREFIX}/node"))
        out.update(self.edge.state_entries(f"{STATS_PREFIX}/edge"))
        out.update(self.accel.state_entries(f"{STATS_PREFIX}/accel"))
        return out

    def load_state(self, entries) -> None:
        self.node.load_state(entries, f"{STATS_PREFIX}/node")
        self.edge.load_state(entries, f"{STATS_PREFIX}/edge")
        self.accel.load_state(entries, f"{STATS_PREFIX}/accel")


def stats_update(stats: NormStats, node_rows=None, edge_rows=None, accel_rows=None) -> NormStats:
    """Accumulates raw (post-noise) feature rows into the streaming moments."""
    if node_rows is not None:
        stats.node.update(node_rows)
    if edge_rows is not None:
        stats.edge.update(edge_rows)
    if accel_rows is not None:
        stats.accel.update(accel_rows)
    return stats


@dataclass
class FeaturizedSample:
    """Network-ready tensors for one particle configuration."""

    node_features: T.Tensor
    edge_features: T.Tensor | None
    edges: EdgeList
    target_accel: T.Tensor | None
    loss_mask: np.ndarray
    n_nodes: int

    raw_node_rows: np.ndarray = field(repr=False, default=None)
    raw_edge_rows: np.ndarray = field(repr=False, default=None)


@dataclass
class RawSample:
    """Unnormalized feature rows for one state (pre-stats, pre-tensor)."""

    node_rows: np.ndarray
    edge_rows: np.ndarray | None
    edges: EdgeList
    material: np.ndarray
    target_accel: np.ndarray | None
    num_globals: int


def raw_features(state: ParticleState, edges: EdgeList, variant: str,
                 radius: float, target_accel=None) -> RawSample:
    """Assembles the raw continuous feature rows for one state."""
    if variant not in (RELATIVE, ABSOLUTE):
        raise DataError(f"unknown encoder variant '{variant}'")
    n = state.n_particles
    vel = finite_diff_velocity(state.position_history)
    vel_flat = np.transpose(vel, (1, 0, 2)).reshape(n, -1)
    walls = wall_distances(state.positions, state.box_lo, state.box_hi, radius)
    blocks = [vel_flat, walls]
    if variant == ABSOLUTE:
        blocks.append(state.positions)
    blocks.append(np.broadcast_to(state.globals_, (n, state.globals_.shape[0])))
    cont = np.concatenate(blocks, axis=1)

    if variant == RELATIVE:
        disp = state.positions[edges.receivers] - state.positions[edges.senders]
        dist = np.linalg.norm(disp, axis=1, keepdims=True)
        edge_rows = np.concatenate([disp, dist], axis=1)
    else:
        edge_rows = None
    return RawSample(cont, edge_rows, edges, state.material, target_accel,
                     state.globals_.shape[0])


def assemble_sample(raw: RawSample, stats: NormStats,
                    embedding_table: T.Tensor) -> FeaturizedSample:
    """Normalizes raw rows and builds the network-ready tensors.

    Only the embedding lookup is differentiable (gradient flows into the
    table); all other blocks are constants.
    """
    mats = raw.material
    if mats.size and (mats.min() < 0 or mats.max() >= embedding_table.shape[0]):
        raise DataError(
            f"unknown material id (valid range 0..{embedding_table.shape[0] - 1})")
    dtype = embedding_table.dtype
    cont = raw.node_rows
    cont_norm = stats.node.normalize(cont).astype(dtype)
    split = cont.shape[1] - raw.num_globals
    node_features = T.concat(
        [T.constant(cont_norm[:, :split]),
         T.gather_rows(embedding_table, mats),
         T.constant(cont_norm[:, split:])],
        axis=1)

    edge_features = None
    if raw.edge_rows is not None:
        edge_features = T.constant(stats.edge.normalize(raw.edge_rows).astype(dtype))

    target = None
    if raw.target_accel is not None:
        target = T.constant(stats.accel.normalize(raw.target_accel).astype(dtype))

    return FeaturizedSample(
        node_features=node_features,
        edge_features=edge_features,
        edges=raw.edges,
        target_accel=target,
        loss_mask=mats != BOUNDARY,
        n_nodes=cont.shape[0],
        raw_node_rows=cont,
        raw_edge_rows=raw.edge_rows,
    )


def featurize(state: ParticleState, edges: EdgeList, variant: str, radius: float,
              stats: NormStats, embedding_table: T.Tensor,
              target_accel=None, update_stats: bool = False) -> FeaturizedSample:
    """Builds normalized node/edge feature tensors and the training target.

    With update_stats the raw rows are folded into `stats` first and the
    freshly updated statistics are used for normalization, so early
    training starts from whatever has been seen so far. Batched training
    updates stats for the whole batch before normalizing (see train).
    """
    raw = raw_features(state, edges, variant, radius, target_accel)
    if update_stats:
        stats_update(stats, node_rows=raw.node_rows, edge_rows=raw.edge_rows,
                     accel_rows=raw.target_accel)
    return assemble_sample(raw, stats, embedding_table)
