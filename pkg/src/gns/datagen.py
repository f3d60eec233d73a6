"""Deterministic toy scenario simulators and the trajectory file format.

Two desk-scale scenarios stand in for heavyweight ground-truth engines:

* gravity-bounce: particles fall under gravity, push each other apart
  through a short-range linear repulsion, and reflect off the box walls
  with restitution < 1.
* springs: the same, plus a network of springs frozen from the initial
  neighbor structure, giving wobbly goop-like blobs.

Integration is symplectic Euler (velocity first, then position with the
new velocity) in float64; files store float32 positions. Everything is
reproducible byte-for-byte from (scenario, seed).
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gns.errors import ConfigError, DataError, FormatError, GenerationError
from gns.features import MATERIAL_IDS
from gns.graph import build_kdtree

GRAVITY_BOUNCE = "gravity-bounce"
SPRINGS = "springs"
SCENARIO_NAMES = (GRAVITY_BOUNCE, SPRINGS)


@dataclass
class Scenario:
    """Physics constants and sizing for one toy scenario family."""

    name: str = GRAVITY_BOUNCE
    box_lo: tuple = (0.0, 0.0)
    box_hi: tuple = (1.0, 1.0)
    n_min: int = 95
    n_max: int = 105
    gravity: float = 1.2e-4
    damping: float = 0.99        # per-step velocity retention factor
    restitution: float = 0.3
    repulsion_stiffness: float = 8e-3
    repulsion_radius: float = 0.028
    spring_stiffness: float = 3e-3
    spring_radius: float = 0.05
    dt: float = 1.0
    steps: int = 200
    seed: int = 0
    # learner-facing default; stored in the dataset manifest
    connectivity_radius: float = 0.06
    material: str = "sand"

    def __post_init__(self):
        if self.name not in SCENARIO_NAMES:
            raise ConfigError(f"unknown scenario '{self.name}'")
        if self.steps < 2:
            raise ConfigError("trajectory length must be at least 2 steps")
        if not 0 < self.n_min <= self.n_max:
            raise ConfigError("bad particle count range")
        if self.material not in MATERIAL_IDS:
            raise ConfigError(f"unknown material '{self.material}'")

    @property
    def dims(self) -> int:
        return len(self.box_lo)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("box_lo", "box_hi"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def springs_scenario(**overrides) -> Scenario:
    base = dict(name=SPRINGS, material="goop", damping=0.995,
                spring_stiffness=3e-3, spring_radius=0.05)
    base.update(overrides)
    return Scenario(**base)


@dataclass
class Trajectory:
    """One simulated sequence plus the metadata the learner needs."""

    positions: np.ndarray        # (K, N, D) float
    materials: np.ndarray        # (N,) int
    globals_per_step: np.ndarray  # (K, G) float
    dt: float
    box_lo: np.ndarray
    box_hi: np.ndarray
    scenario: str = ""

    @property
    def num_steps(self) -> int:
        return self.positions.shape[0]

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]

    @property
    def dims(self) -> int:
        return self.positions.shape[2]


def _initial_blob(scenario: Scenario, rng) -> tuple[np.ndarray, np.ndarray]:
    """Jittered-grid blob with a random center and shared initial velocity."""
    n = int(rng.integers(scenario.n_min, scenario.n_max + 1))
    dims = scenario.dims
    side = int(np.ceil(n ** (1.0 / dims)))
    spacing = 1.05 * scenario.repulsion_radius
    grid = np.stack(np.meshgrid(*([np.arange(side)] * dims), indexing="ij"),
                    axis=-1).reshape(-1, dims)[:n].astype(np.float64)
    pos = grid * spacing
    pos += rng.uniform(-0.15, 0.15, size=pos.shape) * spacing
    extent = pos.max(axis=0) - pos.min(axis=0)

    lo = np.asarray(scenario.box_lo)
    hi = np.asarray(scenario.box_hi)
    margin = 0.08
    center = rng.uniform(lo + margin + extent / 2, hi - margin - extent / 2)
    # bias the drop point upward so there is room to fall
    center[-1] = max(center[-1], lo[-1] + 0.55 * (hi[-1] - lo[-1]))
    pos += center - (pos.min(axis=0) + extent / 2)

    vel = np.broadcast_to(rng.uniform(-0.004, 0.004, size=dims), pos.shape).copy()
    vel += rng.uniform(-0.0004, 0.0004, size=pos.shape)
    return pos, vel


def _pair_forces(pos, pairs_i, pairs_j, rest, stiffness):
    """Equal/opposite linear spring forces; returns per-particle force sums."""
    forces = np.zeros_like(pos)
    if pairs_i.size == 0:
        return forces
    delta = pos[pairs_i] - pos[pairs_j]
    dist = np.linalg.norm(delta, axis=1)
    dist = np.maximum(dist, 1e-12)
    # positive = repulsive when compressed, attractive when stretched
    magnitude = stiffness * (rest - dist) / rest
    f = delta * (magnitude / dist)[:, None]
    np.add.at(forces, pairs_i, f)
    np.add.at(forces, pairs_j, -f)
    return forces


def _contact_pairs(pos, radius):
    tree = build_kdtree(pos)
    from gns import backend
    i, j = backend.tree_radius_pairs(*tree._arrays(), float(radius))
    return i, j


def simulate_scenario(scenario: Scenario, seed: int) -> Trajectory:
    """Integrates one trajectory; deterministic per (scenario, seed)."""
    rng = np.random.default_rng((scenario.seed, 3, seed))
    pos, vel = _initial_blob(scenario, rng)
    n, dims = pos.shape
    lo = np.asarray(scenario.box_lo, dtype=np.float64)
    hi = np.asarray(scenario.box_hi, dtype=np.float64)
    dt = scenario.dt

    spring_i = spring_j = np.empty(0, dtype=np.int64)
    spring_rest = np.empty(0)
    if scenario.name == SPRINGS and scenario.spring_stiffness > 0:
        spring_i, spring_j = _contact_pairs(pos, scenario.spring_radius)
        spring_rest = np.linalg.norm(pos[spring_i] - pos[spring_j], axis=1)

    gravity_vec = np.zeros(dims)
    gravity_vec[-1] = -scenario.gravity

    frames = np.empty((scenario.steps, n, dims), dtype=np.float64)
    frames[0] = pos
    for k in range(1, scenario.steps):
        accel = np.broadcast_to(gravity_vec, pos.shape).copy()
        if scenario.repulsion_stiffness > 0:
            ci, cj = _contact_pairs(pos, scenario.repulsion_radius)
            accel += _pair_forces(pos, ci, cj,
                                  scenario.repulsion_radius,
                                  scenario.repulsion_stiffness)
        if spring_i.size:
            delta = pos[spring_i] - pos[spring_j]
            dist = np.maximum(np.linalg.norm(delta, axis=1), 1e-12)
            magnitude = scenario.spring_stiffness * (spring_rest - dist) / np.maximum(spring_rest, 1e-12)
            f = delta * (magnitude / dist)[:, None]
            np.add.at(accel, spring_i, f)
            np.add.at(accel, spring_j, -f)

        vel = (vel + dt * accel) * scenario.damping
        pos = pos + dt * vel

        # mirror-reflect wall penetration, damping the normal velocity
        for low in (True, False):
            over = (pos < lo) if low else (pos > hi)
            if over.any():
                bound = lo if low else hi
                pos = np.where(over, 2 * bound - pos, pos)
                vel = np.where(over, -scenario.restitution * vel, vel)

        if not np.isfinite(pos).all():
            raise GenerationError(
                f"instability at step {k} of '{scenario.name}' "
                f"(gravity={scenario.gravity}, repulsion={scenario.repulsion_stiffness}, "
                f"springs={scenario.spring_stiffness})")
        frames[k] = pos

    globals_per_step = np.full((scenario.steps, 1), scenario.gravity)
    return Trajectory(
        positions=frames,
        materials=np.full(n, MATERIAL_IDS[scenario.material], dtype=np.int64),
        globals_per_step=globals_per_step,
        dt=dt,
        box_lo=lo,
        box_hi=hi,
        scenario=scenario.name,
    )


# ---------------------------------------------------------------------------
# Trajectory file format
#
# magic (8 bytes) | version u32 LE | header length u32 LE | header JSON
# | crc32 of header u32 LE | K*N*D little-endian float32 positions.
# The header carries dims/counts, dt, box, materials, per-step globals and
# the scenario name, so files are self-contained (rollout outputs reuse the
# same format).

TRAJ_MAGIC = b"GNSTRAJ\x00"
TRAJ_VERSION = 1


def write_trajectory(path, traj: Trajectory) -> None:
    if traj.num_steps < 2:
        raise DataError(f"trajectories need at least 2 frames, got {traj.num_steps}")
    header = {
        "dims": traj.dims,
        "n_particles": traj.n_particles,
        "num_steps": traj.num_steps,
        "dt": float(traj.dt),
        "box_lo": [float(v) for v in traj.box_lo],
        "box_hi": [float(v) for v in traj.box_hi],
        "materials": [int(m) for m in traj.materials],
        "globals_per_step": np.asarray(traj.globals_per_step, dtype=np.float64).tolist(),
        "scenario": traj.scenario,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(traj.positions, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC)
        fh.write(struct.pack("<II", TRAJ_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob)))
        fh.write(payload)


def read_trajectory(path) -> Trajectory:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != TRAJ_MAGIC:
        raise FormatError("not a trajectory file (bad magic)", offset=0)
    if len(raw) < 16:
        raise FormatError("truncated trajectory header", offset=len(raw))
    version, blob_len = struct.unpack_from("<II", raw, 8)
    if version != TRAJ_VERSION:
        raise FormatError(f"unsupported trajectory version {version}", offset=8)
    blob_end = 16 + blob_len
    if len(raw) < blob_end + 4:
        raise FormatError("truncated trajectory header", offset=len(raw))
    blob = raw[16:blob_end]
    (crc,) = struct.unpack_from("<I", raw, blob_end)
    if crc != zlib.crc32(blob):
        raise FormatError("trajectory header checksum mismatch", offset=blob_end)
    header = json.loads(blob.decode("utf-8"))
    k, n, dims = header["num_steps"], header["n_particles"], header["dims"]
    if k < 2:
        raise FormatError(f"invalid trajectory: num_steps={k} (need >= 2)", offset=16)
    expected = k * n * dims * 4
    actual = len(raw) - blob_end - 4
    if actual != expected:
        raise FormatError(
            f"payload length mismatch: expected {expected} bytes, got {actual}",
            offset=blob_end + 4)
    positions = np.frombuffer(raw, dtype="<f4", count=k * n * dims,
                              offset=blob_end + 4).reshape(k, n, dims)
    return Trajectory(
        positions=positions.astype(np.float64),
        materials=np.asarray(header["materials"], dtype=np.int64),
        globals_per_step=np.asarray(header["globals_per_step"], dtype=np.float64),
        dt=header["dt"],
        box_lo=np.asarray(header["box_lo"]),
        box_hi=np.asarray(header["box_hi"]),
        scenario=header["scenario"],
    )


SPLITS = ("train", "valid", "test")


def make_dataset(scenario: Scenario, out_dir, n_train=50, n_valid=5, n_test=5,
                 seed: int = 0) -> Path:
    """Simulates and writes a split dataset plus its JSON manifest.

    Per-trajectory seeds are (split_index, trajectory_index) tuples mixed
    with the dataset seed, so splits are disjoint by construction and
    regeneration is byte-identical.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {"train": n_train, "valid": n_valid, "test": n_test}
    manifest = {
        "format_version": 1,
        "scenario": scenario.to_dict(),
        "seed": seed,
        "connectivity_radius": scenario.connectivity_radius,
        "splits": {},
        "stats": None,  # filled in by training if ever exported
    }
    scenario = dataclasses.replace(scenario, seed=seed)
    for split_idx, split in enumerate(SPLITS):
        (out_dir / split).mkdir(exist_ok=True)
        entries = []
        for i in range(counts[split]):
            traj = simulate_scenario(scenario, seed=split_idx * 1_000_000 + i)
            rel = f"{split}/{i:04d}.traj"
            write_trajectory(out_dir / rel, traj)
            entries.append(rel)
        manifest["splits"][split] = entries
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out_dir


class TrajectoryDataset:
    """Lazy, cached access to the trajectories listed in a manifest."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"no manifest.json under {self.root}")
        with open(manifest_path) as fh:
            self.manifest = json.load(fh)
        self.scenario = Scenario.from_dict(self.manifest["scenario"])
        self.connectivity_radius = self.manifest["connectivity_radius"]
        self._cache: dict[str, Trajectory] = {}

    def split(self, name: str) -> list[str]:
        if name not in self.manifest["splits"]:
            raise DataError(f"unknown split '{name}'")
        return self.manifest["splits"][name]

    def load(self, rel_path: str) -> Trajectory:
        if rel_path not in self._cache:
            self._cache[rel_path] = read_trajectory(self.root / rel_path)
        return self._cache[rel_path]

    def trajectories(self, split: str):
        for rel in self.split(split):
            yield self.load(rel)
