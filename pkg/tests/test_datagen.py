"""Scenario physics sanity, dataset layout, and the trajectory file format."""

import dataclasses
import json

import numpy as np
import pytest

from gns import backend
from gns import datagen as D
from gns.errors import ConfigError, DataError, FormatError
from gns.graph import build_kdtree


def free_particle_scenario(**overrides):
    """One particle, no damping/repulsion, so closed forms hold exactly."""
    base = dict(n_min=1, n_max=1, damping=1.0, repulsion_stiffness=0.0,
                restitution=1.0, steps=50)
    base.update(overrides)
    return D.Scenario(**base)


class TestSimulate:
    def test_stationary_without_gravity(self):
        sc = free_particle_scenario(gravity=0.0)
        traj = D.simulate_scenario(sc, seed=0)
        # no forces: the only motion is the (tiny) random initial velocity
        drift = np.abs(np.diff(traj.positions, axis=0))
        assert (drift == drift[0]).all()
        still = dataclasses.replace(sc)
        t2 = D.simulate_scenario(still, seed=0)
        np.testing.assert_array_equal(traj.positions, t2.positions)

    def test_free_fall_closed_form(self):
        sc = free_particle_scenario(gravity=5e-5)
        traj = D.simulate_scenario(sc, seed=3)
        p0 = traj.positions[0]
        v0 = traj.positions[1] - traj.positions[0] + sc.gravity * np.array([0, 1])
        for k in range(1, 30):  # before any wall contact
            expected_y = p0[0, 1] + k * v0[0, 1] - sc.gravity * k * (k + 1) / 2
            assert traj.positions[k, 0, 1] == pytest.approx(expected_y, abs=1e-12)

    def test_two_particle_momentum_conservation(self):
        sc = D.Scenario(n_min=2, n_max=2, gravity=0.0, damping=1.0,
                        restitution=1.0, steps=80)
        traj = D.simulate_scenario(sc, seed=5)
        # only frames before any wall contact count: reflection is impulsive
        inside = np.all((traj.positions > 0.02) & (traj.positions < 0.98), axis=(1, 2))
        last = int(np.argmin(inside)) if not inside.all() else traj.num_steps
        assert last >= 10  # enough contact-free frames to be meaningful
        vel = np.diff(traj.positions[:last], axis=0).sum(axis=1)  # total momentum
        drift = np.abs(vel - vel[0]).max()
        assert drift < 1e-9

    def test_particles_stay_inside_box(self):
        for seed in range(4):
            traj = D.simulate_scenario(D.Scenario(), seed=seed)
            assert traj.positions.min() >= -0.01  # <= 1% overshoot for a frame
            assert traj.positions.max() <= 1.01

    def test_energy_non_increasing_over_windows(self):
        sc = D.Scenario()
        traj = D.simulate_scenario(sc, seed=1)
        p = traj.positions

        def energy(k):
            v = p[k] - p[k - 1]
            kinetic = 0.5 * (v ** 2).sum()
            potential = sc.gravity * p[k][:, 1].sum()
            tree = build_kdtree(p[k])
            i, j = backend.tree_radius_pairs(*tree._arrays(), sc.repulsion_radius)
            d = np.linalg.norm(p[k][i] - p[k][j], axis=1)
            contact = (sc.repulsion_stiffness * (sc.repulsion_radius - d) ** 2
                       / (2 * sc.repulsion_radius)).sum()
            return kinetic + potential + contact

        values = np.array([energy(k) for k in range(1, traj.num_steps)])
        assert (values[10:] <= values[:-10] + 1e-12).all()

    def test_springs_scenario_runs(self):
        traj = D.simulate_scenario(D.springs_scenario(), seed=2)
        assert np.isfinite(traj.positions).all()
        assert traj.scenario == D.SPRINGS

    def test_determinism(self):
        sc = D.Scenario(steps=60)
        a = D.simulate_scenario(sc, seed=9)
        b = D.simulate_scenario(sc, seed=9)
        assert np.array_equal(a.positions, b.positions)

    def test_neighbor_count_report(self):
        # soft diagnostic: settled frames should have local structure
        from gns.graph import mean_neighbor_count, radius_edges
        sc = D.Scenario()
        traj = D.simulate_scenario(sc, seed=0)
        counts = [mean_neighbor_count(
            radius_edges(build_kdtree(traj.positions[k]), sc.connectivity_radius),
            traj.n_particles) for k in range(0, traj.num_steps, 20)]
        print(f"gravity-bounce mean neighbors over trajectory: {np.mean(counts):.1f} "
              f"(soft target 10-20)")
        assert np.mean(counts) > 2  # sanity floor only


class TestTrajectoryFile:
    def test_round_trip_bit_exact(self, tmp_path):
        traj = D.simulate_scenario(D.Scenario(steps=20), seed=0)
        path = tmp_path / "t.traj"
        D.write_trajectory(path, traj)
        back = D.read_trajectory(path)
        assert np.array_equal(back.positions,
                              traj.positions.astype("<f4").astype(np.float64))
        assert np.array_equal(back.materials, traj.materials)
        assert np.array_equal(back.globals_per_step, traj.globals_per_step)
        assert back.dt == traj.dt

    def test_truncated_payload_names_lengths(self, tmp_path):
        traj = D.simulate_scenario(D.Scenario(steps=10), seed=0)
        path = tmp_path / "t.traj"
        D.write_trajectory(path, traj)
        raw = path.read_bytes()
        path.write_bytes(raw[:-100])
        with pytest.raises(FormatError, match="expected"):
            D.read_trajectory(path)

    def test_bad_magic_offset_zero(self, tmp_path):
        path = tmp_path / "bad.traj"
        path.write_bytes(b"junkjunkjunk" * 4)
        with pytest.raises(FormatError, match="offset 0"):
            D.read_trajectory(path)

    def test_short_trajectory_rejected(self, tmp_path):
        traj = D.simulate_scenario(D.Scenario(steps=10), seed=0)
        short = D.Trajectory(traj.positions[:1], traj.materials,
                             traj.globals_per_step[:1], traj.dt,
                             traj.box_lo, traj.box_hi, traj.scenario)
        with pytest.raises(DataError):
            D.write_trajectory(tmp_path / "x.traj", short)

    def test_checksum_mismatch(self, tmp_path):
        traj = D.simulate_scenario(D.Scenario(steps=10), seed=0)
        path = tmp_path / "t.traj"
        D.write_trajectory(path, traj)
        raw = bytearray(path.read_bytes())
        raw[20] ^= 0xFF  # flip a header byte
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="checksum|version|truncated"):
            D.read_trajectory(path)


class TestMakeDataset:
    def test_manifest_counts_match_files(self, tmp_path):
        out = D.make_dataset(D.Scenario(steps=12, n_min=10, n_max=12),
                             tmp_path / "ds", n_train=3, n_valid=2, n_test=1, seed=0)
        manifest = json.loads((out / "manifest.json").read_text())
        for split, expected in (("train", 3), ("valid", 2), ("test", 1)):
            assert len(manifest["splits"][split]) == expected
            for rel in manifest["splits"][split]:
                assert (out / rel).exists()

    def test_single_train_entry(self, tmp_path):
        out = D.make_dataset(D.Scenario(steps=12, n_min=8, n_max=8),
                             tmp_path / "ds", n_train=1, n_valid=0, n_test=0, seed=0)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["splits"]["train"] == ["train/0000.traj"]

    def test_regeneration_byte_identical(self, tmp_path):
        sc = D.Scenario(steps=15, n_min=9, n_max=11)
        a = D.make_dataset(sc, tmp_path / "a", 2, 1, 1, seed=4)
        b = D.make_dataset(sc, tmp_path / "b", 2, 1, 1, seed=4)
        for rel in json.loads((a / "manifest.json").read_text())["splits"]["train"]:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_splits_disjoint_by_seed_arithmetic(self, tmp_path):
        out = D.make_dataset(D.Scenario(steps=12, n_min=8, n_max=10),
                             tmp_path / "ds", 2, 2, 2, seed=0)
        blobs = {}
        manifest = json.loads((out / "manifest.json").read_text())
        for split, rels in manifest["splits"].items():
            for rel in rels:
                payload = (out / rel).read_bytes()
                assert payload not in blobs.values(), "duplicate trajectory bytes"
                blobs[rel] = payload

    def test_dataset_loader(self, tmp_path):
        out = D.make_dataset(D.Scenario(steps=12, n_min=8, n_max=8),
                             tmp_path / "ds", 2, 1, 1, seed=0)
        ds = D.TrajectoryDataset(out)
        assert len(ds.split("train")) == 2
        traj = ds.load(ds.split("train")[0])
        assert traj.num_steps == 12
        assert ds.load(ds.split("train")[0]) is traj  # cached
        with pytest.raises(DataError):
            ds.split("bogus")


class TestScenarioConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            D.Scenario.from_dict({"name": "gravity-bounce", "bogus": 1})

    def test_round_trip(self):
        sc = D.springs_scenario(steps=77)
        assert D.Scenario.from_dict(sc.to_dict()) == sc

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            D.Scenario(name="nope")
        with pytest.raises(ConfigError):
            D.Scenario(steps=1)
        with pytest.raises(ConfigError):
            D.Scenario(n_min=0)
