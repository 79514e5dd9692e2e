import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from trajden.dataset import (
    GRID_MAGIC,
    generate_dataset,
    load_scenario_dir,
    read_dataset,
    read_grid,
    read_manifest,
    scenario_seeds,
    write_grid,
)
from trajden.geometry import DomainError
from trajden.worldgen import GpsNoiseSpec


class TestGridFormat:
    def test_roundtrip(self, tmp_path):
        g = np.random.default_rng(0).random((3, 5, 7)).astype(np.float32)
        write_grid(tmp_path / "g.bin", g)
        raw = (tmp_path / "g.bin").read_bytes()
        assert raw.startswith(GRID_MAGIC)
        assert np.frombuffer(raw[7:19], "<u4").tolist() == [3, 5, 7]
        assert_allclose(read_grid(tmp_path / "g.bin"), g)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"NOTGRID" + bytes(16))
        with pytest.raises((DomainError, OSError, ValueError)):
            read_grid(tmp_path / "bad.bin")


class TestSeeds:
    def test_unique_and_stable(self):
        s = scenario_seeds(42, 200)
        assert len(set(s)) == 200
        assert s == scenario_seeds(42, 200)
        assert s[:10] == scenario_seeds(42, 10)


class TestDataset:
    def test_roundtrip(self, small_dataset):
        out, scns, manifest = small_dataset
        back = read_dataset(out)
        assert back == scns
        assert read_manifest(out)["scenarios"] == manifest["scenarios"]

    def test_splits(self, small_dataset):
        out, scns, _ = small_dataset
        assert [s.split for s in scns] == ["train"] * 4 + ["eval"] * 2
        assert len(read_dataset(out, "eval")) == 2

    def test_files(self, small_dataset):
        out, scns, _ = small_dataset
        d = out / scns[0].scenario_id
        for name in ("tile.bin", "obs.bin", "gt.csv", "gps.csv", "scenario.json"):
            assert (d / name).exists()
        assert load_scenario_dir(d) == scns[0]
        assert json.loads((d / "scenario.json").read_text())["id"] == scns[0].scenario_id

    def test_regenerate_identical_files(self, small_dataset, tmp_path):
        out, scns, _ = small_dataset
        generate_dataset(6, GpsNoiseSpec(seed=5), seed=5, out_dir=tmp_path / "again", eval_fraction=1 / 3)
        for s in scns:
            for name in ("tile.bin", "obs.bin", "gt.csv", "gps.csv"):
                assert (out / s.scenario_id / name).read_bytes() == (tmp_path / "again" / s.scenario_id / name).read_bytes()

    def test_invariants(self, small_dataset):
        _, scns, _ = small_dataset
        for s in scns:
            assert len(s.gps_traj) == len(s.gt_traj) == 16
            assert s.tile.grid.shape == (3, 256, 256)
            assert s.tile.contains(s.gt_pose.x, s.gt_pose.y)

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            generate_dataset(0)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(OSError):
            read_manifest(tmp_path / "nope")

    def test_gps_rmse_matches_analytic(self):
        spec = GpsNoiseSpec(seed=8)
        scns, _ = generate_dataset(12, spec, seed=8)
        err = np.concatenate([s.gps_traj.xy - s.gt_traj.xy for s in scns])
        rmse = math.sqrt((err ** 2).sum(axis=1).mean())
        # per point: 2 (sigma_white^2 + k sigma_walk^2), averaged over k = 0..15
        k = np.arange(16)
        analytic = math.sqrt(np.mean(2 * (spec.sigma_white ** 2 + k * spec.sigma_walk ** 2)))
        assert abs(rmse / analytic - 1.0) < 0.2
