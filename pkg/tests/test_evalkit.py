import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from trajden import model
from trajden.evalkit import (
    ablate,
    compute_metrics,
    emit_plot,
    estimate_pose,
    format_table,
    run_eval,
    write_reports,
)
from trajden.geometry import DomainError, Pose
from trajden.trainer import TrainConfig, save_model

SVG = "{http://www.w3.org/2000/svg}"


def random_pairs(seed, n=50):
    rng = np.random.default_rng(seed)
    gt = [Pose(*rng.uniform(-100, 100, 2), rng.uniform(-math.pi, math.pi)) for _ in range(n)]
    est = [Pose(g.x + rng.normal(0, 3), g.y + rng.normal(0, 3), g.theta + rng.normal(0, 0.05)) for g in gt]
    return list(zip(est, gt))


class TestMetrics:
    def test_hand_case(self):
        gt = Pose(0.0, 0.0, 0.0)
        pairs = [
            (Pose(0.5, 0.0, 0.0), gt),  # 0.5 m along track
            (Pose(0.0, 2.0, math.radians(2)), gt),  # 2 m across, 2 degrees
            (Pose(4.0, 3.0, math.radians(-10)), gt),  # 5 m away
            (Pose(0.0, -20.0, 0.0), gt),
        ]
        r = compute_metrics(pairs, "m", "d")
        assert r.n == 4
        assert r.longitudinal == {"1": 0.75, "3": 0.75, "5": 1.0}
        assert r.lateral == {"1": 0.25, "3": 0.75, "5": 0.75}
        assert r.orientation == {"1": 0.5, "3": 0.75, "5": 0.75}
        assert r.position == {"1": 0.25, "2": 0.5, "5": 0.75, "10": 0.75}
        assert_allclose(r.rows[2]["position_m"], 5.0)

    def test_heading_frame(self):
        # errors are measured in the ground-truth heading frame
        gt = Pose(0.0, 0.0, math.pi / 2)
        r = compute_metrics([(Pose(0.0, 2.0, math.pi / 2), gt)])
        assert r.longitudinal["3"] == 1.0 and r.lateral["1"] == 1.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_in_threshold(self, seed):
        r = compute_metrics(random_pairs(seed))
        for rec in (r.lateral, r.longitudinal, r.orientation, r.position):
            vals = list(rec.values())
            assert all(0.0 <= v <= 1.0 for v in vals)
            assert vals == sorted(vals)

    def test_monotone_over_many_sets(self):
        for seed in range(1000):
            r = compute_metrics(random_pairs(seed, 20))
            v = list(r.position.values())
            assert v == sorted(v)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariant(self, seed):
        pairs = random_pairs(seed, 30)
        perm = np.random.default_rng(seed).permutation(30)
        a = compute_metrics(pairs).to_dict()["recall"]
        b = compute_metrics([pairs[i] for i in perm]).to_dict()["recall"]
        assert a == b

    def test_perfect(self):
        r = compute_metrics([(p, p) for _, p in random_pairs(1, 10)])
        assert set(r.position.values()) == {1.0} and set(r.orientation.values()) == {1.0}

    def test_empty(self):
        with pytest.raises(DomainError):
            compute_metrics([])


class TestReports:
    def test_json_and_csv(self, tmp_path):
        rep = compute_metrics(random_pairs(3, 10), "full", "set")
        j, c = write_reports([rep], tmp_path / "r.json")
        data = json.loads(j.read_text())
        assert data["method"] == "full" and data["n"] == 10
        assert data["recall"]["position_m"] == rep.position
        lines = c.read_text().splitlines()
        assert len(lines) == 2 and lines[0].startswith("method,dataset_id,n,lat@1")

    def test_multi_report(self, tmp_path):
        reps = [compute_metrics(random_pairs(s, 10), f"m{s}") for s in range(3)]
        j, c = write_reports(reps, tmp_path / "a.json")
        assert [r["method"] for r in json.loads(j.read_text())["reports"]] == ["m0", "m1", "m2"]
        assert len(c.read_text().splitlines()) == 4
        assert len(format_table(reps).splitlines()) == 4

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError):
            write_reports([compute_metrics(random_pairs(0, 3))], blocker / "r.json")


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "init.ckpt"
    save_model(path, model.build_params(0), None, TrainConfig(), 0)
    return path


class TestEvaluation:
    def test_raw_gps_needs_no_checkpoint(self, small_dataset, tmp_path):
        out, scns, _ = small_dataset
        rep = run_eval(out, None, "raw_gps", tmp_path / "raw.json")
        ev = [s for s in scns if s.split == "eval"]
        assert rep.n == len(ev)
        for row, s in zip(rep.rows, ev):
            assert row["estimate"] == [s.gps_traj.pose(s.query_index).x, s.gps_traj.pose(s.query_index).y,
                                       s.gps_traj.pose(s.query_index).theta]
        assert "root_seed=5" in rep.dataset_id

    def test_model_modes_need_checkpoint(self, small_dataset):
        with pytest.raises(DomainError):
            run_eval(small_dataset[0], None, "full")

    def test_unknown_mode(self, small_dataset):
        with pytest.raises(DomainError):
            run_eval(small_dataset[0], None, "oracle")

    def test_full_deterministic(self, small_dataset, ckpt, tmp_path):
        out = small_dataset[0]
        a = run_eval(out, ckpt, "full", tmp_path / "a.json", seed=4)
        b = run_eval(out, ckpt, "full", tmp_path / "b.json", seed=4)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert a.rows[0]["estimate"] == b.rows[0]["estimate"]

    def test_no_refinement_is_a_matcher_cell(self, small_dataset, ckpt):
        scn = small_dataset[1][0]
        pose, traj = estimate_pose(scn, "no_refinement", model.build_params(0))
        assert traj is None
        k = (pose.theta % (2 * math.pi)) / (2 * math.pi / 16)
        assert abs(k - round(k)) < 1e-9

    def test_ablate_rows(self, small_dataset, ckpt, tmp_path):
        reps = ablate(small_dataset[0], ckpt, ckpt, tmp_path / "ab.json")
        assert [r.method for r in reps] == ["full", "w/o refinement", "raw gps"]
        assert len(json.loads((tmp_path / "ab.json").read_text())["reports"]) == 3


class TestPlot:
    def test_svg(self, small_dataset, tmp_path):
        scn = small_dataset[1][0]
        gen = scn.gps_traj
        p = emit_plot(scn, gen, tmp_path / "p.svg")
        root = ET.parse(p).getroot()
        lines = {el.get("id"): el for el in root.iter(SVG + "polyline")}
        assert set(lines) == {"gt", "gps", "generated"}
        assert (lines["gt"].get("stroke"), lines["gps"].get("stroke"), lines["generated"].get("stroke")) == (
            "red", "blue", "green")
        assert len(lines["gt"].get("points").split()) == len(scn.gt_traj)
        assert root.find(SVG + "image").get("{http://www.w3.org/1999/xlink}href").startswith("data:image/png;base64,")
        assert root.find(SVG + "circle").get("id") == "query"

    def test_without_generated(self, small_dataset, tmp_path):
        root = ET.parse(emit_plot(small_dataset[1][1], None, tmp_path / "p.svg")).getroot()
        assert len(list(root.iter(SVG + "polyline"))) == 2

    def test_byte_identical(self, small_dataset, tmp_path):
        scn = small_dataset[1][2]
        a = emit_plot(scn, scn.gps_traj, tmp_path / "a.svg").read_bytes()
        b = emit_plot(scn, scn.gps_traj, tmp_path / "b.svg").read_bytes()
        assert a == b
