import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from trajden.geometry import (
    DomainError,
    NormalizedTrajectory,
    NormBox,
    Pose,
    Trajectory,
    denormalize_trajectory,
    normalize_trajectory,
    read_trajectory_csv,
    relative_errors,
    wrap_angle,
    write_trajectory_csv,
)

finite_angles = st.floats(min_value=-1e4, max_value=1e4, allow_nan=False)


def random_traj(rng, n=16, box=None):
    box = box or NormBox((0.0, 0.0), 64.0)
    xy = np.asarray(box.center) + rng.uniform(-1, 1, size=(n, 2)) * box.half_extent
    return Trajectory(np.arange(n), xy, rng.uniform(-math.pi, math.pi, n))


class TestWrapAngle:
    def test_examples(self):
        assert wrap_angle(0.0) == 0.0
        assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == math.pi

    def test_array(self):
        a = np.array([-3 * math.pi, -math.pi, 0.0, 2 * math.pi + 0.1])
        assert_allclose(wrap_angle(a), [math.pi, math.pi, 0.0, 0.1], atol=1e-12)

    def test_non_finite_raises(self):
        with pytest.raises(DomainError):
            wrap_angle(float("nan"))

    @given(finite_angles)
    def test_range_and_idempotent(self, a):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert wrap_angle(w) == w
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
        assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


class TestPose:
    def test_theta_wrapped(self):
        assert Pose(1, 2, 3 * math.pi).theta == pytest.approx(math.pi)

    def test_compose(self):
        p = Pose(1.0, 2.0, math.pi / 2)
        assert_allclose(p.compose(3.0, 1.0), (0.0, 5.0), atol=1e-12)


class TestTrajectory:
    def test_rejects_short(self):
        with pytest.raises(DomainError):
            Trajectory([0], [[0, 0]], [0])

    def test_rejects_non_increasing(self):
        with pytest.raises(DomainError):
            Trajectory([0, 0, 1], np.zeros((3, 2)), np.zeros(3))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(DomainError):
            Trajectory([0, 1], np.zeros((3, 2)), np.zeros(2))

    def test_immutable(self):
        tr = random_traj(np.random.default_rng(0))
        with pytest.raises(ValueError):
            tr.xy[0, 0] = 1.0

    def test_points_and_from_poses(self):
        tr = random_traj(np.random.default_rng(1), n=4)
        back = Trajectory.from_poses([p for _, p in tr.points], t=[t for t, _ in tr.points])
        assert back == tr

    def test_transformed_is_rigid(self):
        tr = random_traj(np.random.default_rng(2))
        moved = tr.transformed(0.7, (3.0, -2.0))
        d0 = np.linalg.norm(np.diff(tr.xy, axis=0), axis=1)
        d1 = np.linalg.norm(np.diff(moved.xy, axis=0), axis=1)
        assert_allclose(d1, d0, rtol=1e-12)
        assert_allclose(wrap_angle(moved.theta - tr.theta), 0.7, atol=1e-12)


class TestNormalization:
    box = NormBox((10.0, -20.0), 64.0)

    def test_centre_maps_to_origin(self):
        tr = Trajectory([0, 1], [[10.0, -20.0], [10.0, -20.0]], [0.3, 0.3])
        v = normalize_trajectory(tr, self.box).values
        assert_allclose(v[0], [0.0, 0.0, math.cos(0.3), math.sin(0.3)], atol=1e-15)

    def test_boundary_maps_to_one(self):
        tr = Trajectory([0, 1], [[74.0, -20.0], [10.0, -20.0]], [0.0, 0.0])
        assert_allclose(normalize_trajectory(tr, self.box).values[0], [1.0, 0.0, 1.0, 0.0], atol=1e-15)

    def test_denormalize_examples(self):
        nt = NormalizedTrajectory(np.array([0, 1]), np.array([[0, 0, 1, 0], [1, 1, 0, 1]], dtype=float))
        tr = denormalize_trajectory(nt, self.box)
        assert_allclose(tr.xy, [[10.0, -20.0], [74.0, 44.0]])
        assert_allclose(tr.theta, [0.0, math.pi / 2])

    def test_clamp_beyond_box(self):
        tr = Trajectory([0, 1], [[10.0 + 200.0, -20.0], [10.0, -20.0]], [0.0, 0.0])
        assert normalize_trajectory(tr, self.box).values[0, 0] == 1.5

    def test_degenerate_box(self):
        with pytest.raises(DomainError):
            NormBox((0.0, 0.0), 0.0)

    def test_zero_heading_flagged_and_carried(self):
        v = np.array([[0, 0, 0, 1], [0.1, 0, 0, 0], [0.2, 0, 1, 0]], dtype=float)
        tr = denormalize_trajectory(NormalizedTrajectory(np.arange(3), v), self.box)
        assert tr.flags.tolist() == [False, True, False]
        assert tr.theta[1] == pytest.approx(math.pi / 2)

    def test_roundtrip_100_seeds(self):
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            box = NormBox(tuple(rng.uniform(-100, 100, 2)), float(rng.uniform(20, 100)))
            tr = random_traj(rng, box=box)
            back = denormalize_trajectory(normalize_trajectory(tr, box), box)
            worst = max(worst, np.abs(back.xy - tr.xy).max())
            assert_allclose(wrap_angle(back.theta - tr.theta), 0.0, atol=1e-12)
            assert len(back) == len(tr)
        assert worst < 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_roundtrip_property(self, seed):
        tr = random_traj(np.random.default_rng(seed), box=self.box)
        back = denormalize_trajectory(normalize_trajectory(tr, self.box), self.box)
        assert np.abs(back.xy - tr.xy).max() < 1e-9


class TestRelativeErrors:
    def test_decomposition(self):
        gt = Pose(0.0, 0.0, math.pi / 2)
        lat, lon, ang = relative_errors(Pose(1.0, 2.0, math.pi / 2 + 0.1), gt)
        assert_allclose([lat, lon, ang], [1.0, 2.0, 0.1], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_rigid_invariance(self, seed):
        rng = np.random.default_rng(seed)
        est = Pose(*rng.normal(size=2) * 10, rng.uniform(-3, 3))
        gt = Pose(*rng.normal(size=2) * 10, rng.uniform(-3, 3))
        rot, shift = rng.uniform(-3, 3), rng.normal(size=2) * 50

        def move(p):
            c, s = math.cos(rot), math.sin(rot)
            return Pose(c * p.x - s * p.y + shift[0], s * p.x + c * p.y + shift[1], p.theta + rot)

        assert_allclose(relative_errors(move(est), move(gt)), relative_errors(est, gt), atol=1e-9)


class TestCsv:
    def test_roundtrip(self, tmp_path):
        tr = random_traj(np.random.default_rng(3))
        write_trajectory_csv(tr, tmp_path / "t.csv")
        assert (tmp_path / "t.csv").read_text().splitlines()[0] == "t,x,y,theta"
        back = read_trajectory_csv(tmp_path / "t.csv")
        assert_allclose(back.xy, tr.xy, rtol=1e-8)
        assert_allclose(back.theta, tr.theta, rtol=1e-8, atol=1e-9)

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.csv").write_text("t,x,y,theta\n")
        with pytest.raises(DomainError):
            read_trajectory_csv(tmp_path / "e.csv")
