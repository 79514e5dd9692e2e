"""Planar poses, trajectories and the map-box normalization used by the diffusion head."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADING_EPS = 1e-6
CLAMP = 1.5


class DomainError(ValueError):
    """Raised when an operation is called outside its mathematical domain."""


def wrap_angle(a):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"non-finite angle: {a!r}")
    out = np.mod(arr + np.pi, 2.0 * np.pi) - np.pi
    # np.mod lands exactly-odd multiples of pi on -pi; move them to +pi
    out = np.where(out <= -np.pi, out + 2.0 * np.pi, out)
    if np.ndim(a) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def compose(self, forward: float, left: float) -> tuple[float, float]:
        """World position of an ego-frame offset (forward, left)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return self.x + c * forward - s * left, self.y + s * forward + c * left


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Ordered timestamped poses stored column-wise.

    ``flags`` marks points whose heading could not be recovered and was carried
    over from the previous point (only set by :func:`denormalize_trajectory`).
    """

    t: np.ndarray
    xy: np.ndarray
    theta: np.ndarray
    flags: np.ndarray | None = field(default=None)

    def __post_init__(self):
        t = _frozen(self.t, np.int64)
        xy = _frozen(self.xy, np.float64)
        theta = _frozen(wrap_angle(np.asarray(self.theta, dtype=np.float64)), np.float64)
        if t.ndim != 1 or len(t) < 2:
            raise DomainError(f"trajectory needs at least 2 points, got {len(t)}")
        if xy.shape != (len(t), 2) or theta.shape != (len(t),):
            raise DomainError(f"inconsistent trajectory shapes t={t.shape} xy={xy.shape} theta={theta.shape}")
        if np.any(np.diff(t) <= 0):
            raise DomainError("timestep indices must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "theta", theta)
        if self.flags is not None:
            object.__setattr__(self, "flags", _frozen(self.flags, bool))

    def __len__(self) -> int:
        return len(self.t)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            np.array_equal(self.t, other.t)
            and np.array_equal(self.xy, other.xy)
            and np.array_equal(self.theta, other.theta)
        )

    def pose(self, i: int) -> Pose:
        return Pose(self.xy[i, 0], self.xy[i, 1], self.theta[i])

    @property
    def points(self) -> list[tuple[int, Pose]]:
        return [(int(self.t[i]), self.pose(i)) for i in range(len(self))]

    @classmethod
    def from_poses(cls, poses, t=None) -> "Trajectory":
        poses = list(poses)
        if t is None:
            t = np.arange(len(poses))
        return cls(t, [[p.x, p.y] for p in poses], [p.theta for p in poses])

    def transformed(self, rot: float, shift) -> "Trajectory":
        """Apply the rigid map p -> R(rot) p + shift to every pose."""
        c, s = math.cos(rot), math.sin(rot)
        R = np.array([[c, -s], [s, c]])
        return Trajectory(self.t, self.xy @ R.T + np.asarray(shift, dtype=np.float64), self.theta + rot)


@dataclass(frozen=True)
class NormBox:
    center: tuple[float, float]
    half_extent: float

    def __post_init__(self):
        if not (self.half_extent > 0 and math.isfinite(self.half_extent)):
            raise DomainError(f"degenerate normalization box: half_extent={self.half_extent}")


@dataclass(frozen=True, eq=False)
class NormalizedTrajectory:
    """Trajectory in box coordinates: channels (x, y, cos theta, sin theta)."""

    t: np.ndarray
    values: np.ndarray  # (T, 4)

    def __len__(self) -> int:
        return len(self.t)


def normalize_trajectory(traj: Trajectory, box: NormBox) -> NormalizedTrajectory:
    if not box.half_extent > 0:
        raise DomainError(f"degenerate normalization box: half_extent={box.half_extent}")
    pos = (traj.xy - np.asarray(box.center, dtype=np.float64)) / box.half_extent
    pos = np.clip(pos, -CLAMP, CLAMP)
    values = np.column_stack([pos, np.cos(traj.theta), np.sin(traj.theta)])
    return NormalizedTrajectory(traj.t.copy(), values)


def denormalize_trajectory(ntraj: NormalizedTrajectory, box: NormBox) -> Trajectory:
    v = np.asarray(ntraj.values, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 4:
        raise DomainError(f"normalized trajectory must be (T, 4), got {v.shape}")
    xy = np.asarray(box.center, dtype=np.float64) + box.half_extent * v[:, :2]
    mag = np.hypot(v[:, 2], v[:, 3])
    flags = mag < HEADING_EPS
    raw = np.arctan2(v[:, 3], v[:, 2])
    theta = np.empty(len(v))
    prev = 0.0
    for i in range(len(v)):
        theta[i] = prev if flags[i] else raw[i]
        prev = theta[i]
    return Trajectory(ntraj.t, xy, theta, flags=flags)


def relative_errors(estimate: Pose, gt: Pose) -> tuple[float, float, float]:
    """(lateral, longitudinal, angular) absolute errors in the ground-truth heading frame."""
    dx, dy = estimate.x - gt.x, estimate.y - gt.y
    c, s = math.cos(gt.theta), math.sin(gt.theta)
    longitudinal = abs(c * dx + s * dy)
    lateral = abs(-s * dx + c * dy)
    angular = abs(wrap_angle(estimate.theta - gt.theta))
    return lateral, longitudinal, angular


def write_trajectory_csv(traj: Trajectory, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "theta"])
        for i in range(len(traj)):
            w.writerow(
                [int(traj.t[i])] + [f"{v:.9g}" for v in (traj.xy[i, 0], traj.xy[i, 1], traj.theta[i])]
            )


def read_trajectory_csv(path) -> Trajectory:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DomainError(f"{path}: empty trajectory file")
    return Trajectory(
        [int(r["t"]) for r in rows],
        [[float(r["x"]), float(r["y"])] for r in rows],
        [float(r["theta"]) for r in rows],
    )
