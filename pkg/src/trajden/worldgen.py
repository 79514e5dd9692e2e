"""Procedural worlds, map tiles, driven trajectories, GPS corruption and polar observations.

A :class:`World` is a vector description (roads, buildings, a vegetation
noise field) that can be evaluated at arbitrary points, so map tiles of any
position and orientation can be cut from it deterministically.

Raster conventions: grids are (channel, row, col) with row increasing
northward (+y) and col increasing eastward (+x); pixel (i, j) covers
``origin + ((j, i) + 0.5) * resolution``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import DomainError, Pose, Trajectory, wrap_angle
from .sampling import bilinear_sample

TILE_PX = 256
TILE_RES = 0.5
TILE_EXTENT = TILE_PX * TILE_RES  # 128 m
TRAJ_LEN = 16

WORLD_HALF = 200.0
LATTICE = 48.0

POLAR_BINS = 64
POLAR_RES = 0.5
FOV_HALF = math.radians(45.0)

MAX_ATTEMPTS = 32


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MapTile:
    origin: tuple[float, float]
    grid: np.ndarray  # (3, rows, cols) float32
    resolution: float = TILE_RES

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float32)
        if g.ndim != 3 or g.shape[0] != 3:
            raise DomainError(f"map tile grid must be (3, rows, cols), got {g.shape}")
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MapTile):
            return NotImplemented
        return (
            self.origin == other.origin
            and self.resolution == other.resolution
            and np.array_equal(self.grid, other.grid)
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[1], self.grid.shape[2]

    @property
    def extent(self) -> tuple[float, float]:
        return self.grid.shape[2] * self.resolution, self.grid.shape[1] * self.resolution

    @property
    def center(self) -> tuple[float, float]:
        w, h = self.extent
        return self.origin[0] + w / 2, self.origin[1] + h / 2

    def contains(self, x: float, y: float) -> bool:
        w, h = self.extent
        return self.origin[0] <= x < self.origin[0] + w and self.origin[1] <= y < self.origin[1] + h

    def to_pixel(self, x, y):
        """Fractional (row, col) of world points, pixel centers at integers."""
        col = (np.asarray(x, dtype=np.float64) - self.origin[0]) / self.resolution - 0.5
        row = (np.asarray(y, dtype=np.float64) - self.origin[1]) / self.resolution - 0.5
        return row, col

    def sample(self, x, y) -> np.ndarray:
        row, col = self.to_pixel(x, y)
        return bilinear_sample(self.grid, row, col)


@dataclass(frozen=True)
class GpsNoiseSpec:
    sigma_white: float = 3.0
    sigma_walk: float = 0.8
    dropout_prob: float = 0.05
    seed: int = 0
    distribution: str = "gaussian"  # or "uniform" (same standard deviation)

    def __post_init__(self):
        if self.sigma_white < 0 or self.sigma_walk < 0:
            raise DomainError("GPS noise sigmas must be non-negative")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise DomainError(f"dropout_prob must lie in [0, 1), got {self.dropout_prob}")
        if self.distribution not in ("gaussian", "uniform"):
            raise DomainError(f"unknown noise distribution {self.distribution!r}")


NOISE_PRESETS = {
    "default": dict(sigma_white=3.0, sigma_walk=0.8, dropout_prob=0.05),
    "none": dict(sigma_white=0.0, sigma_walk=0.0, dropout_prob=0.0),
    "mild": dict(sigma_white=1.5, sigma_walk=0.3, dropout_prob=0.0),
    "harsh": dict(sigma_white=5.0, sigma_walk=1.5, dropout_prob=0.1),
    "uniform": dict(sigma_white=3.0, sigma_walk=0.8, dropout_prob=0.05, distribution="uniform"),
}


@dataclass(frozen=True, eq=False)
class PolarObservation:
    grid: np.ndarray  # (3, range bins, azimuth bins)
    sensor_pose: Pose | None = None

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float32)
        if g.shape != (3, POLAR_BINS, POLAR_BINS):
            raise DomainError(f"polar observation must be (3, {POLAR_BINS}, {POLAR_BINS}), got {g.shape}")
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolarObservation):
            return NotImplemented
        return np.array_equal(self.grid, other.grid) and self.sensor_pose == other.sensor_pose


@dataclass(frozen=True, eq=False)
class Scenario:
    tile: MapTile
    gt_traj: Trajectory
    gps_traj: Trajectory
    obs: PolarObservation
    seed: int
    scenario_id: str = ""
    split: str = "train"

    @property
    def query_index(self) -> int:
        return len(self.gt_traj) - 1

    @property
    def gt_pose(self) -> Pose:
        return self.gt_traj.pose(self.query_index)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scenario):
            return NotImplemented
        return (
            self.tile == other.tile
            and self.gt_traj == other.gt_traj
            and self.gps_traj == other.gps_traj
            and self.obs == other.obs
            and self.seed == other.seed
            and self.scenario_id == other.scenario_id
            and self.split == other.split
        )


# ----------------------------------------------------------------------------
# world description


@dataclass(frozen=True)
class Road:
    p0: tuple[float, float]
    p1: tuple[float, float]
    width: float

    @property
    def direction(self) -> np.ndarray:
        d = np.subtract(self.p1, self.p0)
        return d / np.linalg.norm(d)

    @property
    def length(self) -> float:
        return float(np.hypot(self.p1[0] - self.p0[0], self.p1[1] - self.p0[1]))


@dataclass(frozen=True)
class Building:
    center: tuple[float, float]
    half_size: tuple[float, float]  # along / across the building axis
    angle: float


def _seg_distance(pts: np.ndarray, road: Road) -> np.ndarray:
    p0 = np.asarray(road.p0)
    d = np.subtract(road.p1, road.p0)
    L2 = float(d @ d)
    s = np.clip(((pts - p0) @ d) / L2, 0.0, 1.0)
    proj = p0 + s[:, None] * d
    return np.hypot(pts[:, 0] - proj[:, 0], pts[:, 1] - proj[:, 1])


class ValueNoise:
    """Smooth lattice noise in [0, 1] defined on a fixed square region."""

    def __init__(self, rng: np.random.Generator, half: float, spacing: float):
        self.half = half
        self.spacing = spacing
        n = int(math.ceil(2 * half / spacing)) + 2
        self.values = rng.random((n, n))

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        u = (pts[:, 0] + self.half) / self.spacing
        v = (pts[:, 1] + self.half) / self.spacing
        n = self.values.shape[0]
        u = np.clip(u, 0, n - 1.000001)
        v = np.clip(v, 0, n - 1.000001)
        i, j = np.floor(v).astype(int), np.floor(u).astype(int)
        fv, fu = v - i, u - j
        fv = fv * fv * (3 - 2 * fv)
        fu = fu * fu * (3 - 2 * fu)
        V = self.values
        top = V[i, j] * (1 - fu) + V[i, j + 1] * fu
        bot = V[i + 1, j] * (1 - fu) + V[i + 1, j + 1] * fu
        return top * (1 - fv) + bot * fv


class World:
    """Road lattice with diagonals, road-side buildings and patchy vegetation."""

    def __init__(self, roads: list[Road], buildings: list[Building], noise_seed: int, half: float = WORLD_HALF):
        self.roads = list(roads)
        self.buildings = list(buildings)
        self.half = half
        rng = np.random.default_rng(noise_seed)
        self._veg_coarse = ValueNoise(rng, half + 120.0, 9.0)
        self._veg_fine = ValueNoise(rng, half + 120.0, 3.0)
        if self.buildings:
            self._bc = np.array([b.center for b in self.buildings])
            self._br = np.array([math.hypot(*b.half_size) for b in self.buildings])
        else:
            self._bc = np.zeros((0, 2))
            self._br = np.zeros(0)

    @classmethod
    def from_seed(cls, seed: int) -> "World":
        return generate_world(seed)

    def road_value(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        out = np.zeros(len(pts))
        for road in self.roads:
            d = _seg_distance(pts, road)
            # one-pixel linear ramp at the road edge
            v = np.clip((road.width / 2 - d) / TILE_RES + 0.5, 0.0, 1.0)
            np.maximum(out, v, out=out)
        return out

    def building_value(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        out = np.zeros(len(pts))
        if not self.buildings:
            return out
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        near = np.all((self._bc + self._br[:, None] >= lo) & (self._bc - self._br[:, None] <= hi), axis=1)
        # bucket points on a coarse grid so each building only touches nearby points
        B = 8.0
        gx = np.floor((pts[:, 0] - lo[0]) / B).astype(np.int64)
        gy = np.floor((pts[:, 1] - lo[1]) / B).astype(np.int64)
        nx = int(gx.max()) + 1
        ny = int(gy.max()) + 1
        order = np.argsort(gy * nx + gx, kind="stable")
        skey = (gy * nx + gx)[order]
        for k in np.nonzero(near)[0]:
            b = self.buildings[k]
            r = self._br[k] + 1.0
            x0, x1 = (np.clip(np.floor((b.center[0] + np.array([-r, r]) - lo[0]) / B), 0, nx - 1)).astype(int)
            y0, y1 = (np.clip(np.floor((b.center[1] + np.array([-r, r]) - lo[1]) / B), 0, ny - 1)).astype(int)
            rows = np.arange(y0, y1 + 1) * nx
            starts = np.searchsorted(skey, rows + x0, side="left")
            ends = np.searchsorted(skey, rows + x1, side="right")
            idx = np.concatenate([order[a:e] for a, e in zip(starts, ends)])
            if idx.size == 0:
                continue
            c, s = math.cos(b.angle), math.sin(b.angle)
            dx = pts[idx, 0] - b.center[0]
            dy = pts[idx, 1] - b.center[1]
            a = np.abs(c * dx + s * dy) - b.half_size[0]
            q = np.abs(-s * dx + c * dy) - b.half_size[1]
            v = np.clip(0.5 - np.maximum(a, q) / TILE_RES, 0.0, 1.0)
            out[idx] = np.maximum(out[idx], v)
        return out

    def evaluate(self, pts) -> np.ndarray:
        """Semantic values (N, 3) at world points: road, building, vegetation."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        road = self.road_value(pts)
        bld = self.building_value(pts) * (1.0 - road)
        n = 0.65 * self._veg_coarse(pts) + 0.35 * self._veg_fine(pts)
        veg = np.clip((n - 0.45) * 4.0, 0.0, 1.0) * (1.0 - road) * (1.0 - bld)
        inside = (np.abs(pts[:, 0]) <= self.half) & (np.abs(pts[:, 1]) <= self.half)
        out = np.stack([road, bld, veg], axis=1)
        out[~inside] = 0.0
        return out

    def rasterize(self, center, heading: float = 0.0, px: int = TILE_PX, res: float = TILE_RES,
                  snap: bool = True) -> tuple[MapTile, "Frame"]:
        """Cut a ``px`` x ``px`` tile centred at ``center``, rotated by ``heading``.

        Returns the tile in a local frame together with that frame. For
        ``heading == 0`` the local frame is the world frame and, with ``snap``,
        the origin is snapped to the pixel lattice.
        """
        half = px * res / 2
        cx, cy = float(center[0]), float(center[1])
        if heading == 0.0:
            if snap:
                ox = round((cx - half) / res) * res
                oy = round((cy - half) / res) * res
            else:
                ox, oy = cx - half, cy - half
            frame = Frame((0.0, 0.0), 0.0)
            origin = (ox, oy)
        else:
            frame = Frame((cx, cy), heading)
            origin = (-half, -half)
        ij = (np.arange(px) + 0.5) * res
        lx, ly = np.meshgrid(origin[0] + ij, origin[1] + ij)  # rows = y
        local = np.stack([lx.ravel(), ly.ravel()], axis=1)
        world_pts = frame.to_world(local)
        vals = self.evaluate(world_pts)
        grid = vals.T.reshape(3, px, px).astype(np.float32)
        return MapTile(origin, grid, res), frame


@dataclass(frozen=True)
class Frame:
    """Local frame: local = R(-heading) (world - center)."""

    center: tuple[float, float]
    heading: float

    def to_local(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.heading), math.sin(self.heading)
        d = pts - np.asarray(self.center)
        return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)

    def to_world(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.heading), math.sin(self.heading)
        x = c * pts[..., 0] - s * pts[..., 1] + self.center[0]
        y = s * pts[..., 0] + c * pts[..., 1] + self.center[1]
        return np.stack([x, y], axis=-1)

    def traj_to_local(self, traj: Trajectory) -> Trajectory:
        return Trajectory(traj.t, self.to_local(traj.xy), traj.theta - self.heading)

    def pose_to_local(self, pose: Pose) -> Pose:
        x, y = self.to_local(np.array([pose.x, pose.y]))
        return Pose(x, y, pose.theta - self.heading)

    def pose_to_world(self, pose: Pose) -> Pose:
        x, y = self.to_world(np.array([pose.x, pose.y]))
        return Pose(x, y, pose.theta + self.heading)


# ----------------------------------------------------------------------------
# generation


def _clip_line(p: np.ndarray, d: np.ndarray, half: float):
    """Clip the infinite line p + s d to the square [-half, half]^2."""
    lo, hi = -np.inf, np.inf
    for k in range(2):
        if abs(d[k]) < 1e-12:
            if abs(p[k]) > half:
                return None
            continue
        a = (-half - p[k]) / d[k]
        b = (half - p[k]) / d[k]
        lo, hi = max(lo, min(a, b)), min(hi, max(a, b))
    if hi - lo < 1e-6:
        return None
    return p + lo * d, p + hi * d


def _intersect(r1: Road, r2: Road):
    p, q = np.asarray(r1.p0), np.asarray(r2.p0)
    d1, d2 = np.subtract(r1.p1, r1.p0), np.subtract(r2.p1, r2.p0)
    den = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(den) < 1e-9:
        return None
    w = q - p
    s = (w[0] * d2[1] - w[1] * d2[0]) / den
    u = (w[0] * d1[1] - w[1] * d1[0]) / den
    if -1e-9 <= s <= 1 + 1e-9 and -1e-9 <= u <= 1 + 1e-9:
        return s, u
    return None


def _connected(roads: list[Road]) -> bool:
    parent = list(range(len(roads)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(roads)):
        for j in range(i + 1, len(roads)):
            if _intersect(roads[i], roads[j]) is not None:
                parent[find(i)] = find(j)
    return len({find(i) for i in range(len(roads))}) == 1


def _make_roads(rng: np.random.Generator, half: float) -> list[Road]:
    ks = np.arange(-2, 3)
    while True:
        n = int(rng.integers(4, 11))
        n_h = int(rng.integers(1, min(3, n - 2) + 1))
        n_v = int(rng.integers(1, min(3, n - n_h - 1) + 1))
        n_d = n - n_h - n_v
        roads: list[Road] = []
        for k in rng.choice(ks, size=n_h, replace=False):
            y = k * LATTICE + rng.uniform(-6, 6)
            roads.append(Road((-half, y), (half, y), float(rng.uniform(4, 8))))
        for k in rng.choice(ks, size=n_v, replace=False):
            x = k * LATTICE + rng.uniform(-6, 6)
            roads.append(Road((x, -half), (x, half), float(rng.uniform(4, 8))))
        used = set()
        for _ in range(n_d):
            for _try in range(20):
                node = (int(rng.choice(ks)), int(rng.choice(ks)))
                sign = int(rng.choice([-1, 1]))
                key = (sign, node[1] - sign * node[0])
                if key not in used:
                    used.add(key)
                    break
            p = np.array([node[0] * LATTICE, node[1] * LATTICE])
            d = np.array([1.0, float(sign)]) / math.sqrt(2)
            seg = _clip_line(p, d, half)
            if seg is not None and np.linalg.norm(seg[1] - seg[0]) > 100:
                roads.append(Road(tuple(seg[0]), tuple(seg[1]), float(rng.uniform(4, 8))))
        if len(roads) >= 4 and _connected(roads):
            return roads


def _make_buildings(rng: np.random.Generator, roads: list[Road], half: float) -> list[Building]:
    probe_world = World(roads, [], 0, half)
    out: list[Building] = []
    for road in roads:
        d = road.direction
        nrm = np.array([-d[1], d[0]])
        ang = math.atan2(d[1], d[0])
        for side in (-1.0, 1.0):
            s = float(rng.uniform(0, 10))
            while s < road.length:
                along = float(rng.uniform(4, 10))
                depth = float(rng.uniform(4, 8))
                if rng.random() < 0.7:
                    setback = road.width / 2 + float(rng.uniform(2, 5)) + depth
                    c = np.asarray(road.p0) + (s + along) * d + side * setback * nrm
                    b = Building((float(c[0]), float(c[1])), (along, depth), ang)
                    # reject footprints touching any road or an earlier building
                    ca, sa = math.cos(ang), math.sin(ang)
                    uu, vv = np.meshgrid(np.linspace(-1, 1, 5), np.linspace(-1, 1, 5))
                    pts = np.stack([
                        c[0] + ca * uu.ravel() * (along + 1) - sa * vv.ravel() * (depth + 1),
                        c[1] + sa * uu.ravel() * (along + 1) + ca * vv.ravel() * (depth + 1),
                    ], axis=1)
                    if not any(_rect_overlap(b, o) for o in out) and probe_world.road_value(pts).max() == 0.0:
                        out.append(b)
                s += 2 * along + float(rng.uniform(3, 12))
    return out


def _rect_overlap(a: Building, b: Building) -> bool:
    """Separating-axis test for two oriented rectangles."""
    # disjoint bounding circles cannot overlap
    gap = math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
    if gap > math.hypot(*a.half_size) + math.hypot(*b.half_size):
        return False

    def corners(r: Building):
        c, s = math.cos(r.angle), math.sin(r.angle)
        u = np.array([c, s]) * r.half_size[0]
        v = np.array([-s, c]) * r.half_size[1]
        ctr = np.asarray(r.center)
        return np.array([ctr + u + v, ctr + u - v, ctr - u - v, ctr - u + v])

    ca, cb = corners(a), corners(b)
    for r in (a, b):
        for ax in (np.array([math.cos(r.angle), math.sin(r.angle)]), np.array([-math.sin(r.angle), math.cos(r.angle)])):
            pa, pb = ca @ ax, cb @ ax
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def generate_world(seed: int, half: float = WORLD_HALF) -> World:
    ss = np.random.SeedSequence(int(seed))
    road_ss, bld_ss, veg_ss = ss.spawn(3)
    roads = _make_roads(np.random.default_rng(road_ss), half)
    buildings = _make_buildings(np.random.default_rng(bld_ss), roads, half)
    return World(roads, buildings, int(veg_ss.generate_state(1)[0]), half)


def generate_tile(seed: int) -> MapTile:
    """The 128 m tile at the centre of the world generated from ``seed``."""
    tile, _ = generate_world(seed).rasterize((0.0, 0.0))
    return tile


# ----------------------------------------------------------------------------
# trajectories


def _road_graph(roads: list[Road]):
    """Per-road sorted crossing parameters: {road: [(s_metres, other_road), ...]}."""
    cross: dict[int, list[tuple[float, int]]] = {i: [] for i in range(len(roads))}
    for i in range(len(roads)):
        for j in range(i + 1, len(roads)):
            hit = _intersect(roads[i], roads[j])
            if hit is None:
                continue
            s, u = hit
            cross[i].append((s * roads[i].length, j))
            cross[j].append((u * roads[j].length, i))
    for i in cross:
        cross[i].sort()
    return cross


def _route(rng: np.random.Generator, roads: list[Road], cross, length: float) -> np.ndarray | None:
    """Random drive along the network, turning at most 45 degrees at crossings."""
    i = int(rng.integers(len(roads)))
    road = roads[i]
    direction = 1 if rng.random() < 0.5 else -1
    s = float(rng.uniform(0, road.length))
    pts = [np.asarray(road.p0) + s * road.direction]
    travelled = 0.0
    for _ in range(64):
        ahead = [(cs, j) for cs, j in cross[i] if (cs - s) * direction > 1e-6]
        ahead.sort(key=lambda e: (e[0] - s) * direction)
        end_s = road.length if direction > 0 else 0.0
        turned = False
        for cs, j in ahead:
            if rng.random() < 0.55:
                continue
            other = roads[j]
            cosang = abs(float(road.direction @ other.direction))
            if cosang < math.cos(math.radians(46)):
                continue
            # pick the direction on the other road that keeps the turn small
            od = 1 if float(road.direction @ other.direction) * direction > 0 else -1
            p = np.asarray(road.p0) + cs * road.direction
            travelled += abs(cs - s)
            pts.append(p)
            u = float((p - np.asarray(other.p0)) @ other.direction)
            i, road, s, direction = j, other, u, od
            turned = True
            break
        if not turned:
            p = np.asarray(road.p0) + end_s * road.direction
            travelled += abs(end_s - s)
            pts.append(p)
            break
        if travelled >= length:
            break
    if travelled < length:
        return None
    return np.array(pts)


def _smooth_path(poly: np.ndarray, step: float = 0.5, window_m: float = 24.0):
    seg = np.diff(poly, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    keep = seg_len > 1e-9
    poly = np.vstack([poly[:1], poly[1:][keep]])
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(poly, axis=0).T))])
    s = np.arange(0.0, cum[-1], step)
    dense = np.stack([np.interp(s, cum, poly[:, 0]), np.interp(s, cum, poly[:, 1])], axis=1)
    w = int(round(window_m / step)) | 1
    if len(dense) <= 2 * w:
        return None
    kernel = np.ones(w) / w
    sm = np.stack([np.convolve(dense[:, k], kernel, mode="valid") for k in range(2)], axis=1)
    return sm


def generate_gt_trajectory(world: World, seed: int, length: int = TRAJ_LEN, margin: float = 72.0) -> Trajectory:
    """Constant-speed drive of ``length`` points at 1 s spacing along the road network."""
    if not world.roads:
        raise DomainError("world has no road segments")
    cross = _road_graph(world.roads)
    ss = np.random.SeedSequence(int(seed))
    for attempt_ss in ss.spawn(MAX_ATTEMPTS):
        rng = np.random.default_rng(attempt_ss)
        v = float(rng.uniform(8.1, 13.9))
        need = (length - 1) * v + 30.0
        poly = _route(rng, world.roads, cross, need)
        if poly is None:
            continue
        sm = _smooth_path(poly)
        if sm is None:
            continue
        d = np.diff(sm, axis=0)
        cum = np.concatenate([[0.0], np.cumsum(np.hypot(d[:, 0], d[:, 1]))])
        span = (length - 1) * v
        if cum[-1] < span + 2.0:
            continue
        s0 = float(rng.uniform(1.0, cum[-1] - span - 1.0))
        sk = s0 + v * np.arange(length)
        xy = np.stack([np.interp(sk, cum, sm[:, 0]), np.interp(sk, cum, sm[:, 1])], axis=1)
        tang_s = np.stack([sk - 0.5, sk + 0.5], axis=1)
        tx = np.interp(tang_s, cum, sm[:, 0])
        ty = np.interp(tang_s, cum, sm[:, 1])
        theta = np.arctan2(ty[:, 1] - ty[:, 0], tx[:, 1] - tx[:, 0])
        steps = np.hypot(*np.diff(xy, axis=0).T)
        if np.any(steps < 8.0) or np.any(steps > 14.0):
            continue
        if np.any(np.abs(wrap_angle(np.diff(theta))) > 0.3):
            continue
        if np.mean(world.road_value(xy) > 0.5) < 0.9:
            continue
        if np.any(np.abs(xy[-1]) > world.half - margin):
            continue
        return Trajectory(np.arange(length), xy, theta)
    raise GenerationError(f"no feasible {length}-point trajectory after {MAX_ATTEMPTS} attempts (seed {seed})")


def _fd_headings(xy: np.ndarray) -> np.ndarray:
    d = np.diff(xy, axis=0)
    d = np.vstack([d, d[-1:]])
    mag = np.hypot(d[:, 0], d[:, 1])
    out = np.arctan2(d[:, 1], d[:, 0])
    valid = mag > 1e-9
    # carry headings across held (zero-displacement) samples
    for k in range(len(out)):
        if not valid[k]:
            out[k] = out[k - 1] if k > 0 else 0.0
    return out, valid


def corrupt_gps(gt: Trajectory, spec: GpsNoiseSpec, rng: np.random.Generator | None = None) -> Trajectory:
    """White noise plus random-walk bias with sample-and-hold dropouts.

    Headings are the ground-truth headings shifted by how much the noise
    changed the finite-difference direction of travel, so a zero-noise spec
    returns the input unchanged.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    T = len(gt)

    def draw(sigma, size):
        if spec.distribution == "uniform":
            a = sigma * math.sqrt(3.0)
            return rng.uniform(-a, a, size=size)
        return rng.normal(0.0, sigma, size=size)

    steps = draw(spec.sigma_walk, (T, 2))
    steps[0] = 0.0
    bias = np.cumsum(steps, axis=0)
    white = draw(spec.sigma_white, (T, 2))
    xy = gt.xy + bias + white
    hold = rng.random(T) < spec.dropout_prob
    for k in range(1, T):
        if hold[k]:
            xy[k] = xy[k - 1]
    fd_gps, _ = _fd_headings(xy)
    fd_gt, _ = _fd_headings(gt.xy)
    theta = gt.theta + wrap_angle(fd_gps - fd_gt)
    return Trajectory(gt.t, xy, theta)


# ----------------------------------------------------------------------------
# polar observation


def polar_bin_centers():
    ranges = (np.arange(POLAR_BINS) + 0.5) * POLAR_RES
    width = 2 * FOV_HALF / POLAR_BINS
    azimuths = -FOV_HALF + (np.arange(POLAR_BINS) + 0.5) * width
    return ranges, azimuths


def render_polar_observation(tile: MapTile, pose: Pose, obs_noise: float = 0.0, additive_std: float = 0.05,
                             rng: np.random.Generator | None = None, seed: int = 0) -> PolarObservation:
    """Sample tile semantics on a forward-facing polar grid around ``pose``.

    Grid layout is (channel, range bin, azimuth bin); positive azimuth is to
    the left of the heading.
    """
    if not tile.contains(pose.x, pose.y):
        raise DomainError(f"pose ({pose.x:.2f}, {pose.y:.2f}) lies outside the tile")
    if not 0.0 <= obs_noise < 1.0:
        raise DomainError(f"obs_noise must lie in [0, 1), got {obs_noise}")
    ranges, az = polar_bin_centers()
    R, A = np.meshgrid(ranges, az, indexing="ij")
    fwd, left = R * np.cos(A), R * np.sin(A)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    wx = pose.x + c * fwd - s * left
    wy = pose.y + s * fwd + c * left
    grid = tile.sample(wx, wy)
    if obs_noise > 0 or additive_std > 0:
        rng = rng if rng is not None else np.random.default_rng(seed)
        if obs_noise > 0:
            keep = rng.random(grid.shape[1:]) >= obs_noise
            grid = grid * keep
        if additive_std > 0:
            grid = grid + rng.normal(0.0, additive_std, size=grid.shape)
    grid = np.clip(grid, 0.0, 1.0)
    return PolarObservation(grid.astype(np.float32), pose)
