"""Closed-loop scanning missions against synthetic ground-truth scenes.

Three pieces let the planning stack run end to end without hardware: dense
surface models of a few building-like structures, a depth camera that
returns the surface points each ray can see, and a mission loop that
alternates sensing, map fusion, surface prediction, and planning while a
kinematic drone flies the resulting trajectories. Every run is driven by a
:class:`MissionConfig` and recorded in a :class:`MissionLog` that can be
dumped to a directory for offline inspection.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .cloud_io import read_ply, write_ply
from .errors import ConfigError, NoFeasibleViewpoint, ReconPlanError
from .evaluation import evaluate_model
from .geometry import (
    Aabb,
    PointCloud,
    Pose4,
    estimate_normals,
    unit,
    voxel_downsample,
    wrap_angle,
)
from .global_planner import (
    PlannerParams,
    SurfaceCluster,
    astar_route,
    build_cost_matrix,
    cluster_surfaces,
    sample_viewpoints,
    select_best_viewpoint,
    solve_atsp,
)
from .local_planner import LocalParams, plan_local_path
from .mapping import SensorModel, ViewpointIdAllocator, VolumetricMap
from .prediction import FileBackedPredictor, GeometricCompletionPredictor, PassthroughPredictor
from .trajectory import (
    COLLISION_CLEARANCE_M,
    DynamicLimits,
    check_feasibility,
    fit_trajectory,
)

RAYS_HORIZONTAL = 64
RAYS_VERTICAL = 48
CAPTURE_RADIUS_M = 0.1
SURFACE_SPACING_M = 0.05
FLIGHT_MARGIN_M = 8.0
TOP_MARGIN_M = 5.0
SIM_DT_S = 0.02
ESCAPE_CLEARANCE_M = 2.0 * COLLISION_CLEARANCE_M
MIN_PROGRESS_S = 0.5

BUILTIN_SCENE_NAMES = ("box", "house-like", "palace-like")


# ---- scenes ------------------------------------------------------------


@dataclass(frozen=True)
class Scene:
    """A ground-truth surface plus the volume missions may fly in."""

    name: str
    ground_truth_surface: PointCloud
    bounds: Aabb

    def __post_init__(self):
        if not self.ground_truth_surface.has_normals:
            raise ValueError("scene surfaces carry per-point normals")

    def surface_tree(self) -> cKDTree:
        tree = self.__dict__.get("_tree")
        if tree is None:
            tree = cKDTree(self.ground_truth_surface.points)
            object.__setattr__(self, "_tree", tree)
        return tree

    def structure_bounds(self) -> Aabb:
        """Tight box around the surface itself, not the flight volume."""
        return self.ground_truth_surface.aabb()


def _patch(corner, e_u, e_v, normal, spacing):
    """Grid sampling of a parallelogram patch, edges included."""
    e_u = np.asarray(e_u, dtype=float)
    e_v = np.asarray(e_v, dtype=float)
    nu = max(int(round(np.linalg.norm(e_u) / spacing)), 1) + 1
    nv = max(int(round(np.linalg.norm(e_v) / spacing)), 1) + 1
    uu, vv = np.meshgrid(np.linspace(0.0, 1.0, nu), np.linspace(0.0, 1.0, nv), indexing="ij")
    pts = np.asarray(corner, dtype=float) + uu[..., None] * e_u + vv[..., None] * e_v
    pts = pts.reshape(-1, 3)
    return pts, np.tile(unit(np.asarray(normal, dtype=float)), (len(pts), 1))


_FACE_AXES = {"-x": (0, -1), "+x": (0, 1), "-y": (1, -1), "+y": (1, 1), "-z": (2, -1), "+z": (2, 1)}


def _grid_axis(lo, hi, spacing):
    return np.linspace(lo, hi, max(int(round((hi - lo) / spacing)), 1) + 1)


def _box_faces(lo, hi, spacing, skip=("-z",)):
    """Outward-facing samples of an axis-aligned box, minus skipped faces.

    Bottoms are skipped by default: an aerial scan can never observe the
    underside of a structure resting on the ground.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    parts = []
    for label, (ax, sign) in _FACE_AXES.items():
        if label in skip:
            continue
        u, v = (i for i in range(3) if i != ax)
        corner = lo.copy()
        if sign > 0:
            corner[ax] = hi[ax]
        e_u = np.zeros(3)
        e_u[u] = hi[u] - lo[u]
        e_v = np.zeros(3)
        e_v[v] = hi[v] - lo[v]
        n = np.zeros(3)
        n[ax] = sign
        parts.append(_patch(corner, e_u, e_v, n, spacing))
    return parts


def _box_scene(spacing):
    return _box_faces((-2.0, -2.0, 0.0), (2.0, 2.0, 3.0), spacing)


def _gable(y, ny, spacing):
    """Triangular end wall under a symmetric roof, ridge at x=5, z=12."""
    gx, gz = np.meshgrid(_grid_axis(0.0, 10.0, spacing), _grid_axis(7.0, 12.0, spacing), indexing="ij")
    keep = gz <= 12.0 - np.abs(gx - 5.0) + 1e-9
    pts = np.column_stack([gx[keep], np.full(int(keep.sum()), y), gz[keep]])
    return pts, np.tile([0.0, ny, 0.0], (len(pts), 1))


def _house_scene(spacing):
    parts = _box_faces((0.0, 0.0, 0.0), (10.0, 11.0, 7.0), spacing, skip=("-z", "+z"))
    s = np.sqrt(0.5)
    parts.append(_patch((0.0, 0.0, 7.0), (5.0, 0.0, 5.0), (0.0, 11.0, 0.0), (-s, 0.0, s), spacing))
    parts.append(_patch((10.0, 0.0, 7.0), (-5.0, 0.0, 5.0), (0.0, 11.0, 0.0), (s, 0.0, s), spacing))
    parts.append(_gable(0.0, -1.0, spacing))
    parts.append(_gable(11.0, 1.0, spacing))
    parts += _box_faces((10.0, 2.0, 0.0), (14.0, 8.0, 4.0), spacing, skip=("-z", "-x"))
    # the annex hides part of the east wall; drop that strictly interior patch
    pts = np.vstack([p for p, _ in parts])
    nrm = np.vstack([n for _, n in parts])
    hidden = (
        (np.abs(pts[:, 0] - 10.0) < 1e-9)
        & (pts[:, 1] > 2.0 + 1e-9)
        & (pts[:, 1] < 8.0 - 1e-9)
        & (pts[:, 2] < 4.0 - 1e-9)
        & (nrm[:, 0] > 0.5)
    )
    return [(pts[~hidden], nrm[~hidden])]


def _palace_scene(spacing):
    parts = _box_faces((0.0, 0.0, 0.0), (15.0, 25.0, 8.0), spacing, skip=("-z", "+z"))
    court = ((5.0, 10.0), (8.0, 17.0))
    towers = [(0.0, 0.0), (12.0, 0.0), (0.0, 22.0), (12.0, 22.0)]
    # roof deck with holes for the courtyard shaft and the tower bases
    gx, gy = np.meshgrid(_grid_axis(0.0, 15.0, spacing), _grid_axis(0.0, 25.0, spacing), indexing="ij")
    keep = ~(
        (gx > court[0][0] - 1e-9)
        & (gx < court[0][1] + 1e-9)
        & (gy > court[1][0] - 1e-9)
        & (gy < court[1][1] + 1e-9)
    )
    for tx, ty in towers:
        keep &= ~((gx > tx - 1e-9) & (gx < tx + 3.0 + 1e-9) & (gy > ty - 1e-9) & (gy < ty + 3.0 + 1e-9))
    deck = np.column_stack([gx[keep], gy[keep], np.full(int(keep.sum()), 8.0)])
    parts.append((deck, np.tile([0.0, 0.0, 1.0], (len(deck), 1))))
    for tx, ty in towers:
        parts += _box_faces((tx, ty, 8.0), (tx + 3.0, ty + 3.0, 14.0), spacing, skip=("-z",))
    (x0, x1), (y0, y1) = court
    parts.append(_patch((x0, y0, 0.0), (0.0, y1 - y0, 0.0), (0.0, 0.0, 8.0), (1.0, 0.0, 0.0), spacing))
    parts.append(_patch((x1, y0, 0.0), (0.0, y1 - y0, 0.0), (0.0, 0.0, 8.0), (-1.0, 0.0, 0.0), spacing))
    parts.append(_patch((x0, y0, 0.0), (x1 - x0, 0.0, 0.0), (0.0, 0.0, 8.0), (0.0, 1.0, 0.0), spacing))
    parts.append(_patch((x0, y1, 0.0), (x1 - x0, 0.0, 0.0), (0.0, 0.0, 8.0), (0.0, -1.0, 0.0), spacing))
    parts.append(_patch((x0, y0, 0.0), (x1 - x0, 0.0, 0.0), (0.0, y1 - y0, 0.0), (0.0, 0.0, 1.0), spacing))
    return parts


_BUILDERS = {"box": _box_scene, "house-like": _house_scene, "palace-like": _palace_scene}


def make_scene(name: str, spacing: float = SURFACE_SPACING_M) -> Scene:
    """Build one named scene; the flight volume pads the structure."""
    if name not in _BUILDERS:
        raise ConfigError(f"unknown scene {name!r}, builtins are {BUILTIN_SCENE_NAMES}")
    parts = _BUILDERS[name](spacing)
    cloud = PointCloud(np.vstack([p for p, _ in parts]), np.vstack([n for _, n in parts]))
    struct = cloud.aabb()
    margin = np.array([FLIGHT_MARGIN_M, FLIGHT_MARGIN_M, 0.0])
    bounds = Aabb(struct.lo - margin, struct.hi + margin + np.array([0.0, 0.0, TOP_MARGIN_M]))
    return Scene(name, cloud, bounds)


def builtin_scenes() -> list:
    """All built-in scenes, smallest first."""
    return [make_scene(name) for name in BUILTIN_SCENE_NAMES]


def resolve_scene(ref: str) -> Scene:
    """A builtin name, or a path to a PLY surface with normals."""
    if ref in _BUILDERS:
        return make_scene(ref)
    path = Path(ref)
    if path.exists():
        cloud = read_ply(path)
        if not cloud.has_normals:
            raise ConfigError(f"{path}: scene surfaces need per-point normals")
        struct = cloud.aabb()
        margin = np.array([FLIGHT_MARGIN_M, FLIGHT_MARGIN_M, 0.0])
        bounds = Aabb(struct.lo - margin, struct.hi + margin + np.array([0.0, 0.0, TOP_MARGIN_M]))
        return Scene(path.stem, cloud, bounds)
    raise ConfigError(f"unknown scene {ref!r}")


# ---- depth camera ------------------------------------------------------


def _ray_angles(sensor: SensorModel):
    az = (np.arange(RAYS_HORIZONTAL) + 0.5) / RAYS_HORIZONTAL * sensor.horizontal_fov
    el = (np.arange(RAYS_VERTICAL) + 0.5) / RAYS_VERTICAL * sensor.vertical_fov
    return az - sensor.horizontal_fov / 2.0, el - sensor.vertical_fov / 2.0


def render_depth(
    scene: Scene,
    pose: Pose4,
    sensor: SensorModel | None = None,
    noise_sigma: float = 0.0,
    rng=None,
    with_misses: bool = False,
):
    """One synthetic depth frame: the nearest surface point per ray.

    Rays form a ``RAYS_HORIZONTAL x RAYS_VERTICAL`` angular grid across the
    field of view. Each ray returns the closest scene point lying within
    ``CAPTURE_RADIUS_M`` of its line and inside ``max_range``; rays that
    catch nothing contribute nothing, so the result holds one point per
    hitting ray. ``noise_sigma`` adds Gaussian range noise along each line
    of sight. With ``with_misses`` the return becomes ``(hits, ends)``
    where ``ends`` are the max-range endpoints of the rays that caught
    nothing, for carving observed-empty space into a map.
    """
    sensor = sensor if sensor is not None else SensorModel()
    pos = pose.position
    az_c, el_c = _ray_angles(sensor)
    world_az = pose.yaw + az_c
    ce, se = np.cos(el_c), np.sin(el_c)
    dirs = np.empty((RAYS_VERTICAL, RAYS_HORIZONTAL, 3))
    dirs[..., 0] = ce[:, None] * np.cos(world_az)[None, :]
    dirs[..., 1] = ce[:, None] * np.sin(world_az)[None, :]
    dirs[..., 2] = np.broadcast_to(se[:, None], (RAYS_VERTICAL, RAYS_HORIZONTAL))

    best_i = np.full((RAYS_VERTICAL, RAYS_HORIZONTAL), -1, dtype=np.int64)
    tree = scene.surface_tree()
    idx = tree.query_ball_point(pos, sensor.max_range + CAPTURE_RADIUS_M)
    if idx:
        pts = scene.ground_truth_surface.points[np.asarray(idx, dtype=np.int64)]
        rel = pts - pos
        dist = np.linalg.norm(rel, axis=1)
        cy, sy = np.cos(pose.yaw), np.sin(pose.yaw)
        f = rel[:, 0] * cy + rel[:, 1] * sy
        s = -rel[:, 0] * sy + rel[:, 1] * cy
        el_p = np.arctan2(rel[:, 2], np.hypot(f, s))
        # capture cone half-angle per point; elevation offsets beyond it
        # cannot bring the point within capture radius of a row's rays
        cone = np.arcsin(np.clip(CAPTURE_RADIUS_M / np.maximum(dist, 1e-12), 0.0, 1.0))
        # frustum pre-cull, margins sized so no capturable point is lost:
        # the azimuth half-width of a cone of radius theta at elevation e
        # is arcsin(sin theta / cos e)
        ratio = CAPTURE_RADIUS_M / np.maximum(dist * np.maximum(np.cos(el_p), 1e-9), 1e-12)
        az_margin = np.where(ratio >= 1.0, np.pi, np.arcsin(np.clip(ratio, 0.0, 1.0)))
        keep = (np.abs(el_p) <= 0.5 * sensor.vertical_fov + cone) & (
            np.abs(np.arctan2(s, f)) <= 0.5 * sensor.horizontal_fov + az_margin
        )
        pts, rel, dist = pts[keep], rel[keep], dist[keep]
        el_p, cone = el_p[keep], cone[keep]
        for j in range(RAYS_VERTICAL):
            band = np.abs(el_p - el_c[j]) <= cone
            if not band.any():
                continue
            members = np.flatnonzero(band)
            t = rel[band] @ dirs[j].T
            perp2 = (dist[band] ** 2)[:, None] - t * t
            tt = np.where(
                (t > 0.0) & (t <= sensor.max_range) & (perp2 <= CAPTURE_RADIUS_M**2), t, np.inf
            )
            col = tt.min(axis=0)
            hit = col < np.inf
            best_i[j, hit] = members[tt.argmin(axis=0)[hit]]

    mask = best_i >= 0
    if mask.any():
        hits = pts[best_i[mask]]
        if noise_sigma > 0.0:
            rng = rng if rng is not None else np.random.default_rng()
            line = hits - pos
            length = np.linalg.norm(line, axis=1)
            noisy = length + rng.normal(0.0, noise_sigma, size=len(hits))
            hits = pos + line * (noisy / np.maximum(length, 1e-12))[:, None]
        cloud = PointCloud(hits)
    else:
        cloud = PointCloud.empty()
    if with_misses:
        return cloud, pos + sensor.max_range * dirs[~mask]
    return cloud


# ---- configuration -----------------------------------------------------


@dataclass
class DroneState:
    """Kinematic flight state advanced along fitted trajectories."""

    pose: Pose4
    elapsed: float = 0.0
    distance_flown: float = 0.0


@dataclass
class MissionConfig:
    """Everything one mission run needs; loadable from a JSON file.

    Top-level keys mirror the field names:

    ``scene``             builtin scene name or path to a PLY surface
    ``map_resolution``    voxel edge length in meters
    ``predictor``         "geometric", "passthrough", or "file:<directory>"
    ``replan_horizon_s``  seconds of each plan flown before replanning
    ``max_time_s``        simulated-time budget before a timeout stop
    ``residual_fraction`` predicted-surface fraction allowed to stay uncovered
    ``sense_rate_hz``     sensing cadence while flying
    ``noise_sigma``       Gaussian range noise on depth returns, meters
    ``seed``              master seed for sampling and noise
    ``start``             optional ``[x, y, z, yaw]`` start pose
    ``sensor`` ``planner`` ``local`` ``limits``  nested parameter objects
    """

    scene: str = "box"
    map_resolution: float = 0.2
    predictor: str = "geometric"
    replan_horizon_s: float = 5.0
    max_time_s: float = 600.0
    residual_fraction: float = 0.0
    sense_rate_hz: float = 2.0
    noise_sigma: float = 0.0
    seed: int = 0
    start: tuple | None = None
    sensor: SensorModel = field(default_factory=SensorModel)
    planner: PlannerParams = field(default_factory=PlannerParams)
    local: LocalParams = field(default_factory=LocalParams)
    limits: DynamicLimits = field(default_factory=DynamicLimits)

    _NESTED = {"sensor": SensorModel, "planner": PlannerParams, "local": LocalParams, "limits": DynamicLimits}

    def __post_init__(self):
        if self.replan_horizon_s <= 0.0:
            raise ConfigError("replan_horizon_s must be positive")
        if self.max_time_s <= 0.0:
            raise ConfigError("max_time_s must be positive")
        if not 0.0 <= self.residual_fraction < 1.0:
            raise ConfigError("residual_fraction must lie in [0, 1)")
        if self.sense_rate_hz <= 0.0:
            raise ConfigError("sense_rate_hz must be positive")
        if self.noise_sigma < 0.0:
            raise ConfigError("noise_sigma cannot be negative")
        if not (self.predictor in ("geometric", "passthrough") or self.predictor.startswith("file:")):
            raise ConfigError(f"unknown predictor {self.predictor!r}")
        if self.start is not None:
            start = tuple(float(v) for v in self.start)
            if len(start) != 4:
                raise ConfigError("start must be [x, y, z, yaw]")
            self.start = start

    @classmethod
    def from_dict(cls, data: dict) -> "MissionConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if key in cls._NESTED:
                if not isinstance(value, dict):
                    raise ConfigError(f"{key} must be an object of parameter overrides")
                try:
                    value = cls._NESTED[key](**value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{key}: {exc}") from exc
            kwargs[key] = value
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "MissionConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(str(exc)) from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in self._NESTED:
                value = {g.name: getattr(value, g.name) for g in fields(value)}
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    def to_file(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _make_predictor(spec: str):
    if spec == "geometric":
        return GeometricCompletionPredictor()
    if spec == "passthrough":
        return PassthroughPredictor()
    directory = Path(spec[len("file:"):])
    return FileBackedPredictor(directory=directory, mission_id="mission")


# ---- logging -----------------------------------------------------------


@dataclass(frozen=True)
class CycleRecord:
    """One planning cycle's bookkeeping."""

    index: int
    sim_time: float
    position: tuple
    n_uncovered: int
    n_clusters: int
    n_viewpoints: int
    n_deferred: int
    tour_length: int
    local_length: int
    executed_s: float
    coverage: float
    timings: dict


class MissionLog:
    """Append-only mission record: planning cycles, sensing, final metrics.

    Timestamps must never regress; appends that would break monotonicity
    raise. ``write`` dumps the whole log as a directory of a JSON metrics
    summary, per-cycle and trajectory CSVs, a sensing-pose CSV with one
    observation PLY per pose, and the final occupancy map.
    """

    STAGES = ("sense", "predict", "extract", "global", "local", "trajectory", "execute")

    def __init__(self, config: MissionConfig):
        self.config = config
        self.cycles: list[CycleRecord] = []
        self.poses: list[tuple] = []
        self.observations: list[PointCloud] = []
        self.trajectory: list[tuple] = []
        self.events: list[str] = []
        self.metrics: dict = {}
        self.final_map: VolumetricMap | None = None

    def add_cycle(self, record: CycleRecord) -> None:
        if self.cycles and record.sim_time < self.cycles[-1].sim_time - 1e-9:
            raise ValueError("cycle timestamps must be monotone")
        self.cycles.append(record)

    def add_observation(self, t: float, pose: Pose4, hits: PointCloud) -> None:
        if self.poses and t < self.poses[-1][0] - 1e-9:
            raise ValueError("observation timestamps must be monotone")
        self.poses.append((t, *(float(c) for c in pose.position), pose.yaw, len(hits)))
        self.observations.append(hits)

    def add_trajectory(self, rows) -> None:
        if rows and self.trajectory and rows[0][0] < self.trajectory[-1][0] - 1e-9:
            raise ValueError("trajectory timestamps must be monotone")
        self.trajectory.extend(rows)

    def note(self, message: str) -> None:
        self.events.append(message)

    def observed_cloud(self) -> PointCloud:
        kept = [o for o in self.observations if len(o)]
        return PointCloud.concat(kept) if kept else PointCloud.empty()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(self.metrics, indent=2, sort_keys=True) + "\n")

        with open(out / "cycles.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["cycle", "sim_time", "x", "y", "z", "uncovered", "clusters", "viewpoints",
                 "deferred", "tour", "local", "executed_s", "coverage"]
                + [f"{s}_ms" for s in self.STAGES]
            )
            for c in self.cycles:
                w.writerow(
                    [c.index, f"{c.sim_time:.3f}", *(f"{v:.3f}" for v in c.position),
                     c.n_uncovered, c.n_clusters, c.n_viewpoints, c.n_deferred,
                     c.tour_length, c.local_length, f"{c.executed_s:.3f}", f"{c.coverage:.6f}"]
                    + [f"{1e3 * c.timings.get(s, 0.0):.3f}" for s in self.STAGES]
                )

        with open(out / "trajectory.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "z", "yaw", "speed"])
            for row in self.trajectory:
                w.writerow([f"{v:.6f}" for v in row])

        obs_dir = out / "observations"
        obs_dir.mkdir(exist_ok=True)
        with open(out / "poses.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "t", "x", "y", "z", "yaw", "points", "ply"])
            for i, (row, cloud) in enumerate(zip(self.poses, self.observations)):
                name = f"obs_{i:05d}.ply"
                write_ply(cloud, obs_dir / name)
                w.writerow([i, *(f"{v:.6f}" for v in row[:5]), row[5], name])

        if self.events:
            (out / "events.txt").write_text("\n".join(self.events) + "\n")
        if self.final_map is not None:
            self.final_map.save(out / "map.bin")


# ---- mission loop ------------------------------------------------------


def _default_start(scene: Scene) -> Pose4:
    """A pose just west of the structure, mid-height, facing it."""
    struct = scene.structure_bounds()
    center = struct.center
    z = struct.lo[2] + 0.6 * (struct.hi[2] - struct.lo[2])
    pos = np.array([struct.lo[0] - 4.0, center[1], max(z, struct.lo[2] + 1.0)])
    to_center = center - pos
    return Pose4(pos, float(np.arctan2(to_center[1], to_center[0])))


def _thin_cluster(cluster: SurfaceCluster, cap: int) -> SurfaceCluster:
    """Deterministic decimation keeping centroid, normal, and identity."""
    n = len(cluster.points)
    if n <= cap:
        return cluster
    stride = int(np.ceil(n / cap))
    return replace(cluster, points=cluster.points.select(np.arange(0, n, stride)))


def run_mission(config: MissionConfig, out_dir=None) -> MissionLog:
    """Fly one closed-loop scanning mission and return its log.

    Each cycle: fuse what has been sensed, predict the full surface,
    extract what is still uncovered, choose the next best view through the
    global tour, refine the approach locally, fit a trajectory, then fly
    its first ``replan_horizon_s`` seconds while sensing at
    ``sense_rate_hz``. The loop ends "covered" when the uncovered residual
    falls to the configured fraction (zero by default), "timeout" when the
    simulated-time budget runs out, and "aborted" when no remaining
    cluster admits any feasible viewpoint. Clusters that fail feasibility
    while others succeed are deferred, not dropped: they stay uncovered
    and return in later cycles. Runs are deterministic for a fixed config.
    """
    wall_start = time.perf_counter()
    scene = resolve_scene(config.scene)
    sensor = config.sensor
    vmap = VolumetricMap.from_aabb(scene.bounds, config.map_resolution)
    alloc = ViewpointIdAllocator()
    predictor = _make_predictor(config.predictor)
    log = MissionLog(config)
    start = Pose4(config.start[:3], config.start[3]) if config.start else _default_start(scene)
    state = DroneState(pose=start)
    noise_rng = np.random.default_rng(config.seed)
    dedup = config.map_resolution / 2.0
    seen: dict = {}

    gt_ijk = vmap.world_to_ijk(scene.ground_truth_surface.points)
    inb = vmap.in_bounds_ijk(gt_ijk)
    gt_flats = set(int(v) for v in np.unique(vmap.flat(gt_ijk[inb])))

    def coverage() -> float:
        return len(vmap.covered_surfaces() & gt_flats) / len(gt_flats) if gt_flats else 0.0

    def sense(t_abs: float) -> None:
        hits, misses = render_depth(
            scene, state.pose, sensor, noise_sigma=config.noise_sigma, rng=noise_rng, with_misses=True
        )
        scan = np.vstack([hits.points, misses])
        if len(scan):
            vmap.integrate_scan(state.pose, scan, alloc.id_for(state.pose), max_range=sensor.max_range)
        if len(hits):
            keys = np.floor(hits.points / dedup).astype(np.int64)
            for key, p in zip(map(tuple, keys), hits.points):
                seen.setdefault(key, p)
        log.add_observation(t_abs, state.pose, hits)

    def fly(traj, end: float) -> None:
        n = max(int(np.ceil(end / SIM_DT_S)), 1)
        ts = np.linspace(0.0, end, n + 1)
        states, rates = traj.evaluate(ts)
        speeds = np.linalg.norm(rates[:, :3], axis=1)
        t0 = state.elapsed
        log.add_trajectory(
            [(t0 + ts[i], states[i, 0], states[i, 1], states[i, 2],
              float(wrap_angle(states[i, 3])), speeds[i]) for i in range(len(ts))]
        )
        period = 1.0 / config.sense_rate_hz
        sense_ts = list(np.arange(period, end + 1e-9, period))
        if not sense_ts or end - sense_ts[-1] > 1e-6:
            sense_ts.append(end)
        for st in sense_ts:
            state.pose = traj.sample(st)[0]
            sense(t0 + st)
        state.pose = traj.sample(end)[0]
        state.elapsed = t0 + end
        state.distance_flown += float(np.trapezoid(speeds, ts))

    def hover(dt: float) -> None:
        p = state.pose.position
        log.add_trajectory(
            [(state.elapsed, *p, state.pose.yaw, 0.0), (state.elapsed + dt, *p, state.pose.yaw, 0.0)]
        )
        state.elapsed += dt
        sense(state.elapsed)

    def spin() -> None:
        """Search rotation when nothing has been observed yet."""
        step = np.pi / 3.0
        dt = step / config.limits.omega
        p = state.pose.position
        log.add_trajectory(
            [(state.elapsed, *p, state.pose.yaw, 0.0),
             (state.elapsed + dt, *p, float(wrap_angle(state.pose.yaw + step)), 0.0)]
        )
        state.pose = Pose4(p, state.pose.yaw + step)
        state.elapsed += dt
        sense(state.elapsed)

    def back_out(snap, reason: str) -> None:
        """Retreat from the nearest surface until routing has room again.

        Moving straight away from the closest occupied voxel can only gain
        clearance, so this flight skips the usual collision gate.
        """
        tree = snap.occupied_kdtree()
        if tree is None:
            hover(0.5)
            return
        d, i = tree.query(state.pose.position)
        away = state.pose.position - tree.data[i]
        norm = np.linalg.norm(away)
        away = away / norm if norm > 1e-9 else np.array([0.0, 0.0, 1.0])
        goal = state.pose.position + away * max(ESCAPE_CLEARANCE_M - float(d), 0.3)
        goal = np.clip(goal, scene.bounds.lo + 0.2, scene.bounds.hi - 0.2)
        esc = fit_trajectory([state.pose, Pose4(goal, state.pose.yaw)], config.limits)
        log.note(f"cycle {cycle}: {reason}, backing away")
        fly(esc, min(esc.duration, max(config.max_time_s - state.elapsed, 0.0)))

    sense(0.0)
    status = "timeout"
    last_dir = None
    cycle = 0

    while state.elapsed < config.max_time_s - 1e-9:
        cycle_t0 = state.elapsed
        cycle_pos = state.pose.position.copy()
        timings: dict = {}
        clock = time.perf_counter

        if len(seen) < 8:
            log.note(f"t={state.elapsed:.1f}s: too little surface in view, searching")
            spin()
            continue

        t = clock()
        snap = vmap.snapshot()
        m_c = PointCloud(np.array(list(seen.values())))
        timings["sense"] = clock() - t

        # newly observed voxels can close the clearance band around the
        # current pose; back straight out before planning anything else
        if not bool(snap.clearance_ok(state.pose.position[None, :], COLLISION_CLEARANCE_M)[0]):
            back_out(snap, "inside clearance band")

        t = clock()
        if hasattr(predictor, "observer_hint"):
            predictor.observer_hint = state.pose.position.copy()
        try:
            result = predictor.predict(m_c, snap)
        except ReconPlanError as exc:
            log.note(f"cycle {cycle}: predictor fallback ({exc})")
            result = PassthroughPredictor().predict(m_c, snap)
        timings["predict"] = clock() - t

        t = clock()
        predicted = result.predicted_surface
        if len(predicted) < 3:
            log.note(f"cycle {cycle}: degenerate prediction, searching")
            spin()
            continue
        predicted = estimate_normals(predicted, k=min(12, len(predicted)))
        uncovered = snap.extract_uncovered(predicted)
        timings["extract"] = clock() - t
        if len(uncovered) <= config.residual_fraction * len(predicted):
            status = "covered"
            log.add_cycle(CycleRecord(cycle, cycle_t0, tuple(cycle_pos), len(uncovered),
                                      0, 0, 0, 0, 0, 0.0, coverage(), timings))
            break

        t = clock()
        compact = voxel_downsample(uncovered, max(config.map_resolution, 0.2))
        clusters = cluster_surfaces(compact if len(compact) else uncovered, config.planner)
        by_id = {c.id: c for c in clusters}
        viewpoints = []
        deferred = 0
        for cl in clusters:
            try:
                cands = sample_viewpoints(cl, snap, result.internal_space, config.planner,
                                          seed=config.seed * 65536 + cycle)
                vp, _ = select_best_viewpoint(cands, _thin_cluster(cl, 300), snap, sensor, state.pose)
            except NoFeasibleViewpoint:
                deferred += 1
                log.note(f"cycle {cycle}: cluster {cl.id} deferred, no feasible viewpoint")
                continue
            viewpoints.append(vp)
        if not viewpoints:
            status = "aborted"
            log.note(
                f"cycle {cycle}: aborted, all {len(clusters)} clusters infeasible "
                f"(sizes {[len(c.points) for c in clusters]})"
            )
            log.add_cycle(CycleRecord(cycle, cycle_t0, tuple(cycle_pos), len(uncovered),
                                      len(clusters), 0, deferred, 0, 0, 0.0, coverage(), timings))
            break
        matrix = build_cost_matrix(viewpoints, state.pose, last_dir, snap, config.planner)
        plan = solve_atsp(matrix)
        nbv = viewpoints[plan.order[1] - 1]
        timings["global"] = clock() - t

        t = clock()
        target = by_id[nbv.cluster_id]
        local_params = replace(
            config.local,
            subcluster_size=max(config.local.subcluster_size, int(np.ceil(len(target.points) / 4))),
        )
        local = plan_local_path(state.pose, nbv, _thin_cluster(target, 600), snap,
                                result.internal_space, local_params, config.planner, sensor,
                                seed=config.seed * 65536 + cycle)
        timings["local"] = clock() - t

        t = clock()
        traj = fit_trajectory(local, config.limits)
        timings["trajectory"] = clock() - t

        def attempt(candidate) -> float:
            end = min(config.replan_horizon_s, candidate.duration, config.max_time_s - state.elapsed)
            report = check_feasibility(candidate, config.limits, snap)
            if not report.feasible and report.time is not None:
                end = min(end, max(report.time - 0.25, 0.0))
            if end <= 1e-6:
                return 0.0
            fly(candidate, end)
            return end

        t = clock()
        executed = attempt(traj)
        if executed < MIN_PROGRESS_S:
            # straight chains cannot cross the structure; follow the
            # traversable-route waypoints around it instead
            detour = astar_route(snap, state.pose.position, nbv.position,
                                 config.planner.unknown_penalty, inflate=COLLISION_CLEARANCE_M)
            if detour is not None and len(detour) >= 2:
                waypts = [state.pose]
                for p in detour[1:]:
                    look = target.centroid - p
                    waypts.append(Pose4(p, float(np.arctan2(look[1], look[0]))))
                gained = attempt(fit_trajectory(waypts, config.limits))
                if gained > 0.0 and executed == 0.0:
                    log.note(f"cycle {cycle}: direct plan blocked, detouring")
                executed += gained
        if executed < MIN_PROGRESS_S:
            back_out(snap, "plan made no progress")
        else:
            hop = nbv.position - cycle_pos
            if np.linalg.norm(hop) > 1e-9:
                last_dir = unit(hop)
        timings["execute"] = clock() - t

        log.add_cycle(CycleRecord(cycle, cycle_t0, tuple(cycle_pos), len(uncovered),
                                  len(clusters), len(viewpoints), deferred,
                                  len(plan.order) - 1, len(local.viewpoints), executed,
                                  coverage(), timings))
        cycle += 1

    surface = PointCloud(np.array(list(seen.values()))) if seen else PointCloud.empty()
    quality = {"precision": 0.0, "recall": 0.0, "f_score": 0.0}
    if len(surface):
        report = evaluate_model(surface, scene.ground_truth_surface)
        quality = {"precision": report.precision, "recall": report.recall, "f_score": report.f_score}
    stage_means = {
        s: 1e3 * float(np.mean([c.timings[s] for c in log.cycles if s in c.timings] or [0.0]))
        for s in MissionLog.STAGES
    }
    log.metrics = {
        "status": status,
        "scene": scene.name,
        "predictor": config.predictor,
        "seed": config.seed,
        "cycles": len(log.cycles),
        "observations": len(log.poses),
        "sim_time_s": round(state.elapsed, 6),
        "distance_flown_m": round(state.distance_flown, 6),
        "coverage": round(coverage(), 6),
        "surface_points": len(surface),
        "wall_time_s": round(time.perf_counter() - wall_start, 3),
        "stage_means_ms": {k: round(v, 3) for k, v in stage_means.items()},
        **{k: round(v, 4) for k, v in quality.items()},
    }
    log.final_map = vmap
    if out_dir is not None:
        log.write(out_dir)
    return log
