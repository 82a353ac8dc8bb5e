"""Smooth minimum-time trajectories over (x, y, z, yaw).

A refined viewpoint chain becomes a clamped cubic B-spline that starts and
ends at rest, passes through every waypoint, and is uniformly time-scaled
so the derivative control points respect the speed and yaw-rate limits.
The convex-hull property of B-splines then bounds the sampled derivatives
everywhere, not just at the samples we check.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline, make_interp_spline

from .errors import InsufficientWaypoints
from .geometry import Pose4, yaw_gap
from .mapping import VolumetricMap

DEGREE = 3
CSV_RATE_HZ = 50.0
COLLISION_STEP_S = 0.05
COLLISION_CLEARANCE_M = 0.8


@dataclass(frozen=True)
class DynamicLimits:
    """Hard kinematic caps applied during time scaling."""

    v_max: float = 0.85
    omega: float = 0.5

    def __post_init__(self):
        if self.v_max <= 0.0 or self.omega <= 0.0:
            raise ValueError("dynamic limits must be positive")


@dataclass(frozen=True)
class BSplineTrajectory:
    """Clamped cubic spline in time; immutable once built.

    ``control_points`` has one (x, y, z, yaw) row per coefficient with the
    yaw channel unwrapped, ``knots`` carries full end multiplicity so the
    endpoints interpolate exactly, and ``knot_interval`` is the interior
    knot spacing in seconds.
    """

    control_points: np.ndarray
    knots: np.ndarray
    knot_interval: float
    duration: float
    degree: int = DEGREE

    def __post_init__(self):
        cp = np.asarray(self.control_points, dtype=float)
        if cp.ndim != 2 or cp.shape[1] != 4 or len(cp) < 4:
            raise ValueError("need at least 4 control points of (x, y, z, yaw)")
        if self.knot_interval <= 0.0:
            raise ValueError("knot_interval must be positive")
        object.__setattr__(self, "control_points", cp)
        object.__setattr__(self, "knots", np.asarray(self.knots, dtype=float))

    # -- evaluation ------------------------------------------------------

    def _splines(self):
        cached = getattr(self, "_spl_cache", None)
        if cached is None:
            spl = BSpline(self.knots, self.control_points, self.degree, extrapolate=False)
            cached = (spl, spl.derivative())
            object.__setattr__(self, "_spl_cache", cached)
        return cached

    def evaluate(self, times):
        """Vectorized states and derivatives; yaw stays unwrapped.

        Times are clamped into [0, duration]. Returns (states, rates) with
        one (x, y, z, yaw) row each.
        """
        spl, dspl = self._splines()
        t = np.clip(np.atleast_1d(np.asarray(times, dtype=float)), 0.0, self.duration)
        return spl(t), dspl(t)

    def sample(self, t: float):
        """Pose, velocity vector, and yaw rate at one time."""
        states, rates = self.evaluate([t])
        pose = Pose4(states[0, :3], states[0, 3])
        return pose, rates[0, :3], float(rates[0, 3])

    def derivative_control_points(self) -> np.ndarray:
        """Control points of the first-derivative spline.

        Their hull bounds every sampled derivative, so checking them checks
        the whole trajectory.
        """
        t, c, k = self.knots, self.control_points, self.degree
        span = t[1 + k : len(c) + k] - t[1 : len(c)]
        return k * (c[1:] - c[:-1]) / span[:, None]

    def retimed(self, factor: float) -> "BSplineTrajectory":
        """Same geometry traversed ``factor`` times slower."""
        if factor <= 0.0:
            raise ValueError("retime factor must be positive")
        return BSplineTrajectory(
            self.control_points,
            self.knots * factor,
            self.knot_interval * factor,
            self.duration * factor,
            self.degree,
        )


@dataclass(frozen=True)
class FeasibilityReport:
    """Outcome of the safety and limit checks; feasible means no finding."""

    feasible: bool
    reason: str = "feasible"
    time: float | None = None


def _waypoint_array(path) -> np.ndarray:
    viewpoints = getattr(path, "viewpoints", path)
    rows = []
    for wp in viewpoints:
        pose = getattr(wp, "pose", wp)
        rows.append([*pose.position, pose.yaw])
    return np.asarray(rows, dtype=float)


def fit_trajectory(path, limits: DynamicLimits) -> BSplineTrajectory:
    """Interpolating clamped spline through the chain, scaled to the limits.

    The chain is parameterized uniformly and fitted with zero end
    derivatives, then time is stretched by the smallest factor that brings
    every derivative control point under ``v_max`` and ``omega``. Start
    and end therefore happen at rest, and the stretch is minimal for the
    hull-based bound.
    """
    wps = _waypoint_array(path)
    if len(wps) < 2:
        raise InsufficientWaypoints("a trajectory needs at least two poses")
    wps[:, 3] = np.unwrap(wps[:, 3])
    u = np.arange(len(wps), dtype=float)
    spl = make_interp_spline(u, wps, k=DEGREE, bc_type="clamped")
    base = BSplineTrajectory(spl.c, spl.t, 1.0, float(u[-1]) if len(u) > 1 else 1.0)
    d = base.derivative_control_points()
    v_need = float(np.max(np.linalg.norm(d[:, :3], axis=1)))
    w_need = float(np.max(np.abs(d[:, 3])))
    sigma = max(v_need / limits.v_max, w_need / limits.omega, 1e-9)
    return base.retimed(sigma)


def check_feasibility(
    traj: BSplineTrajectory, limits: DynamicLimits, vmap: VolumetricMap | None = None
) -> FeasibilityReport:
    """Verify hull-bounded rates and sweep the path for collisions.

    Collision checking samples every 0.05 s and requires 0.8 m of
    clearance from occupied voxels. The first violation wins.
    """
    d = traj.derivative_control_points()
    speeds = np.linalg.norm(d[:, :3], axis=1)
    if np.any(speeds > limits.v_max + 1e-9):
        i = int(np.argmax(speeds))
        return FeasibilityReport(
            False, f"velocity bound exceeded: {speeds[i]:.3f} > {limits.v_max:.3f} m/s"
        )
    if np.any(np.abs(d[:, 3]) > limits.omega + 1e-9):
        i = int(np.argmax(np.abs(d[:, 3])))
        return FeasibilityReport(
            False, f"yaw rate bound exceeded: {abs(d[i, 3]):.3f} > {limits.omega:.3f} rad/s"
        )
    if vmap is not None:
        times = np.arange(0.0, traj.duration + COLLISION_STEP_S, COLLISION_STEP_S)
        times = np.clip(times, 0.0, traj.duration)
        states, _ = traj.evaluate(times)
        ok = vmap.clearance_ok(states[:, :3], COLLISION_CLEARANCE_M)
        if not np.all(ok):
            i = int(np.argmin(ok))
            return FeasibilityReport(
                False, "collision: clearance violated", float(times[i])
            )
    return FeasibilityReport(True)


def trajectory_to_csv(traj: BSplineTrajectory, path, rate_hz: float = CSV_RATE_HZ) -> None:
    """Fixed-rate dump of states and rates, closing exactly at the end."""
    times = np.arange(0.0, traj.duration, 1.0 / rate_hz)
    times = np.append(times, traj.duration)
    states, rates = traj.evaluate(times)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "z", "yaw", "vx", "vy", "vz", "yaw_rate"])
        for t, s, r in zip(times, states, rates):
            w.writerow([f"{t:.6f}", *(f"{v:.6f}" for v in s), *(f"{v:.6f}" for v in r[:3]), f"{r[3]:.6f}"])


def endpoint_error(traj: BSplineTrajectory, path) -> float:
    """Largest endpoint mismatch across position and yaw, wrap-aware."""
    wps = _waypoint_array(path)
    first, _, _ = traj.sample(0.0)
    last, _, _ = traj.sample(traj.duration)
    err = max(
        float(np.linalg.norm(first.position - wps[0, :3])),
        float(np.linalg.norm(last.position - wps[-1, :3])),
        yaw_gap(first.yaw, wps[0, 3]),
        yaw_gap(last.yaw, wps[-1, 3]),
    )
    return err
