"""Geometric primitives and point-cloud utilities shared by all modules.

Points are plain ``(3,)`` float64 arrays and clouds are ``(N, 3)`` arrays
wrapped in :class:`PointCloud`. Everything here is a pure function over
immutable values; clouds mark their buffers read-only after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput, InsufficientPoints

TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Wrap an angle (or array of angles) into [-pi, pi)."""
    return np.mod(np.asarray(a, dtype=float) + np.pi, TWO_PI) - np.pi


def yaw_gap(a: float, b: float) -> float:
    """Shortest-arc absolute difference between two yaw angles, in [0, pi]."""
    return float(abs(wrap_angle(a - b)))


def unit(v: np.ndarray) -> np.ndarray:
    """Normalize a vector; raises on zero length."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


@dataclass(frozen=True)
class Pose4:
    """4-DoF pose: position plus yaw, the unit of planning.

    Yaw is stored wrapped into [-pi, pi); use :func:`yaw_gap` for
    differences so wrap-around never inflates a cost.
    """

    position: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError("pose position must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))

    @property
    def x(self) -> float:
        return float(self.position[0])

    @property
    def y(self) -> float:
        return float(self.position[1])

    @property
    def z(self) -> float:
        return float(self.position[2])

    def heading(self) -> np.ndarray:
        """Unit vector of the horizontal look direction."""
        return np.array([np.cos(self.yaw), np.sin(self.yaw), 0.0])


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box with componentwise lo <= hi."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(3)
        hi = np.asarray(self.hi, dtype=float).reshape(3)
        if np.any(lo > hi):
            raise ValueError("Aabb lo must be <= hi componentwise")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def extents(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def inflated(self, margin) -> "Aabb":
        m = np.broadcast_to(np.asarray(margin, dtype=float), (3,))
        return Aabb(self.lo - m, self.hi + m)

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)


@dataclass(frozen=True)
class PointCloud:
    """An (N, 3) point set with optional per-point unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        pts = np.ascontiguousarray(pts)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.ascontiguousarray(np.asarray(self.normals, dtype=float))
            if nrm.shape != pts.shape:
                raise ValueError("normals must match points shape")
            if not np.all(np.isfinite(nrm)):
                raise ValueError("normals contain non-finite values")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))

    @classmethod
    def concat(cls, clouds) -> "PointCloud":
        clouds = list(clouds)
        pts = np.vstack([c.points for c in clouds]) if clouds else np.zeros((0, 3))
        normals = None
        if clouds and all(c.has_normals for c in clouds):
            normals = np.vstack([c.normals for c in clouds])
        return cls(pts, normals)

    def select(self, index) -> "PointCloud":
        nrm = self.normals[index] if self.has_normals else None
        return PointCloud(self.points[index], nrm)

    def translated(self, offset) -> "PointCloud":
        return PointCloud(self.points + np.asarray(offset, dtype=float), self.normals)

    def aabb(self) -> Aabb:
        if len(self) == 0:
            raise EmptyInput("empty cloud has no bounding box")
        return Aabb(self.points.min(axis=0), self.points.max(axis=0))


def centroid(cloud: PointCloud) -> np.ndarray:
    """Arithmetic mean of all points."""
    if len(cloud) == 0:
        raise EmptyInput("centroid of an empty cloud")
    return cloud.points.mean(axis=0)


def estimate_normals(cloud: PointCloud, k: int = 12, return_confidence: bool = False):
    """Per-point normals from the covariance of the k nearest neighbors.

    The normal is the smallest-eigenvalue eigenvector of the local
    covariance, with its sign oriented away from the global cloud centroid.
    With ``return_confidence`` a planarity score per point is also returned;
    values near zero flag degenerate (collinear) neighborhoods whose normal
    direction is only constrained up to rotation about the line.
    """
    n = len(cloud)
    if n < k or k < 3:
        raise InsufficientPoints(f"need at least k={k} >= 3 points, have {n}")
    pts = cloud.points
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    neigh = pts[idx]                      # (N, k, 3)
    mean = neigh.mean(axis=1, keepdims=True)
    d = neigh - mean
    cov = np.einsum("nki,nkj->nij", d, d) / k
    w, v = np.linalg.eigh(cov)            # ascending eigenvalues
    normals = v[:, :, 0].copy()
    lam_max = np.maximum(w[:, 2], 1e-300)
    confidence = (w[:, 1] - w[:, 0]) / lam_max

    c = pts.mean(axis=0)
    outward = pts - c
    dots = np.einsum("ni,ni->n", normals, outward)
    flip = dots < 0.0
    normals[flip] = -normals[flip]
    # centroid in-plane case: pin an arbitrary but deterministic sign
    ambiguous = np.abs(dots) < 1e-12
    if np.any(ambiguous):
        amb = normals[ambiguous]
        lead = np.argmax(np.abs(amb), axis=1)
        sign = np.sign(amb[np.arange(len(lead)), lead])
        sign[sign == 0] = 1.0
        normals[ambiguous] = amb * sign[:, None]
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / norms
    out = PointCloud(pts, normals)
    if return_confidence:
        return out, confidence
    return out


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One representative point (member centroid) per occupied voxel.

    Output order is sorted by integer voxel index so results are stable
    regardless of input ordering. Normals, when present, are averaged and
    renormalized per voxel.
    """
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    m = uniq.shape[0]
    sums = np.zeros((m, 3))
    counts = np.zeros(m)
    np.add.at(sums, inverse, cloud.points)
    np.add.at(counts, inverse, 1.0)
    centers = sums / counts[:, None]
    normals = None
    if cloud.has_normals:
        nsum = np.zeros((m, 3))
        np.add.at(nsum, inverse, cloud.normals)
        norms = np.linalg.norm(nsum, axis=1)
        bad = norms < 1e-12
        if np.any(bad):
            # opposing members cancelled; fall back to the first member's normal
            first = np.full(m, -1, dtype=np.int64)
            order = np.arange(len(cloud) - 1, -1, -1)
            first[inverse[order]] = order
            nsum[bad] = cloud.normals[first[bad]]
            norms = np.linalg.norm(nsum, axis=1)
        normals = nsum / norms[:, None]
    return PointCloud(centers, normals)


def farthest_point_indices(points: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; returns indices into ``points``."""
    m = points.shape[0]
    rng = np.random.default_rng(seed)
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = rng.integers(m)
    dist = np.linalg.norm(points - points[chosen[0]], axis=1)
    for i in range(1, n):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(points - points[chosen[i]], axis=1))
    return chosen


def resize_to(cloud: PointCloud, n: int, seed: int = 0) -> PointCloud:
    """Return exactly ``n`` points.

    Larger clouds are reduced by deterministic farthest-point sampling;
    smaller ones are padded by round-robin repetition so every original
    point survives.
    """
    if len(cloud) == 0:
        raise EmptyInput("cannot resize an empty cloud")
    if n <= 0:
        raise ValueError("target size must be positive")
    m = len(cloud)
    if m == n:
        return cloud
    if m > n:
        idx = farthest_point_indices(cloud.points, n, seed=seed)
    else:
        idx = np.arange(n) % m
    return cloud.select(idx)
