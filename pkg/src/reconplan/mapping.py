"""Online volumetric occupancy map with per-surface observation bookkeeping.

Voxels carry one of three states (unknown / free / occupied). Occupied
voxels additionally record the set of distinct viewpoint identifiers that
observed them; a surface voxel counts as covered once two or more distinct
viewpoints have seen it. Ray integration and occlusion queries use integer
grid traversal (Amanatides & Woo) stepped in lockstep over ray batches.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import MapFormatError
from .geometry import Aabb, PointCloud, Pose4, yaw_gap

UNKNOWN = np.uint8(0)
FREE = np.uint8(1)
OCCUPIED = np.uint8(2)

_MAGIC = b"PRVM"
_VERSION = 1
_HEADER = struct.Struct("<4sI3dd3I12x")  # 64 bytes


@dataclass(frozen=True)
class SensorModel:
    """Pinhole-style depth sensor footprint: FOV half-angles and range."""

    horizontal_fov: float = np.deg2rad(80.0)
    vertical_fov: float = np.deg2rad(60.0)
    max_range: float = 8.0

    def __post_init__(self):
        for fov in (self.horizontal_fov, self.vertical_fov):
            if not 0.0 < fov < np.pi:
                raise ValueError("FOV must lie in (0, pi)")
        if self.max_range <= 0.0:
            raise ValueError("max_range must be positive")


class ViewpointIdAllocator:
    """Issues viewpoint identifiers, merging poses that are nearly identical.

    Two sensing poses share an identifier when they differ by at most
    ``position_threshold`` in position and ``yaw_threshold`` in yaw;
    otherwise a fresh identifier is issued. This keeps consecutive frames
    from trivially satisfying the two-viewpoint coverage rule.
    """

    def __init__(self, position_threshold: float = 0.5, yaw_threshold: float = np.deg2rad(15.0)):
        self.position_threshold = float(position_threshold)
        self.yaw_threshold = float(yaw_threshold)
        self._positions: list[np.ndarray] = []
        self._yaws: list[float] = []

    def __len__(self) -> int:
        return len(self._positions)

    def id_for(self, pose: Pose4) -> int:
        if self._positions:
            anchors = np.asarray(self._positions)
            dist = np.linalg.norm(anchors - pose.position, axis=1)
            near = np.flatnonzero(dist <= self.position_threshold)
            for i in near:
                if yaw_gap(self._yaws[i], pose.yaw) <= self.yaw_threshold:
                    return int(i)
        self._positions.append(np.array(pose.position))
        self._yaws.append(pose.yaw)
        return len(self._positions) - 1


class VolumetricMap:
    """Dense ternary voxel grid over an axis-aligned region.

    Single-writer: exactly one integration stream mutates the map, planners
    read :meth:`snapshot` copies. ``states`` is indexed ``[ix, iy, iz]``.
    """

    def __init__(self, origin, resolution: float, dims, states=None, observers=None, frozen=False):
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.resolution = float(resolution)
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        self.dims = np.asarray(dims, dtype=np.int64).reshape(3)
        if np.any(self.dims <= 0):
            raise ValueError("dims must be positive")
        if states is None:
            states = np.full(tuple(self.dims), UNKNOWN, dtype=np.uint8)
        self.states = states
        self.observers: dict[int, set[int]] = observers if observers is not None else {}
        self._frozen = bool(frozen)
        self._occ_tree = None
        self._occ_tree_stamp = -1
        self._write_stamp = 0
        if self._frozen:
            self.states.setflags(write=False)
            self.origin.setflags(write=False)

    # ---- construction -------------------------------------------------

    @classmethod
    def from_aabb(cls, box: Aabb, resolution: float) -> "VolumetricMap":
        dims = np.maximum(np.ceil(box.extents / resolution).astype(np.int64), 1)
        return cls(box.lo, resolution, dims)

    @property
    def frozen(self) -> bool:
        return self._frozen

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def bounds(self) -> Aabb:
        return Aabb(self.origin, self.origin + self.dims * self.resolution)

    # ---- index arithmetic ---------------------------------------------

    def world_to_ijk(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.floor((pts - self.origin) / self.resolution).astype(np.int64)

    def in_bounds_ijk(self, ijk) -> np.ndarray:
        ijk = np.atleast_2d(ijk)
        return np.all((ijk >= 0) & (ijk < self.dims), axis=1)

    def flat(self, ijk) -> np.ndarray:
        ijk = np.atleast_2d(ijk)
        return np.ravel_multi_index((ijk[:, 0], ijk[:, 1], ijk[:, 2]), tuple(self.dims))

    def unflat(self, flat) -> np.ndarray:
        i, j, k = np.unravel_index(np.atleast_1d(flat), tuple(self.dims))
        return np.stack([i, j, k], axis=1)

    def voxel_centers(self, flat) -> np.ndarray:
        return self.origin + (self.unflat(flat) + 0.5) * self.resolution

    def state_at(self, points) -> np.ndarray:
        """Voxel state per query point; points outside the grid read UNKNOWN."""
        ijk = self.world_to_ijk(points)
        ok = self.in_bounds_ijk(ijk)
        out = np.full(ijk.shape[0], UNKNOWN, dtype=np.uint8)
        if np.any(ok):
            out[ok] = self.states[ijk[ok, 0], ijk[ok, 1], ijk[ok, 2]]
        return out

    # ---- ray traversal -------------------------------------------------

    def _traversal_setup(self, origins, targets):
        res = self.resolution
        o = (np.atleast_2d(origins) - self.origin) / res
        g = (np.atleast_2d(targets) - self.origin) / res
        d = g - o
        v = np.floor(o).astype(np.int64)
        term = np.floor(g).astype(np.int64)
        step = np.sign(d).astype(np.int64)
        with np.errstate(divide="ignore", invalid="ignore"):
            tdelta = np.where(d != 0.0, 1.0 / np.abs(d), np.inf)
            lo_cross = (v - o) / d
            hi_cross = (v + 1 - o) / d
            tmax = np.where(step > 0, hi_cross, np.where(step < 0, lo_cross, np.inf))
        tmax = np.where(np.isfinite(tmax), tmax, np.inf)
        return v, term, step, tmax, tdelta

    def _step_rays(self, v, term, step, tmax, tdelta, active):
        """Advance every active ray one voxel; deactivates rays that reach
        their terminal voxel or leave the grid. Returns the updated mask."""
        axis = np.argmin(tmax, axis=1)
        rows = np.arange(v.shape[0])
        adv = active & np.isfinite(tmax[rows, axis])
        v[adv, axis[adv]] += step[adv, axis[adv]]
        tmax[adv, axis[adv]] += tdelta[adv, axis[adv]]
        done = np.all(v == term, axis=1)
        inside = np.all((v >= 0) & (v < self.dims), axis=1)
        return adv & ~done & inside, adv & done

    def integrate_scan(self, sensor_pose: Pose4, hits, viewpoint_id: int, max_range: float | None = None) -> None:
        """Fuse one depth scan taken at ``sensor_pose``.

        Every voxel strictly before a hit becomes free (occupied voxels are
        never downgraded); the hit voxel becomes occupied and records
        ``viewpoint_id``. When ``max_range`` is given, hits at or beyond it
        are treated as pass-through rays that free their full traversal.
        Hits outside the grid simply clip at the boundary.
        """
        if self._frozen:
            raise RuntimeError("cannot integrate into a frozen snapshot")
        hits = np.atleast_2d(np.asarray(hits, dtype=float))
        if hits.size == 0:
            return
        n = hits.shape[0]
        origins = np.broadcast_to(sensor_pose.position, (n, 3))
        if max_range is not None:
            ranges = np.linalg.norm(hits - sensor_pose.position, axis=1)
            passthrough = ranges >= max_range - 1e-6
        else:
            passthrough = np.zeros(n, dtype=bool)

        v, term, step, tmax, tdelta = self._traversal_setup(origins, hits)
        active = np.ones(n, dtype=bool)
        inside0 = np.all((v >= 0) & (v < self.dims), axis=1)
        at_term0 = np.all(v == term, axis=1)
        self._mark_free(v[inside0 & ~at_term0])
        self._mark_free(v[inside0 & at_term0 & passthrough])
        active &= inside0 & ~at_term0
        max_steps = int(self.dims.sum()) + 3
        landed = np.zeros(n, dtype=bool)
        for _ in range(max_steps):
            if not np.any(active):
                break
            active, arrived = self._step_rays(v, term, step, tmax, tdelta, active)
            self._mark_free(v[active])
            self._mark_free(v[arrived & passthrough])
            landed |= arrived
            active &= ~arrived

        hit_rays = landed & ~passthrough
        if np.any(hit_rays):
            ijk = term[hit_rays]
            ok = self.in_bounds_ijk(ijk)
            ijk = ijk[ok]
            if ijk.size:
                self.states[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = OCCUPIED
                for f in np.unique(self.flat(ijk)):
                    self.observers.setdefault(int(f), set()).add(int(viewpoint_id))
        self._write_stamp += 1

    def _mark_free(self, ijk) -> None:
        if ijk.size == 0:
            return
        ijk = ijk[self.in_bounds_ijk(ijk)]
        if ijk.size == 0:
            return
        i, j, k = ijk[:, 0], ijk[:, 1], ijk[:, 2]
        cur = self.states[i, j, k]
        keep = cur != OCCUPIED
        self.states[i[keep], j[keep], k[keep]] = FREE

    def first_occupied(self, origins, targets) -> np.ndarray:
        """Per segment, the flat index of the first occupied voxel strictly
        between the endpoint voxels, or -1. Batched lockstep traversal."""
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        n = origins.shape[0]
        v, term, step, tmax, tdelta = self._traversal_setup(origins, targets)
        found = np.full(n, -1, dtype=np.int64)
        active = ~np.all(v == term, axis=1)
        max_steps = int(self.dims.sum()) + 3
        for _ in range(max_steps):
            if not np.any(active):
                break
            active, _ = self._step_rays(v, term, step, tmax, tdelta, active)
            if not np.any(active):
                break
            idx = np.flatnonzero(active)
            cur = v[idx]
            occ = self.states[cur[:, 0], cur[:, 1], cur[:, 2]] == OCCUPIED
            hit = idx[occ]
            if hit.size:
                found[hit] = self.flat(v[hit])
                active[hit] = False
        return found

    def raycast(self, origin, target):
        """First occupied voxel (flat index) strictly between the endpoints
        of one segment, or None."""
        f = self.first_occupied(np.asarray(origin)[None, :], np.asarray(target)[None, :])[0]
        return None if f < 0 else int(f)

    def segments_blocked(self, origins, targets) -> np.ndarray:
        """Boolean per segment: does an occupied voxel lie strictly between?"""
        return self.first_occupied(origins, targets) >= 0

    def trace_lengths(self, origins, targets):
        """Per segment: (blocked, free_length, unknown_length) along the
        straight path, splitting traversed length by voxel state.

        Lengths cover the full segment when unblocked; blocked segments stop
        accounting at the blocking voxel. The terminal voxel's state bins the
        remaining stub, the origin voxel bins the leading stub.
        """
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        n = origins.shape[0]
        seg_len = np.linalg.norm(targets - origins, axis=1)
        v, term, step, tmax, tdelta = self._traversal_setup(origins, targets)
        free_len = np.zeros(n)
        unk_len = np.zeros(n)
        blocked = np.zeros(n, dtype=bool)
        t_prev = np.zeros(n)
        active = np.ones(n, dtype=bool)
        max_steps = int(self.dims.sum()) + 3
        for _ in range(max_steps):
            exited = active & np.all(v == term, axis=1)
            if np.any(exited):
                self._bin_length(v, exited, (1.0 - t_prev[exited]) * seg_len[exited], free_len, unk_len, blocked)
                active &= ~exited
            if not np.any(active):
                break
            t_next = np.minimum(np.min(tmax, axis=1), 1.0)
            chunk = (t_next - t_prev) * seg_len
            self._bin_length(v, active, chunk[active], free_len, unk_len, blocked)
            t_prev = np.where(active, t_next, t_prev)
            active &= ~blocked
            active, arrived = self._step_rays(v, term, step, tmax, tdelta, active)
            active |= arrived
        return blocked, free_len, unk_len

    def _bin_length(self, v, mask, lengths, free_len, unk_len, blocked) -> None:
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            return
        cur = np.clip(v[idx], 0, self.dims - 1)
        st = self.states[cur[:, 0], cur[:, 1], cur[:, 2]]
        free_like = st != UNKNOWN
        occ = st == OCCUPIED
        free_len[idx[free_like & ~occ]] += lengths[free_like & ~occ]
        unk_len[idx[~free_like]] += lengths[~free_like]
        blocked[idx[occ]] = True

    # ---- coverage ------------------------------------------------------

    def covered_surfaces(self) -> set:
        """Flat indices of occupied voxels seen from >= 2 distinct viewpoints."""
        return {f for f, ids in self.observers.items() if len(ids) >= 2}

    def extract_uncovered(self, predicted: PointCloud) -> PointCloud:
        """Sub-cloud of ``predicted`` outside covered voxels.

        Points in free or unknown voxels (and outside the grid) are kept:
        a coarse prediction may disagree with sparse observations, and only
        confirmed two-view coverage may retire a surface. Normals carry over.
        """
        if len(predicted) == 0:
            return predicted
        covered = self.covered_surfaces()
        if not covered:
            return predicted
        ijk = self.world_to_ijk(predicted.points)
        inside = self.in_bounds_ijk(ijk)
        drop = np.zeros(len(predicted), dtype=bool)
        if np.any(inside):
            flats = self.flat(ijk[inside])
            cov_arr = np.zeros(self.n_voxels, dtype=bool)
            cov_arr[np.fromiter(covered, dtype=np.int64, count=len(covered))] = True
            drop[inside] = cov_arr[flats]
        return predicted.select(~drop)

    # ---- snapshots and derived views ----------------------------------

    def snapshot(self) -> "VolumetricMap":
        """Immutable deep copy; later integrations do not touch it."""
        return VolumetricMap(
            self.origin.copy(),
            self.resolution,
            self.dims.copy(),
            states=self.states.copy(),
            observers={k: set(v) for k, v in self.observers.items()},
            frozen=True,
        )

    def occupied_flats(self) -> np.ndarray:
        return np.flatnonzero(self.states.reshape(-1) == OCCUPIED)

    def occupied_cloud(self) -> PointCloud:
        """Occupied voxel centers as a cloud (the map's surface estimate)."""
        flats = self.occupied_flats()
        if flats.size == 0:
            return PointCloud.empty()
        return PointCloud(self.voxel_centers(flats))

    def occupied_kdtree(self):
        """KD-tree over occupied voxel centers, cached until the next write."""
        if self._occ_tree is None or self._occ_tree_stamp != self._write_stamp:
            flats = self.occupied_flats()
            self._occ_tree = cKDTree(self.voxel_centers(flats)) if flats.size else None
            self._occ_tree_stamp = self._write_stamp
        return self._occ_tree

    def clearance_ok(self, points, clearance: float) -> np.ndarray:
        """True per point when no occupied voxel center lies within ``clearance``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        tree = self.occupied_kdtree()
        if tree is None:
            return np.ones(pts.shape[0], dtype=bool)
        d, _ = tree.query(pts, k=1)
        return d > clearance

    # ---- serialization -------------------------------------------------

    def save(self, path) -> None:
        """Binary container: fixed header, one byte per voxel, observer table."""
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, _VERSION, *self.origin, self.resolution, *self.dims.astype(np.uint32)))
            fh.write(np.ascontiguousarray(self.states, dtype=np.uint8).tobytes())
            keys = sorted(self.observers)
            fh.write(struct.pack("<I", len(keys)))
            for key in keys:
                ids = sorted(self.observers[key])
                fh.write(struct.pack(f"<QI{len(ids)}I", key, len(ids), *ids))

    @classmethod
    def load(cls, path) -> "VolumetricMap":
        with open(path, "rb") as fh:
            raw = fh.read(_HEADER.size)
            if len(raw) < _HEADER.size:
                raise MapFormatError(f"{path}: truncated header")
            magic, version, ox, oy, oz, res, dx, dy, dz = _HEADER.unpack(raw)
            if magic != _MAGIC:
                raise MapFormatError(f"{path}: bad magic {magic!r}")
            if version != _VERSION:
                raise MapFormatError(f"{path}: unsupported version {version}")
            dims = (int(dx), int(dy), int(dz))
            n = dims[0] * dims[1] * dims[2]
            body = fh.read(n)
            if len(body) != n:
                raise MapFormatError(f"{path}: truncated voxel block")
            states = np.frombuffer(body, dtype=np.uint8).reshape(dims).copy()
            (m,) = struct.unpack("<I", fh.read(4))
            observers: dict[int, set[int]] = {}
            for _ in range(m):
                key, cnt = struct.unpack("<QI", fh.read(12))
                ids = struct.unpack(f"<{cnt}I", fh.read(4 * cnt))
                observers[int(key)] = set(int(i) for i in ids)
        return cls((ox, oy, oz), res, dims, states=states, observers=observers)
