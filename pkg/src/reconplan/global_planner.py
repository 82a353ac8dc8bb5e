"""Global coverage planning: cluster surfaces, sample viewpoints, order them.

The cycle works on a frozen map snapshot: uncovered surface points are
grouped by region growing, each cluster proposes candidate viewpoints in a
fan-shaped cylindrical sector along its mean normal, the best candidate per
cluster is kept, and an open-path asymmetric TSP over movement plus yaw
costs (with a direction-consistency bonus on the first hop) yields the
visit order. The next best view is the first stop of that order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from . import atsp
from .errors import NoFeasibleViewpoint
from .geometry import PointCloud, Pose4, yaw_gap
from .mapping import OCCUPIED, UNKNOWN, SensorModel, VolumetricMap

UNREACHABLE = np.inf


@dataclass
class PlannerParams:
    """Tuning knobs for clustering, sampling, and tour costs."""

    v_max: float = 0.85
    omega: float = 0.5
    beta1: float = 1.0
    beta2: float = 5.0
    r_min: float = 2.0
    r_max: float = 6.0
    fan_half_angle: float = np.deg2rad(45.0)
    cylinder_half_height: float = 1.5
    samples_per_cluster: int = 40
    clearance: float = 0.8
    cluster_distance: float = 1.0
    cluster_normal: float = np.deg2rad(30.0)
    cluster_min_size: int = 10
    unknown_penalty: float = 1.2
    max_view_elevation: float = np.deg2rad(25.0)

    def __post_init__(self):
        positives = (
            self.v_max, self.omega, self.beta1, self.beta2, self.r_min, self.r_max,
            self.fan_half_angle, self.cylinder_half_height, self.samples_per_cluster,
            self.clearance, self.cluster_distance, self.cluster_normal,
            self.cluster_min_size, self.unknown_penalty, self.max_view_elevation,
        )
        if any(p <= 0 for p in positives):
            raise ValueError("planner parameters must be positive")
        if self.r_min >= self.r_max:
            raise ValueError("r_min must be smaller than r_max")
        if self.max_view_elevation >= np.pi / 2:
            raise ValueError("max_view_elevation must stay below vertical")


@dataclass(frozen=True)
class SurfaceCluster:
    """A contiguous patch of uncovered surface with an aggregate orientation."""

    points: PointCloud
    centroid: np.ndarray
    mean_normal: np.ndarray
    id: int


@dataclass(frozen=True)
class Viewpoint:
    """A candidate sensing pose assigned to one cluster."""

    pose: Pose4
    cluster_id: int

    @property
    def position(self) -> np.ndarray:
        return self.pose.position

    @property
    def yaw(self) -> float:
        return self.pose.yaw


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class GlobalPlan:
    """Visit order over [current pose] + viewpoints; order[0] is always 0."""

    order: tuple
    total_cost: float


# ---- clustering --------------------------------------------------------


def cluster_surfaces(uncovered: PointCloud, params: PlannerParams) -> list:
    """Region-growing segmentation by proximity and normal agreement.

    Two points join the same region when one can reach the other through
    neighbor pairs within ``cluster_distance`` whose normals differ by at
    most ``cluster_normal``. Undersized clusters merge into the cluster
    with the nearest centroid. Region labels follow the smallest member
    index, so the segmentation is deterministic.
    """
    if len(uncovered) == 0:
        return []
    if not uncovered.has_normals:
        raise ValueError("cluster_surfaces requires per-point normals")
    pts = uncovered.points
    nrm = uncovered.normals
    n = len(pts)
    pairs = cKDTree(pts).query_pairs(params.cluster_distance, output_type="ndarray")
    if len(pairs):
        agree = np.einsum("ij,ij->i", nrm[pairs[:, 0]], nrm[pairs[:, 1]])
        pairs = pairs[agree >= np.cos(params.cluster_normal)]
    graph = sparse.coo_matrix(
        (np.ones(len(pairs), dtype=bool), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
    )
    n_comp, labels = connected_components(graph, directed=False)
    first = np.full(n_comp, n, dtype=np.int64)
    np.minimum.at(first, labels, np.arange(n))
    remap = np.empty(n_comp, dtype=np.int64)
    remap[np.argsort(first, kind="stable")] = np.arange(n_comp)
    labels = remap[labels]

    groups = [np.flatnonzero(labels == lab) for lab in range(n_comp)]
    groups = _merge_small_clusters(pts, groups, params.cluster_min_size)

    clusters = []
    for cid, idx in enumerate(groups):
        sel = uncovered.select(idx)
        avg = nrm[idx].mean(axis=0)
        norm = np.linalg.norm(avg)
        mean_normal = avg / norm if norm > 1e-9 else nrm[idx[0]].copy()
        clusters.append(SurfaceCluster(sel, pts[idx].mean(axis=0), mean_normal, cid))
    return clusters


def _merge_small_clusters(pts, groups, min_size):
    """Fold undersized groups into the group with the nearest centroid."""
    while len(groups) > 1:
        sizes = [len(g) for g in groups]
        small = [i for i, s in enumerate(sizes) if s < min_size]
        if not small:
            break
        i = min(small, key=lambda k: (sizes[k], k))
        ci = pts[groups[i]].mean(axis=0)
        others = [k for k in range(len(groups)) if k != i]
        j = min(others, key=lambda k: (np.linalg.norm(pts[groups[k]].mean(axis=0) - ci), k))
        merged = np.sort(np.concatenate([groups[i], groups[j]]))
        groups = [g for k, g in enumerate(groups) if k not in (i, j)] + [merged]
    # deterministic presentation order: by first member index
    return sorted(groups, key=lambda g: int(g[0]))


# ---- viewpoint sampling ------------------------------------------------


def _sector_candidates(cluster: SurfaceCluster, params: PlannerParams, rng) -> np.ndarray:
    """Stratified polar grid in the fan-shaped cylinder along the normal.

    Radial and angular strata are paired (every radius ring covers every
    azimuth cell) and each candidate is jittered inside its stratum; the
    height offset is drawn per candidate within the cylinder half-height.

    Steep normals are flattened to ``max_view_elevation`` before sweeping:
    a yaw-only sensor cannot pitch, so approaching a roof or floor along
    its normal would put the surface outside the vertical field of view.
    """
    n = params.samples_per_cluster
    n_phi = max(int(np.floor(np.sqrt(2.0 * n))), 1)
    n_r = max(int(np.ceil(n / n_phi)), 1)
    r_edges = np.linspace(params.r_min, params.r_max, n_r + 1)
    phi_edges = np.linspace(-params.fan_half_angle, params.fan_half_angle, n_phi + 1)
    out = []
    axis = cluster.mean_normal
    cap = np.sin(params.max_view_elevation)
    if abs(axis[2]) > cap:
        horiz = np.hypot(axis[0], axis[1])
        base = axis[:2] / horiz if horiz > 1e-9 else np.array([1.0, 0.0])
        az = float(np.clip(axis[2], -cap, cap))
        scale = np.sqrt(max(1.0 - az * az, 0.0))
        axis = np.array([base[0] * scale, base[1] * scale, az])
    for a in range(n_r):
        for b in range(n_phi):
            if len(out) >= n:
                break
            r = rng.uniform(r_edges[a], r_edges[a + 1])
            phi = rng.uniform(phi_edges[b], phi_edges[b + 1])
            h = rng.uniform(-params.cylinder_half_height, params.cylinder_half_height)
            c, s = np.cos(phi), np.sin(phi)
            direction = np.array(
                [c * axis[0] - s * axis[1], s * axis[0] + c * axis[1], axis[2]]
            )
            out.append(cluster.centroid + r * direction + np.array([0.0, 0.0, h]))
    return np.asarray(out)


def sample_viewpoints(
    cluster: SurfaceCluster,
    vmap: VolumetricMap,
    internal: frozenset,
    params: PlannerParams,
    seed: int = 0,
) -> list:
    """Feasible candidate viewpoints for one cluster, facing its centroid.

    Candidates inside occupied voxels, inside the predicted internal space,
    outside the map, or violating the safety clearance are discarded.
    """
    rng = np.random.default_rng(9173 + 31 * cluster.id + 101 * seed)
    cand = _sector_candidates(cluster, params, rng)
    ijk = vmap.world_to_ijk(cand)
    inside = vmap.in_bounds_ijk(ijk)
    keep = inside.copy()
    if np.any(inside):
        flats = vmap.flat(ijk[inside])
        states = vmap.states.reshape(-1)[flats]
        occupied = states == OCCUPIED
        prohibited = np.fromiter((int(f) in internal for f in flats), dtype=bool, count=len(flats))
        keep[inside] &= ~occupied & ~prohibited
    keep &= vmap.clearance_ok(cand, params.clearance)
    survivors = cand[keep]
    if len(survivors) == 0:
        raise NoFeasibleViewpoint(f"cluster {cluster.id}: no candidate viewpoint survives")
    out = []
    for p in survivors:
        d = cluster.centroid - p
        yaw = float(np.arctan2(d[1], d[0]))
        out.append(Viewpoint(Pose4(p, yaw), cluster.id))
    return out


# ---- visibility --------------------------------------------------------


def frustum_mask(pose: Pose4, points: np.ndarray, sensor: SensorModel) -> np.ndarray:
    """Points inside the yawed field-of-view pyramid and range limit."""
    rel = np.atleast_2d(points) - pose.position
    rng = np.linalg.norm(rel, axis=1)
    cy, sy = np.cos(pose.yaw), np.sin(pose.yaw)
    fwd = rel[:, 0] * cy + rel[:, 1] * sy
    side = -rel[:, 0] * sy + rel[:, 1] * cy
    horiz = np.abs(np.arctan2(side, fwd)) <= sensor.horizontal_fov / 2.0
    vert = np.abs(np.arctan2(rel[:, 2], np.hypot(fwd, side))) <= sensor.vertical_fov / 2.0
    return (rng <= sensor.max_range) & (fwd > 0.0) & horiz & vert


def visibility_ratio(
    v: Viewpoint, s: SurfaceCluster, vmap: VolumetricMap, sensor: SensorModel
) -> float:
    """Fraction of the cluster inside the frustum and not occluded."""
    pts = s.points.points
    mask = frustum_mask(v.pose, pts, sensor)
    if not np.any(mask):
        return 0.0
    targets = pts[mask]
    origins = np.broadcast_to(v.position, targets.shape)
    blocked = vmap.segments_blocked(origins, targets)
    return float((mask.sum() - blocked.sum()) / len(pts))


def select_best_viewpoint(
    candidates,
    cluster: SurfaceCluster,
    vmap: VolumetricMap,
    sensor: SensorModel,
    current: Pose4 | None = None,
):
    """Candidate with the highest visibility ratio.

    Ties fall to the candidate closer to ``current`` (when given), then to
    the lowest index. Returns (viewpoint, ratio).
    """
    if not candidates:
        raise NoFeasibleViewpoint("no candidates to select from")
    best = None
    for idx, cand in enumerate(candidates):
        ratio = visibility_ratio(cand, cluster, vmap, sensor)
        d = float(np.linalg.norm(cand.position - current.position)) if current is not None else 0.0
        key = (-ratio, d, idx)
        if best is None or key < best[0]:
            best = (key, cand, ratio)
    return best[1], best[2]


# ---- path length and pairwise costs ------------------------------------


class PathLengthCache:
    """Shortest traversable path lengths over one map snapshot.

    Straight segments that pass the occlusion test are priced exactly
    (free length plus penalized unknown length). Blocked pairs fall back
    to a Dijkstra search over a coarsened 26-connected voxel graph, built
    once per snapshot and reused across queries. ``inflate`` grows the
    occupied set by a metric radius so routes keep that much clearance.
    """

    COARSE_MAX_CELLS = 28

    def __init__(self, vmap: VolumetricMap, unknown_penalty: float = 1.2, inflate: float = 0.0):
        self.vmap = vmap
        self.penalty = float(unknown_penalty)
        self.inflate = float(inflate)
        self.factor = max(int(np.ceil(np.max(vmap.dims) / self.COARSE_MAX_CELLS)), 1)
        self._graph = None
        self._cdims = None
        self._dist_rows: dict[int, np.ndarray] = {}

    # -- coarse graph ----------------------------------------------------

    def _build_graph(self):
        if self._graph is not None:
            return
        f = self.factor
        d = self.vmap.dims
        cdims = tuple(int(np.ceil(d[i] / f)) for i in range(3))
        occ = self.vmap.states == OCCUPIED
        if self.inflate > 0.0 and occ.any():
            dist = ndimage.distance_transform_edt(~occ, sampling=self.vmap.resolution)
            occ = dist <= self.inflate
        unk = self.vmap.states == UNKNOWN
        pad = [(0, cdims[i] * f - d[i]) for i in range(3)]
        occ = np.pad(occ, pad, constant_values=False)
        unk = np.pad(unk, pad, constant_values=True)
        occ_c = occ.reshape(cdims[0], f, cdims[1], f, cdims[2], f).any(axis=(1, 3, 5))
        unk_frac = unk.reshape(cdims[0], f, cdims[1], f, cdims[2], f).mean(axis=(1, 3, 5))
        node_cost = np.where(unk_frac > 0.5, self.penalty, 1.0)
        node_cost[occ_c] = np.inf
        self._node_cost = node_cost.reshape(-1)

        idx = np.arange(np.prod(cdims)).reshape(cdims)
        rows, cols, vals = [], [], []
        res = self.vmap.resolution * f
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    if (dx, dy, dz) <= (0, 0, 0):
                        continue
                    src = idx[
                        max(0, -dx) : cdims[0] - max(0, dx),
                        max(0, -dy) : cdims[1] - max(0, dy),
                        max(0, -dz) : cdims[2] - max(0, dz),
                    ].ravel()
                    dst = idx[
                        max(0, dx) : cdims[0] + min(0, dx),
                        max(0, dy) : cdims[1] + min(0, dy),
                        max(0, dz) : cdims[2] + min(0, dz),
                    ].ravel()
                    step = res * np.sqrt(dx * dx + dy * dy + dz * dz)
                    w = step * 0.5 * (node_cost.reshape(-1)[src] + node_cost.reshape(-1)[dst])
                    ok = np.isfinite(w)
                    rows.append(src[ok])
                    cols.append(dst[ok])
                    vals.append(w[ok])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        n = int(np.prod(cdims))
        g = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        self._graph = g + g.T
        self._cdims = cdims

    def _coarse_index(self, point) -> int:
        ijk = self.vmap.world_to_ijk(point)[0] // self.factor
        ijk = np.clip(ijk, 0, np.asarray(self._cdims) - 1)
        i = int(np.ravel_multi_index(tuple(ijk), self._cdims))
        if np.isfinite(self._node_cost[i]):
            return i
        # a coarsened cell can absorb a stray occupied voxel even though the
        # query point itself keeps clearance; snap to the nearest free cell
        best = None
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    n = ijk + (dx, dy, dz)
                    if np.any(n < 0) or np.any(n >= self._cdims):
                        continue
                    k = int(np.ravel_multi_index(tuple(n), self._cdims))
                    if np.isfinite(self._node_cost[k]):
                        key = (dx * dx + dy * dy + dz * dz, k)
                        if best is None or key < best:
                            best = key
        return best[1] if best is not None else i

    def _coarse_search(self, a, b):
        self._build_graph()
        ia, ib = self._coarse_index(a), self._coarse_index(b)
        if ia not in self._dist_rows:
            self._dist_rows[ia] = dijkstra(self._graph, indices=ia, return_predecessors=True)
        dist, pred = self._dist_rows[ia]
        return float(dist[ib]), pred, ia, ib

    def _coarse_length(self, a, b) -> float:
        return self._coarse_search(a, b)[0]

    def _cell_center(self, i: int) -> np.ndarray:
        ijk = np.array(np.unravel_index(i, self._cdims), dtype=float)
        return self.vmap.origin + ((ijk + 0.5) * self.factor) * self.vmap.resolution

    # -- queries ---------------------------------------------------------

    def length(self, a, b) -> float:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if np.array_equal(a, b):
            return 0.0
        blocked, free_len, unk_len = self.vmap.trace_lengths(a[None, :], b[None, :])
        if not blocked[0]:
            return float(free_len[0] + self.penalty * unk_len[0])
        return self._coarse_length(a, b)

    def lengths(self, origins, targets) -> np.ndarray:
        origins = np.atleast_2d(origins)
        targets = np.atleast_2d(targets)
        blocked, free_len, unk_len = self.vmap.trace_lengths(origins, targets)
        out = free_len + self.penalty * unk_len
        for i in np.flatnonzero(blocked):
            out[i] = self._coarse_length(origins[i], targets[i])
        same = np.all(origins == targets, axis=1)
        out[same] = 0.0
        return out

    def _direct_ok(self, a, b) -> bool:
        blocked, _, _ = self.vmap.trace_lengths(a[None, :], b[None, :])
        if blocked[0]:
            return False
        if self.inflate <= 0.0:
            return True
        n = max(int(np.ceil(np.linalg.norm(b - a) / self.vmap.resolution)), 1)
        ts = np.linspace(0.0, 1.0, n + 1)
        pts = a[None, :] + ts[:, None] * (b - a)[None, :]
        return bool(np.all(self.vmap.clearance_ok(pts, self.inflate)))

    def route(self, a, b):
        """Waypoints of a traversable route, or None when occupied space
        separates the endpoints. Unblocked pairs route directly."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self._direct_ok(a, b):
            return [a, b]
        length, pred, ia, ib = self._coarse_search(a, b)
        if not np.isfinite(length):
            return None
        chain = [ib]
        while chain[-1] != ia:
            nxt = int(pred[chain[-1]])
            if nxt < 0:
                return None
            chain.append(nxt)
        # endpoints stay exact; interior cells become detour waypoints
        return [a] + [self._cell_center(i) for i in reversed(chain[1:-1])] + [b]


def _path_cache(vmap: VolumetricMap, penalty: float, inflate: float = 0.0) -> PathLengthCache:
    caches = getattr(vmap, "_path_caches", None)
    if caches is None:
        caches = vmap._path_caches = {}
    key = (float(penalty), float(inflate))
    if key not in caches:
        caches[key] = PathLengthCache(vmap, penalty, inflate)
    return caches[key]


def astar_path_length(vmap: VolumetricMap, a, b, unknown_penalty: float = 1.2) -> float:
    """Length of the shortest traversable path between two points.

    Unknown space is traversable at a penalty; occupied space blocks.
    Returns +inf when no route exists through non-occupied voxels.
    """
    return _path_cache(vmap, unknown_penalty).length(a, b)


def astar_route(vmap: VolumetricMap, a, b, unknown_penalty: float = 1.2, inflate: float = 0.0):
    """Waypoints of a traversable route from a to b, endpoints included.

    The straight segment when it is traversable, otherwise the coarse-grid
    detour around occupied space (grown by ``inflate`` meters); None when
    the goal is sealed off.
    """
    return _path_cache(vmap, unknown_penalty, inflate).route(a, b)


def pairwise_cost(vi: Viewpoint, vj: Viewpoint, vmap: VolumetricMap, params: PlannerParams) -> float:
    """Travel-time estimate: path length over speed plus yaw gap over rate."""
    L = astar_path_length(vmap, vi.position, vj.position, params.unknown_penalty)
    return L / params.v_max + yaw_gap(vi.yaw, vj.yaw) / params.omega


def consistency_cost(target_position, current: Pose4, last_dir) -> float:
    """Angle between the motion direction to the target and the previous
    planning cycle's chosen direction; 0 when there is no history yet."""
    if last_dir is None:
        return 0.0
    d = np.asarray(target_position, dtype=float) - current.position
    n = np.linalg.norm(d)
    if n == 0.0:
        return 0.0
    return float(np.arccos(np.clip(d / n @ np.asarray(last_dir, dtype=float), -1.0, 1.0)))


def build_cost_matrix(
    viewpoints,
    current: Pose4,
    last_dir,
    vmap: VolumetricMap,
    params: PlannerParams,
) -> CostMatrix:
    """Open-tour cost matrix: row/col 0 is the current pose.

    Diagonal and column 0 are zero; the first hop adds the weighted
    consistency term so successive plans keep a stable direction.
    """
    if not viewpoints:
        raise ValueError("need at least one viewpoint")
    n = len(viewpoints) + 1
    cache = _path_cache(vmap, params.unknown_penalty)
    entries = np.zeros((n, n))
    positions = np.array([v.position for v in viewpoints])
    for k in range(1, n):
        vk = viewpoints[k - 1]
        others = [h for h in range(1, n) if h != k]
        if others:
            L = cache.lengths(
                np.broadcast_to(vk.position, (len(others), 3)), positions[[h - 1 for h in others]]
            )
            for L_kh, h in zip(L, others):
                vh = viewpoints[h - 1]
                entries[k, h] = L_kh / params.v_max + yaw_gap(vk.yaw, vh.yaw) / params.omega
    L0 = cache.lengths(np.broadcast_to(current.position, (n - 1, 3)), positions)
    for h in range(1, n):
        vh = viewpoints[h - 1]
        move = L0[h - 1] / params.v_max + yaw_gap(current.yaw, vh.yaw) / params.omega
        entries[0, h] = params.beta1 * move + params.beta2 * consistency_cost(
            vh.position, current, last_dir
        )
    return CostMatrix(entries)


def solve_atsp(matrix) -> GlobalPlan:
    """Order the viewpoints by solving the open-path ATSP from node 0."""
    entries = matrix.entries if isinstance(matrix, CostMatrix) else np.asarray(matrix, dtype=float)
    total, order = atsp.solve(entries)
    return GlobalPlan(tuple(int(i) for i in order), float(total))


# ---- exports -----------------------------------------------------------


def plan_to_csv(plan: GlobalPlan, viewpoints, current: Pose4, path, matrix=None) -> None:
    """Rows of (index, x, y, z, yaw, cumulative_cost) along the visit order.

    With ``matrix`` the cumulative column carries the tour cost actually
    optimized; without it, straight-line travel distance.
    """
    poses = [current] + [v.pose for v in viewpoints]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y", "z", "yaw", "cumulative_cost"])
        cum = 0.0
        prev = None
        for i in plan.order:
            pose = poses[i]
            if prev is not None:
                if matrix is not None:
                    cum += float(matrix.entries[prev, i])
                else:
                    cum += float(np.linalg.norm(pose.position - poses[prev].position))
            w.writerow([i, *(f"{c:.6f}" for c in pose.position), f"{pose.yaw:.6f}", f"{cum:.6f}"])
            prev = i


def plan_to_ply(plan: GlobalPlan, viewpoints, current: Pose4, path) -> None:
    from .cloud_io import write_polyline_ply

    poses = [current] + [v.pose for v in viewpoints]
    pts = np.array([poses[i].position for i in plan.order])
    write_polyline_ply(pts, path)
