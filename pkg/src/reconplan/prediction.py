"""Surface prediction front-end for partially observed targets.

Given the partial surface cloud accumulated so far, a predictor returns a
completed surface estimate, a single target-scale value, and the internal
space: voxels inside the predicted volume that viewpoints must never enter.
The neural completion model itself is out of scope; the predictors here are
geometric baselines plus a loader for externally computed completions, all
behind one contract so the planner does not care which produced the result.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .errors import EmptyInput, InvalidScale, PredictorUnavailable
from .geometry import PointCloud, centroid, resize_to
from .mapping import FREE, VolumetricMap

DEFAULT_COMPLETION_POINTS = 8192  # conditioning size N_C; output is 2x this

GHPR_FLIP_EXPONENT = 2.0
GHPR_SPHERE_INFLATION = 1.5
# convex hulls dominate the cost; visibility is checked on at most this
# many points while the solid-interior fill still sees the full cloud
GHPR_VISIBILITY_CAP = 4096

# 6 face + 8 corner directions for hidden-point-removal view centers
_FACE_DIRS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float
)
_CORNER_DIRS = np.array(
    [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float
) / np.sqrt(3.0)
VIEW_CENTER_DIRS = np.vstack([_FACE_DIRS, _CORNER_DIRS])


@dataclass(frozen=True)
class ScaleEstimate:
    """Per-axis target extent plus additive margins, both in meters."""

    per_axis: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "per_axis", np.asarray(self.per_axis, dtype=float).reshape(3))
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=float).reshape(3))


@dataclass(frozen=True)
class PredictionResult:
    """Completed surface cloud, composed scale, and prohibited interior voxels."""

    predicted_surface: PointCloud
    target_scale: float
    internal_space: frozenset


def preprocess(m_c: PointCloud):
    """Center a cloud on its centroid; returns (centered cloud, centroid).

    Adding the centroid back restores the input exactly, so downstream
    consumers can move between the local and world frames losslessly.
    """
    c = centroid(m_c)
    return m_c.translated(-c), c


def compose_scale(est: ScaleEstimate) -> float:
    """Collapse per-axis extents plus margins into one scale value."""
    total = est.per_axis + est.offsets
    if np.any(total <= 0.0) or not np.all(np.isfinite(total)):
        raise InvalidScale(f"per-axis scale must be positive, got {total}")
    return float(np.max(total))


def chamfer_distance(x: PointCloud, y: PointCloud) -> float:
    """Symmetric averaged squared nearest-neighbor distance between clouds."""
    if len(x) == 0 or len(y) == 0:
        raise EmptyInput("chamfer_distance requires two non-empty clouds")
    d_xy, _ = cKDTree(y.points).query(x.points, k=1)
    d_yx, _ = cKDTree(x.points).query(y.points, k=1)
    return float(np.mean(d_xy**2) + np.mean(d_yx**2))


def ghpr_visible(points: np.ndarray, center, gamma: float = GHPR_FLIP_EXPONENT) -> np.ndarray:
    """Visibility mask of ``points`` from ``center`` by spherical flipping.

    Each point is flipped radially outward around the center; points on the
    convex hull of the flipped set (plus the center itself) are visible.
    """
    q = np.asarray(points, dtype=float) - np.asarray(center, dtype=float)
    norms = np.linalg.norm(q, axis=1)
    radius = norms.max() * 10.0**gamma
    flipped = q + 2.0 * (radius - norms)[:, None] * q / norms[:, None]
    cloud = np.vstack([flipped, np.zeros(3)])
    visible = np.zeros(len(q), dtype=bool)
    try:
        # Qc keeps coplanar points: a point merged into a hull facet lies on
        # the hull surface and still counts as visible.
        hull = ConvexHull(cloud, qhull_options="Qc")
    except QhullError:
        return visible
    idx = hull.vertices[hull.vertices < len(q)]
    visible[idx] = True
    if len(hull.coplanar):
        cop = hull.coplanar[:, 0]
        visible[cop[cop < len(q)]] = True
    return visible


def _enclosed_interior(shell: np.ndarray) -> np.ndarray:
    """Cells of a boolean shell grid not reachable from the grid border.

    6-connected flood fill over the complement; any complement component
    that touches the border is outside, the rest is enclosed interior.
    """
    labels, n = ndimage.label(~shell)
    if n == 0:
        return np.zeros_like(shell)
    border = np.zeros_like(shell)
    border[0, :, :] = border[-1, :, :] = True
    border[:, 0, :] = border[:, -1, :] = True
    border[:, :, 0] = border[:, :, -1] = True
    outside_labels = np.unique(labels[border & ~shell])
    enclosed = ~shell & (labels > 0)
    for lab in outside_labels:
        enclosed &= labels != lab
    return enclosed


def ghpr_internal(m_p: PointCloud, vmap: VolumetricMap) -> frozenset:
    """Prohibited interior voxels of a predicted surface, as flat map indices.

    Combines two constructions: points invisible from every view center on
    the inflated bounding sphere (hidden-point internals), and voxels fully
    enclosed by the rasterized surface shell (solid interior). Degenerate
    clouds without volume yield an empty set.
    """
    if len(m_p) == 0:
        raise EmptyInput("ghpr_internal requires a non-empty cloud")
    pts = m_p.points
    c = pts.mean(axis=0)
    spread = np.linalg.svd(pts - c, compute_uv=False) if len(pts) >= 4 else np.zeros(3)
    if len(pts) < 4 or spread[-1] < 1e-9 * max(spread[0], 1.0):
        return frozenset()
    radius = np.linalg.norm(pts - c, axis=1).max()
    if radius == 0.0:
        return frozenset()
    centers = c + GHPR_SPHERE_INFLATION * radius * VIEW_CENTER_DIRS
    vis_pts = pts
    if len(pts) > GHPR_VISIBILITY_CAP:
        sel = np.unique(np.linspace(0, len(pts) - 1, GHPR_VISIBILITY_CAP).astype(int))
        vis_pts = pts[sel]
    visible_any = np.zeros(len(vis_pts), dtype=bool)
    for center in centers:
        visible_any |= ghpr_visible(vis_pts, center)
        if visible_any.all():
            break
    internal_pts = vis_pts[~visible_any]

    # rasterize the shell into the sub-box around the cloud, one-voxel margin
    ijk = vmap.world_to_ijk(pts)
    lo = np.maximum(ijk.min(axis=0) - 1, 0)
    hi = np.minimum(ijk.max(axis=0) + 1, vmap.dims - 1)
    if np.any(hi < lo):
        return frozenset()
    shape = tuple((hi - lo + 1).astype(int))
    shell = np.zeros(shape, dtype=bool)
    inside = vmap.in_bounds_ijk(ijk)
    local = ijk[inside] - lo
    shell[local[:, 0], local[:, 1], local[:, 2]] = True
    enclosed = _enclosed_interior(shell)

    flats = set()
    enc_local = np.argwhere(enclosed)
    if enc_local.size:
        flats.update(int(f) for f in vmap.flat(enc_local + lo))
    if len(internal_pts):
        pijk = vmap.world_to_ijk(internal_pts)
        pijk = pijk[vmap.in_bounds_ijk(pijk)]
        if pijk.size:
            flats.update(int(f) for f in vmap.flat(pijk))
    return frozenset(flats)


def _bbox_scale(cloud: PointCloud, floor: float) -> float:
    ext = np.maximum(cloud.aabb().extents, floor)
    return compose_scale(ScaleEstimate(ext, np.zeros(3)))


def _censor_known_free(pts: np.ndarray, vmap: VolumetricMap) -> np.ndarray:
    """Drop synthesized points in free voxels or outside the map."""
    if len(pts) == 0:
        return pts
    ijk = vmap.world_to_ijk(pts)
    inb = vmap.in_bounds_ijk(ijk)
    keep = np.zeros(len(pts), dtype=bool)
    sub = ijk[inb]
    keep[inb] = vmap.states[sub[:, 0], sub[:, 1], sub[:, 2]] != FREE
    return pts[keep]


def _assemble(partial_world: PointCloud, extras: PointCloud, n_points: int) -> PointCloud:
    """Concatenate the observed cloud with completion extras at fixed size.

    The observed part is never altered; extras are resized to fill the
    remaining budget (duplicating the observed cloud when there are none).
    """
    base = resize_to(partial_world, n_points) if len(partial_world) > n_points else partial_world
    budget = 2 * n_points - len(base)
    filler = extras if len(extras) else base
    return PointCloud.concat([base, resize_to(filler, budget)])


class SurfacePredictor:
    """Contract: complete a partial surface observation.

    Implementations must be deterministic for a fixed input and
    configuration, and must include the (possibly conditioned) input cloud
    inside ``predicted_surface``.
    """

    def predict(self, partial: PointCloud, vmap: VolumetricMap) -> PredictionResult:
        raise NotImplementedError


@dataclass
class PassthroughPredictor(SurfacePredictor):
    """No-op completion: the observation itself, duplicated to full size.

    Serves as the control arm when measuring what prediction buys.
    """

    n_points: int = DEFAULT_COMPLETION_POINTS
    scale_floor: float = 1e-3
    compute_internal: bool = True

    def predict(self, partial: PointCloud, vmap: VolumetricMap) -> PredictionResult:
        if len(partial) == 0:
            raise EmptyInput("predictor requires a non-empty partial cloud")
        surface = _assemble(partial, PointCloud.empty(), self.n_points)
        internal = ghpr_internal(surface, vmap) if self.compute_internal else frozenset()
        return PredictionResult(surface, _bbox_scale(surface, self.scale_floor), internal)


@dataclass
class GeometricCompletionPredictor(SurfacePredictor):
    """Heuristic completion from building-like symmetry assumptions.

    Constructions on top of the observation: mirror across an estimated
    vertical symmetry plane (the unobserved far side), a closed-shell
    depth hypothesis while the observation is still a single facade, the
    faces of the observed bounding box (a building closes its volume),
    extrusion of the lowest observed ring down to the ground plane, and a
    top cap sampling the convex footprint of the highest ring. Guesses
    landing in voxels the map has confirmed free are discarded, so wrong
    guesses retire as exploration proceeds instead of lingering as
    phantom surfaces. ``observer_hint`` (a position the target was sensed
    from) picks which side of the symmetry plane is unobserved; without
    it the plane runs through the centroid, mirroring only densifies, and
    the depth hypothesis stays silent.
    """

    n_points: int = DEFAULT_COMPLETION_POINTS
    ground_z: float = 0.0
    ring_height: float = 0.4
    sample_step: float = 0.25
    scale_floor: float = 1e-3
    compute_internal: bool = True
    observer_hint: np.ndarray | None = None

    def predict(self, partial: PointCloud, vmap: VolumetricMap) -> PredictionResult:
        if len(partial) == 0:
            raise EmptyInput("predictor requires a non-empty partial cloud")
        base = resize_to(partial, self.n_points) if len(partial) > self.n_points else partial
        pts = base.points
        extras = [
            self._mirror(pts),
            self._depth_hypothesis(pts),
            self._bounding_shell(pts),
            self._extrude_to_ground(pts),
            self._cap_top(pts),
        ]
        extras = [e for e in extras if len(e)]
        extra_pts = np.vstack(extras) if extras else np.empty((0, 3))
        # guesses may only fill unexplored space: contradicting confirmed
        # free voxels would leave phantom surfaces no flight can retire
        extra_cloud = PointCloud(_censor_known_free(extra_pts, vmap))
        surface = _assemble(base, extra_cloud, self.n_points)
        internal = ghpr_internal(surface, vmap) if self.compute_internal else frozenset()
        return PredictionResult(surface, _bbox_scale(surface, self.scale_floor), internal)

    # ---- constructions -------------------------------------------------

    def _mirror(self, pts: np.ndarray) -> np.ndarray:
        c = pts.mean(axis=0)
        xy = pts[:, :2] - c[:2]
        cov = xy.T @ xy
        w, vecs = np.linalg.eigh(cov)
        axis = vecs[:, np.argmax(w)]  # dominant horizontal direction
        normal = np.array([-axis[1], axis[0]])
        s = xy @ normal
        offset = 0.0
        if self.observer_hint is not None:
            to_obs = np.asarray(self.observer_hint, dtype=float)[:2] - c[:2]
            if to_obs @ normal < 0:
                normal = -normal
                s = -s
            # plane sits at the far (low-s) data edge, away from the observer
            offset = np.quantile(s, 0.05)
        mirrored = pts.copy()
        mirrored[:, :2] -= 2.0 * (s - offset)[:, None] * normal[None, :]
        return mirrored

    def _depth_hypothesis(self, pts: np.ndarray) -> np.ndarray:
        """Closed-shell guess behind a near-planar observation.

        A single observed facade carries no depth cue, so the mirror
        collapses onto it and completion would stop at the first wall.
        Assuming a roughly square footprint, this samples the far wall,
        both sides, and a flat top behind the facade; later observations
        grow the depth spread and switch the construction off.
        """
        if self.observer_hint is None:
            return np.empty((0, 3))
        c = pts.mean(axis=0)
        xy = pts[:, :2] - c[:2]
        cov = xy.T @ xy / len(pts)
        w, vecs = np.linalg.eigh(cov)
        width = float(np.sqrt(max(w[1], 0.0)))
        depth_spread = float(np.sqrt(max(w[0], 0.0)))
        if width < 1e-6 or depth_spread > max(0.25 * width, 0.3):
            return np.empty((0, 3))
        axis = vecs[:, 1]
        normal = np.array([-axis[1], axis[0]])
        to_obs = np.asarray(self.observer_hint, dtype=float)[:2] - c[:2]
        if to_obs @ normal < 0:
            normal = -normal
        u = xy @ axis
        s = xy @ normal
        u0, u1 = float(u.min()), float(u.max())
        front = float(np.quantile(s, 0.95))
        depth = max(u1 - u0, 4.0 * self.sample_step)
        back = front - depth
        z1 = float(pts[:, 2].max())
        z_ax = np.arange(self.ground_z, z1 + 1e-9, self.sample_step)
        u_ax = np.arange(u0, u1 + 1e-9, self.sample_step)
        s_ax = np.arange(back, front + 1e-9, self.sample_step)
        if not (len(z_ax) and len(u_ax) and len(s_ax)):
            return np.empty((0, 3))
        faces = []
        gu, gz = np.meshgrid(u_ax, z_ax, indexing="ij")
        faces.append((gu.ravel(), np.full(gu.size, back), gz.ravel()))
        gs, gz = np.meshgrid(s_ax, z_ax, indexing="ij")
        for edge in (u0, u1):
            faces.append((np.full(gs.size, edge), gs.ravel(), gz.ravel()))
        gu, gs = np.meshgrid(u_ax, s_ax, indexing="ij")
        faces.append((gu.ravel(), gs.ravel(), np.full(gu.size, z1)))
        uu = np.concatenate([f[0] for f in faces])
        ss = np.concatenate([f[1] for f in faces])
        zz = np.concatenate([f[2] for f in faces])
        out = np.empty((len(uu), 3))
        out[:, :2] = c[None, :2] + uu[:, None] * axis[None, :] + ss[:, None] * normal[None, :]
        out[:, 2] = zz
        return out

    def _bounding_shell(self, pts: np.ndarray) -> np.ndarray:
        """Sample the faces of the observed bounding box, bottom excluded.

        A building closes its volume, so wherever the envelope has not
        been confirmed empty there is probably surface. Faces standing in
        open air are carved away by later scans; faces coinciding with
        real walls get observed. Either way the claim retires, which is
        what keeps coverage-driven termination honest.
        """
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        ext = hi - lo
        if min(ext[0], ext[1]) < 2.0 * self.sample_step or ext[2] < 2.0 * self.sample_step:
            return np.empty((0, 3))  # no volume yet: facade constructions apply
        step = self.sample_step
        z0 = max(self.ground_z, lo[2])
        xs = np.arange(lo[0], hi[0] + 1e-9, step)
        ys = np.arange(lo[1], hi[1] + 1e-9, step)
        zs = np.arange(z0, hi[2] + 1e-9, step)
        faces = []
        gy, gz = np.meshgrid(ys, zs, indexing="ij")
        for x_edge in (lo[0], hi[0]):
            faces.append(np.column_stack([np.full(gy.size, x_edge), gy.ravel(), gz.ravel()]))
        gx, gz = np.meshgrid(xs, zs, indexing="ij")
        for y_edge in (lo[1], hi[1]):
            faces.append(np.column_stack([gx.ravel(), np.full(gx.size, y_edge), gz.ravel()]))
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        faces.append(np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, hi[2])]))
        return np.vstack(faces)

    def _extrude_to_ground(self, pts: np.ndarray) -> np.ndarray:
        z_min = pts[:, 2].min()
        if z_min <= self.ground_z + self.sample_step:
            return np.empty((0, 3))
        ring = pts[pts[:, 2] <= z_min + self.ring_height]
        levels = np.arange(z_min - self.sample_step, self.ground_z - 1e-9, -self.sample_step)
        if len(levels) == 0 or len(ring) == 0:
            return np.empty((0, 3))
        out = np.repeat(ring, len(levels), axis=0)
        out[:, 2] = np.tile(levels, len(ring))
        return out

    def _cap_top(self, pts: np.ndarray) -> np.ndarray:
        z_max = pts[:, 2].max()
        ring = pts[pts[:, 2] >= z_max - self.ring_height]
        if len(ring) < 3:
            return np.empty((0, 3))
        xy = ring[:, :2]
        try:
            hull = ConvexHull(xy)
        except QhullError:
            return np.empty((0, 3))
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        gx = np.arange(lo[0], hi[0] + 1e-9, self.sample_step)
        gy = np.arange(lo[1], hi[1] + 1e-9, self.sample_step)
        if len(gx) == 0 or len(gy) == 0:
            return np.empty((0, 3))
        gxx, gyy = np.meshgrid(gx, gy, indexing="ij")
        grid = np.stack([gxx.ravel(), gyy.ravel()], axis=1)
        # hull equations give A x + b <= 0 inside
        a, b = hull.equations[:, :2], hull.equations[:, 2]
        inside = np.all(grid @ a.T + b <= 1e-9, axis=1)
        grid = grid[inside]
        if len(grid) == 0:
            return np.empty((0, 3))
        return np.column_stack([grid, np.full(len(grid), z_max)])


@dataclass
class FileBackedPredictor(SurfacePredictor):
    """Load an externally computed completion keyed by mission id.

    Expects ``<mission_id>_pred.ply`` in ``directory`` and an optional
    sidecar ``<mission_id>_pred.json`` carrying ``scale`` and a precomputed
    ``internal_space`` voxel index list.
    """

    directory: Path
    mission_id: str
    scale_floor: float = 1e-3
    compute_internal: bool = True

    def predict(self, partial: PointCloud, vmap: VolumetricMap) -> PredictionResult:
        if len(partial) == 0:
            raise EmptyInput("predictor requires a non-empty partial cloud")
        from .cloud_io import read_ply

        ply = Path(self.directory) / f"{self.mission_id}_pred.ply"
        if not ply.is_file():
            raise PredictorUnavailable(f"no prediction file {ply}")
        try:
            completed = read_ply(ply)
        except Exception as exc:
            raise PredictorUnavailable(f"unreadable prediction file {ply}: {exc}") from exc
        surface = PointCloud.concat([partial, completed])
        scale = None
        internal = None
        sidecar = ply.with_suffix(".json")
        if sidecar.is_file():
            meta = json.loads(sidecar.read_text())
            if "scale" in meta:
                scale = float(meta["scale"])
                if scale <= 0.0:
                    raise InvalidScale(f"sidecar scale must be positive, got {scale}")
            if "internal_space" in meta:
                internal = frozenset(int(i) for i in meta["internal_space"])
        if scale is None:
            scale = _bbox_scale(surface, self.scale_floor)
        if internal is None:
            internal = ghpr_internal(surface, vmap) if self.compute_internal else frozenset()
        return PredictionResult(surface, scale, internal)
