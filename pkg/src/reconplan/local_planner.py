"""Local path refinement between the current pose and the next best view.

The covered segment is broken into triangulation units: two consecutive
viewpoints plus the sub-cluster they observe together. Candidate viewpoints
for each interior layer are sampled from the fans of the two neighboring
sub-clusters, and a layered shortest-path search picks the chain that
balances stereo reconstruction quality against movement time.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from scipy.cluster.vq import kmeans2

from .errors import DegenerateGeometry, LayerInfeasible, LocalPlanInfeasible, NoFeasibleViewpoint
from .geometry import PointCloud, Pose4
from .global_planner import (
    PlannerParams,
    SurfaceCluster,
    Viewpoint,
    pairwise_cost,
    sample_viewpoints,
    visibility_ratio,
)
from .mapping import SensorModel, VolumetricMap

QUALITY_FLOOR = 1e-6


@dataclass
class LocalParams:
    """Weights and sizes for triangulation-quality path refinement."""

    alpha1: float = 0.8
    epsilon_d: float = np.deg2rad(22.5)
    kappa: float = 0.2
    subcluster_size: int = 30
    candidates_per_layer: int = 8

    def __post_init__(self):
        if not 0.0 <= self.alpha1 <= 1.0:
            raise ValueError("alpha1 must lie in [0, 1]")
        if not 0.0 < self.epsilon_d < np.pi / 2.0:
            raise ValueError("epsilon_d must lie in (0, pi/2)")
        if self.kappa <= 0.0:
            raise ValueError("kappa must be positive")
        if self.subcluster_size < 1 or self.candidates_per_layer < 1:
            raise ValueError("sizes must be at least 1")


@dataclass(frozen=True)
class TriangulationUnit:
    """Two viewpoints and the sub-cluster surface they observe together."""

    v1: Viewpoint
    v2: Viewpoint
    surface: SurfaceCluster


@dataclass(frozen=True)
class LocalGraph:
    """Layered candidate sets with the edge pricing between them.

    ``layers[0]`` and ``layers[-1]`` are singletons anchored at the current
    pose and the next best view; ``edge_cost(k, vi, vj)`` prices an edge
    from layer k to layer k+1 over the k-th sub-cluster.
    """

    layers: tuple
    clusters: tuple
    edge_cost: object


@dataclass(frozen=True)
class LocalPath:
    """One viewpoint per layer; edge_costs[k] is the price of arriving at
    viewpoints[k] (zero for the first entry)."""

    viewpoints: tuple
    total_cost: float
    edge_costs: tuple


# ---- sub-cluster decomposition -----------------------------------------


def subdivide_cluster(
    cluster: SurfaceCluster,
    current_position,
    nbv_position,
    params: LocalParams,
    seed: int = 0,
) -> list:
    """Split a cluster into roughly equal parts ordered along the segment.

    Positions are partitioned by k-means with k = ceil(n / target size);
    the parts are sorted by the projection of their centroids onto the
    current-to-target direction, so consecutive layers sweep the surface
    in travel order.
    """
    pts = cluster.points.points
    n = len(pts)
    if n == 0:
        raise ValueError("cannot subdivide an empty cluster")
    k = int(np.ceil(n / params.subcluster_size))
    if k <= 1:
        return [cluster]
    _, labels = kmeans2(pts, k, minit="++", seed=np.random.default_rng(seed))
    groups = [np.flatnonzero(labels == lab) for lab in range(k)]
    groups = [g for g in groups if len(g)]

    direction = np.asarray(nbv_position, dtype=float) - np.asarray(current_position, dtype=float)
    norm = np.linalg.norm(direction)
    if norm > 0.0:
        direction = direction / norm
    projections = [float(pts[g].mean(axis=0) @ direction) for g in groups]
    order = sorted(range(len(groups)), key=lambda i: (projections[i], int(groups[i][0])))

    out = []
    for cid, gi in enumerate(order):
        idx = groups[gi]
        sel = cluster.points.select(idx)
        if sel.has_normals:
            avg = sel.normals.mean(axis=0)
            nn = np.linalg.norm(avg)
            mean_normal = avg / nn if nn > 1e-9 else cluster.mean_normal
        else:
            mean_normal = cluster.mean_normal
        out.append(SurfaceCluster(sel, pts[idx].mean(axis=0), mean_normal, cid))
    return out


def _merge_neighbors(cls_prev, cls_next, layer_id: int) -> SurfaceCluster:
    """Pseudo-cluster pooling the two neighbors; its fan leans into the
    overlap of theirs."""
    present = [c for c in (cls_prev, cls_next) if c is not None]
    if not present:
        raise ValueError("a layer needs at least one neighboring sub-cluster")
    cloud = PointCloud.concat([c.points for c in present])
    avg = np.mean([c.mean_normal for c in present], axis=0)
    norm = np.linalg.norm(avg)
    mean_normal = avg / norm if norm > 1e-9 else present[0].mean_normal
    return SurfaceCluster(cloud, cloud.points.mean(axis=0), mean_normal, layer_id)


def sample_layer(
    cls_prev,
    cls_next,
    vmap: VolumetricMap,
    internal: frozenset,
    params: LocalParams,
    planner_params: PlannerParams,
    seed: int = 0,
) -> list:
    """Feasible candidates for one interior layer.

    The sector is taken around the pooled neighbors, so candidates favor
    poses that can serve both sub-clusters; the feasibility filter is the
    same one used for global sampling.
    """
    if cls_prev is None and cls_next is None:
        raise ValueError("a layer needs at least one neighboring sub-cluster")
    layer_id = (cls_next if cls_next is not None else cls_prev).id
    merged = _merge_neighbors(cls_prev, cls_next, layer_id)
    sparams = replace(planner_params, samples_per_cluster=params.candidates_per_layer)
    try:
        return sample_viewpoints(merged, vmap, internal, sparams, seed=seed)
    except NoFeasibleViewpoint as exc:
        raise LayerInfeasible(str(exc)) from exc


# ---- triangulation-unit scoring ----------------------------------------


def s_vis(v1: Viewpoint, v2: Viewpoint, s: SurfaceCluster, vmap, sensor) -> float:
    """Mean of the two per-viewpoint visibility ratios."""
    return (visibility_ratio(v1, s, vmap, sensor) + visibility_ratio(v2, s, vmap, sensor)) / 2.0


def s_dis(v1: Viewpoint, v2: Viewpoint, s: SurfaceCluster) -> float:
    """Distance balance: near/far ratio of the two centroid distances."""
    d1 = float(np.linalg.norm(s.centroid - v1.position))
    d2 = float(np.linalg.norm(s.centroid - v2.position))
    if d1 == 0.0 or d2 == 0.0:
        raise DegenerateGeometry("viewpoint coincides with the surface centroid")
    return min(d1, d2) / max(d1, d2)


def _angle(a, b) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    return float(np.arccos(np.clip(a @ b / (na * nb), -1.0, 1.0)))


def s_ang(v1: Viewpoint, v2: Viewpoint, s: SurfaceCluster, params: LocalParams) -> float:
    """Gaussian preference for the desired triangulation angle.

    The argument combines the parallax between the two sight lines with
    the asymmetry of their inclinations to the surface normal; both the
    desired angle and the width are radian-scale constants.
    """
    vec1 = s.centroid - v1.position
    vec2 = s.centroid - v2.position
    if np.linalg.norm(vec1) == 0.0 or np.linalg.norm(vec2) == 0.0:
        raise DegenerateGeometry("zero-length sight line")
    eps = _angle(vec1, vec2)
    eps1 = _angle(s.mean_normal, vec1)
    eps2 = _angle(s.mean_normal, vec2)
    arg = (eps - params.epsilon_d + eps1 - eps2) / params.kappa
    return float(np.exp(-arg * arg))


def quality(
    v1: Viewpoint,
    v2: Viewpoint,
    s: SurfaceCluster,
    vmap: VolumetricMap,
    sensor: SensorModel,
    params: LocalParams,
) -> float:
    """Stereo reconstruction quality of one triangulation unit."""
    return s_vis(v1, v2, s, vmap, sensor) * s_dis(v1, v2, s) * s_ang(v1, v2, s, params)


def local_cost(
    v1: Viewpoint,
    v2: Viewpoint,
    s,
    vmap: VolumetricMap,
    params: LocalParams,
    planner_params: PlannerParams,
    sensor: SensorModel | None = None,
) -> float:
    """Edge price: inverse quality blended with movement time.

    The quality floor keeps the price finite on hopeless units so the
    graph stays connected; such edges lose to any reasonable alternative.
    With no sub-cluster (degenerate direct hop) only movement counts.
    """
    move = pairwise_cost(v1, v2, vmap, planner_params)
    if s is None:
        return move
    sensor = sensor if sensor is not None else SensorModel()
    q = quality(v1, v2, s, vmap, sensor, params)
    c_mvs = 1.0 / max(q, QUALITY_FLOOR)
    return params.alpha1 * c_mvs + (1.0 - params.alpha1) * move


# ---- layered search ----------------------------------------------------


def build_local_graph(
    current: Pose4,
    nbv: Viewpoint,
    subclusters,
    vmap: VolumetricMap,
    internal: frozenset,
    params: LocalParams,
    planner_params: PlannerParams,
    sensor: SensorModel | None = None,
    seed: int = 0,
) -> LocalGraph:
    """Layer stack for the segment: anchored singletons at both ends, one
    sampled layer between every pair of consecutive sub-clusters."""
    sensor = sensor if sensor is not None else SensorModel()
    subclusters = list(subclusters)
    layers = [(Viewpoint(current, -1),)]
    for k in range(1, len(subclusters)):
        cands = sample_layer(
            subclusters[k - 1], subclusters[k], vmap, internal, params, planner_params, seed
        )
        layers.append(tuple(cands))
    layers.append((nbv,))
    clusters = tuple(subclusters)

    def edge_cost(k, vi, vj):
        s = clusters[k] if k < len(clusters) else None
        return local_cost(vi, vj, s, vmap, params, planner_params, sensor)

    return LocalGraph(tuple(layers), clusters, edge_cost)


def search_local_path(graph: LocalGraph) -> LocalPath:
    """Minimum-cost chain through the layers, one viewpoint per layer.

    Forward dynamic programming over (cost, index chain) pairs; comparing
    the chain on exact cost ties makes the lexicographically smallest
    optimal chain win, so results are reproducible across runs.
    """
    layers = graph.layers
    if any(len(layer) == 0 for layer in layers):
        raise LocalPlanInfeasible("empty candidate layer")
    # assemble the edge-cost tables up front in index order
    tables = []
    for k in range(len(layers) - 1):
        t = np.empty((len(layers[k]), len(layers[k + 1])))
        for i, vi in enumerate(layers[k]):
            for j, vj in enumerate(layers[k + 1]):
                t[i, j] = graph.edge_cost(k, vi, vj)
        tables.append(t)

    states = [(0.0, (0,))]
    for k, table in enumerate(tables):
        nxt = []
        for j in range(len(layers[k + 1])):
            best = None
            for i, (cost, chain) in enumerate(states):
                cand = (cost + float(table[i, j]), chain + (j,))
                if best is None or cand < best:
                    best = cand
            nxt.append(best)
        states = nxt
    total, chain = states[0]
    if not np.isfinite(total):
        raise LocalPlanInfeasible("no finite-cost chain through the layers")
    viewpoints = tuple(layers[k][c] for k, c in enumerate(chain))
    edge_costs = (0.0,) + tuple(
        float(tables[k][chain[k], chain[k + 1]]) for k in range(len(tables))
    )
    return LocalPath(viewpoints, float(total), edge_costs)


def plan_local_path(
    current: Pose4,
    nbv: Viewpoint,
    cluster: SurfaceCluster,
    vmap: VolumetricMap,
    internal: frozenset,
    params: LocalParams,
    planner_params: PlannerParams,
    sensor: SensorModel | None = None,
    seed: int = 0,
) -> LocalPath:
    """Refine the hop to value stereo pairs; fall back to the direct
    segment when a layer cannot be populated or no finite chain exists."""
    sensor = sensor if sensor is not None else SensorModel()
    try:
        subs = subdivide_cluster(cluster, current.position, nbv.position, params, seed=seed)
        graph = build_local_graph(
            current, nbv, subs, vmap, internal, params, planner_params, sensor, seed
        )
        return search_local_path(graph)
    except (LayerInfeasible, LocalPlanInfeasible):
        start = Viewpoint(current, -1)
        move = pairwise_cost(start, nbv, vmap, planner_params)
        return LocalPath((start, nbv), float(move), (0.0, float(move)))


def path_to_csv(path: LocalPath, out) -> None:
    """Rows of (layer, x, y, z, yaw, edge_cost) along the refined chain."""
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "x", "y", "z", "yaw", "edge_cost"])
        for k, (vp, ec) in enumerate(zip(path.viewpoints, path.edge_costs)):
            w.writerow(
                [k, *(f"{c:.6f}" for c in vp.position), f"{vp.yaw:.6f}", f"{ec:.6f}"]
            )


def units_of(path: LocalPath, clusters) -> list:
    """Triangulation units realized by a path over its sub-clusters."""
    return [
        TriangulationUnit(path.viewpoints[k], path.viewpoints[k + 1], clusters[k])
        for k in range(min(len(clusters), len(path.viewpoints) - 1))
    ]
