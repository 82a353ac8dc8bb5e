"""Global planner tests: clustering, sampling, visibility, costs, tours."""

import csv

import numpy as np
import pytest

from oracles import cluster_components, first_occupied_oracle, frustum_contains
from reconplan.errors import NoFeasibleViewpoint
from reconplan.geometry import PointCloud, Pose4, yaw_gap
from reconplan.global_planner import (
    CostMatrix,
    GlobalPlan,
    PlannerParams,
    SurfaceCluster,
    Viewpoint,
    astar_path_length,
    astar_route,
    build_cost_matrix,
    cluster_surfaces,
    consistency_cost,
    frustum_mask,
    pairwise_cost,
    plan_to_csv,
    plan_to_ply,
    sample_viewpoints,
    select_best_viewpoint,
    solve_atsp,
    visibility_ratio,
    _sector_candidates,
)
from reconplan.mapping import FREE, OCCUPIED, UNKNOWN, SensorModel, VolumetricMap


def plane_cloud(z, n=8, spacing=0.5, normal=(0.0, 0.0, 1.0), origin=(0.0, 0.0)):
    g = np.arange(n) * spacing
    gx, gy = np.meshgrid(g + origin[0], g + origin[1], indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, float(z))], axis=1)
    normals = np.tile(np.asarray(normal, dtype=float), (len(pts), 1))
    return PointCloud(pts, normals=normals)


def free_map(dims=(32, 32, 32), resolution=0.5):
    m = VolumetricMap((0.0, 0.0, 0.0), resolution, dims)
    m.states[:] = FREE
    return m


def make_cluster(points, normal, cid=0):
    pts = np.atleast_2d(points)
    nrm = np.asarray(normal, dtype=float)
    return SurfaceCluster(
        PointCloud(pts), pts.mean(axis=0), nrm / np.linalg.norm(nrm), cid
    )


class TestParams:
    def test_defaults(self):
        p = PlannerParams()
        assert p.v_max == 0.85 and p.omega == 0.5
        assert p.beta1 == 1.0 and p.beta2 == 5.0
        assert (p.r_min, p.r_max) == (2.0, 6.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            PlannerParams(v_max=0.0)
        with pytest.raises(ValueError):
            PlannerParams(r_min=6.0, r_max=2.0)


class TestClustering:
    def test_two_parallel_planes(self):
        cloud = PointCloud.concat([plane_cloud(0.0), plane_cloud(5.0)])
        clusters = cluster_surfaces(cloud, PlannerParams())
        assert len(clusters) == 2
        got = sorted(
            (frozenset(map(tuple, c.points.points)) for c in clusters), key=sorted
        )
        ref_groups = cluster_components(
            cloud.points, cloud.normals, 1.0, np.deg2rad(30.0)
        )
        ref = sorted(
            (frozenset(map(tuple, cloud.points[g])) for g in ref_groups), key=sorted
        )
        assert got == ref

    def test_single_plane(self):
        cloud = plane_cloud(1.0)
        clusters = cluster_surfaces(cloud, PlannerParams())
        assert len(clusters) == 1
        assert len(clusters[0].points) == len(cloud)
        assert np.allclose(clusters[0].mean_normal, [0.0, 0.0, 1.0])

    def test_opposite_normals_split(self):
        up = plane_cloud(2.0, normal=(0.0, 0.0, 1.0))
        down = plane_cloud(2.05, normal=(0.0, 0.0, -1.0))
        clusters = cluster_surfaces(PointCloud.concat([up, down]), PlannerParams())
        assert len(clusters) == 2
        normals = sorted(float(c.mean_normal[2]) for c in clusters)
        assert normals[0] == pytest.approx(-1.0) and normals[1] == pytest.approx(1.0)

    def test_matches_component_oracle_random(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0.0, 6.0, size=(150, 3))
        nrm = rng.normal(size=(150, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        params = PlannerParams(cluster_min_size=1)  # disable merging for the oracle
        clusters = cluster_surfaces(PointCloud(pts, normals=nrm), params)
        got = sorted(
            (frozenset(map(tuple, c.points.points)) for c in clusters), key=sorted
        )
        ref_groups = cluster_components(pts, nrm, params.cluster_distance, params.cluster_normal)
        ref = sorted((frozenset(map(tuple, pts[g])) for g in ref_groups), key=sorted)
        assert got == ref

    def test_small_cluster_merged(self):
        big = plane_cloud(0.0)
        stray = PointCloud(
            np.array([[1.0, 1.0, 3.0], [1.2, 1.0, 3.0]]),
            normals=np.tile([0.0, 0.0, 1.0], (2, 1)),
        )
        clusters = cluster_surfaces(PointCloud.concat([big, stray]), PlannerParams())
        assert len(clusters) == 1
        assert len(clusters[0].points) == len(big) + 2

    def test_empty_input(self):
        assert cluster_surfaces(PointCloud.empty(), PlannerParams()) == []

    def test_missing_normals_rejected(self):
        with pytest.raises(ValueError):
            cluster_surfaces(PointCloud(np.zeros((3, 3))), PlannerParams())

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(0.0, 5.0, size=(80, 3))
        nrm = rng.normal(size=(80, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        cloud = PointCloud(pts, normals=nrm)
        a = cluster_surfaces(cloud, PlannerParams())
        b = cluster_surfaces(cloud, PlannerParams())
        assert len(a) == len(b)
        for ca, cb in zip(a, b):
            assert np.array_equal(ca.points.points, cb.points.points)
            assert ca.id == cb.id


class TestSampling:
    def test_normal_x_candidates_ahead_facing_back(self):
        vmap = VolumetricMap((-8.0, -8.0, -8.0), 0.5, (32, 32, 32))
        cluster = make_cluster(np.array([[0.0, 0.0, 0.0]]), (1.0, 0.0, 0.0))
        params = PlannerParams(r_max=5.0)
        vps = sample_viewpoints(cluster, vmap, frozenset(), params)
        assert vps
        for vp in vps:
            assert vp.position[0] > 0.0
            to_centroid = cluster.centroid - vp.position
            bearing = np.arctan2(to_centroid[1], to_centroid[0])
            assert yaw_gap(vp.yaw, bearing) < 1e-9
            assert vp.cluster_id == cluster.id

    def test_radius_and_fan_respected(self):
        vmap = VolumetricMap((-8.0, -8.0, -8.0), 0.5, (32, 32, 32))
        cluster = make_cluster(np.array([[0.0, 0.0, 0.0]]), (1.0, 0.0, 0.0))
        params = PlannerParams(r_max=5.0)
        for vp in sample_viewpoints(cluster, vmap, frozenset(), params):
            horiz = vp.position - np.array([0.0, 0.0, vp.position[2]])
            r = np.linalg.norm(vp.position[:2])
            assert params.r_min - 1e-9 <= r <= params.r_max + 1e-9
            phi = np.arctan2(vp.position[1], vp.position[0])
            assert abs(phi) <= params.fan_half_angle + 1e-9
            assert abs(vp.position[2]) <= params.cylinder_half_height + 1e-9
            del horiz

    def test_internal_space_rejects(self):
        vmap = VolumetricMap((-8.0, -8.0, -8.0), 0.5, (32, 32, 32))
        cluster = make_cluster(np.array([[0.0, 0.0, 0.0]]), (1.0, 0.0, 0.0))
        params = PlannerParams(r_max=5.0)
        base = sample_viewpoints(cluster, vmap, frozenset(), params)
        victim = base[0]
        flat = int(vmap.flat(vmap.world_to_ijk(victim.position))[0])
        survivors = sample_viewpoints(cluster, vmap, frozenset({flat}), params)
        positions = {tuple(v.position) for v in survivors}
        assert tuple(victim.position) not in positions
        assert len(survivors) < len(base)

    def test_feasibility_matches_oracle_with_wall(self):
        vmap = VolumetricMap((-8.0, -8.0, -8.0), 0.5, (32, 32, 32))
        # wall slab across part of the fan
        vmap.states[22:26, :, :] = OCCUPIED
        cluster = make_cluster(np.array([[0.0, 0.0, 0.0]]), (1.0, 0.0, 0.0))
        params = PlannerParams(r_max=5.0)
        internal = frozenset()
        rng = np.random.default_rng(9173 + 31 * cluster.id)
        cand = _sector_candidates(cluster, params, rng)
        occ_centers = vmap.voxel_centers(vmap.occupied_flats())
        expected = []
        for p in cand:
            ijk = vmap.world_to_ijk(p)[0]
            if np.any(ijk < 0) or np.any(ijk >= vmap.dims):
                continue
            if vmap.states[tuple(ijk)] == OCCUPIED:
                continue
            if int(vmap.flat(np.array([ijk]))[0]) in internal:
                continue
            if np.min(np.linalg.norm(occ_centers - p, axis=1)) <= params.clearance:
                continue
            expected.append(tuple(p))
        got = sample_viewpoints(cluster, vmap, internal, params)
        assert sorted(tuple(v.position) for v in got) == sorted(expected)

    def test_all_rejected_raises(self):
        vmap = VolumetricMap((-8.0, -8.0, -8.0), 0.5, (32, 32, 32))
        vmap.states[:] = OCCUPIED
        cluster = make_cluster(np.array([[0.0, 0.0, 0.0]]), (1.0, 0.0, 0.0))
        with pytest.raises(NoFeasibleViewpoint):
            sample_viewpoints(cluster, vmap, frozenset(), PlannerParams(r_max=5.0))

    def test_deterministic_per_seed(self):
        vmap = VolumetricMap((-8.0, -8.0, -8.0), 0.5, (32, 32, 32))
        cluster = make_cluster(np.array([[0.0, 0.0, 0.0]]), (1.0, 0.0, 0.0))
        p = PlannerParams(r_max=5.0)
        a = sample_viewpoints(cluster, vmap, frozenset(), p)
        b = sample_viewpoints(cluster, vmap, frozenset(), p)
        c = sample_viewpoints(cluster, vmap, frozenset(), p, seed=1)
        assert [tuple(v.position) for v in a] == [tuple(v.position) for v in b]
        assert [tuple(v.position) for v in a] != [tuple(v.position) for v in c]

    def test_vertical_normal_flattened(self):
        # a yaw-only sensor cannot look straight down, so fans over flat
        # tops must spread sideways instead of stacking above the centroid
        vmap = VolumetricMap((-10.0, -10.0, 0.0), 0.5, (40, 40, 24))
        grid = np.linspace(-1.0, 1.0, 5)
        pts = np.array([[x, y, 3.0] for x in grid for y in grid])
        cluster = make_cluster(pts, (0.0, 0.0, 1.0))
        params = PlannerParams(r_max=5.0)
        vps = sample_viewpoints(cluster, vmap, frozenset(), params)
        min_horiz = params.r_min * np.cos(params.max_view_elevation)
        for vp in vps:
            offset = vp.position - cluster.centroid
            assert np.linalg.norm(offset[:2]) >= min_horiz - 1e-9
        ratios = [visibility_ratio(vp, cluster, vmap, SensorModel()) for vp in vps]
        assert max(ratios) > 0.5


class TestVisibility:
    def test_all_in_frustum_empty_map(self):
        vmap = VolumetricMap((0.0, 0.0, 0.0), 0.5, (32, 32, 32))
        pts = np.array([[6.0, y, 3.0] for y in np.linspace(5.0, 7.0, 20)])
        cluster = make_cluster(pts, (-1.0, 0.0, 0.0))
        vp = Viewpoint(Pose4((2.0, 6.0, 3.0), 0.0), 0)
        assert visibility_ratio(vp, cluster, vmap, SensorModel()) == 1.0

    def test_facing_away_zero(self):
        vmap = free_map()
        pts = np.array([[6.0, 6.0, 3.0]])
        cluster = make_cluster(pts, (-1.0, 0.0, 0.0))
        vp = Viewpoint(Pose4((2.0, 6.0, 3.0), np.pi), 0)
        assert visibility_ratio(vp, cluster, vmap, SensorModel()) == 0.0

    def test_out_of_range_invisible(self):
        vmap = free_map()
        cluster = make_cluster(np.array([[11.0, 6.0, 3.0]]), (-1.0, 0.0, 0.0))
        vp = Viewpoint(Pose4((2.0, 6.0, 3.0), 0.0), 0)
        assert visibility_ratio(vp, cluster, vmap, SensorModel(max_range=8.0)) == 0.0

    def test_frustum_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        sensor = SensorModel()
        pose = Pose4(rng.uniform(2.0, 4.0, 3), rng.uniform(-np.pi, np.pi))
        pts = rng.uniform(-2.0, 10.0, size=(300, 3))
        got = frustum_mask(pose, pts, sensor)
        for i, p in enumerate(pts):
            ref = frustum_contains(
                pose.position, pose.yaw, p,
                sensor.horizontal_fov, sensor.vertical_fov, sensor.max_range,
            )
            assert got[i] == ref

    def test_occlusion_matches_per_point_oracle(self):
        vmap = free_map(dims=(24, 24, 24), resolution=0.5)
        vmap.states[12, 8:16, 2:10] = OCCUPIED  # occluder wall at x in [6.0, 6.5)
        pts = np.array([[8.3, y, 2.6] for y in np.linspace(1.3, 10.7, 25)])
        cluster = make_cluster(pts, (-1.0, 0.0, 0.0))
        vp = Viewpoint(Pose4((2.2, 6.1, 2.7), 0.0), 0)
        sensor = SensorModel(max_range=12.0)
        got = visibility_ratio(vp, cluster, vmap, sensor)
        count = 0
        for p in pts:
            if not frustum_contains(
                vp.position, vp.yaw, p,
                sensor.horizontal_fov, sensor.vertical_fov, sensor.max_range,
            ):
                continue
            hit = first_occupied_oracle(
                vmap.states, vmap.dims, vp.position, p, vmap.origin, vmap.resolution
            )
            if hit is None:
                count += 1
        assert got == pytest.approx(count / len(pts), abs=1e-12)
        assert 0.0 < got < 1.0  # the occluder really hides part of the cluster

    def test_ratio_monotone_under_occlusion(self):
        vmap = free_map(dims=(24, 24, 24), resolution=0.5)
        pts = np.array([[8.0, y, 3.0] for y in np.linspace(4.0, 8.0, 9)])
        cluster = make_cluster(pts, (-1.0, 0.0, 0.0))
        vp = Viewpoint(Pose4((2.0, 6.0, 3.0), 0.0), 0)
        sensor = SensorModel(max_range=10.0)
        before = visibility_ratio(vp, cluster, vmap, sensor)
        vmap.states[10, 11:13, 6] = OCCUPIED
        after = visibility_ratio(vp, cluster, vmap, sensor)
        vmap.states[10, 8:15, 5:8] = OCCUPIED
        final = visibility_ratio(vp, cluster, vmap, sensor)
        assert before >= after >= final
        assert before == 1.0 and final < 1.0


class TestSelection:
    def test_single_candidate(self):
        vmap = free_map()
        cluster = make_cluster(np.array([[6.0, 6.0, 3.0]]), (-1.0, 0.0, 0.0))
        vp = Viewpoint(Pose4((2.0, 6.0, 3.0), 0.0), 0)
        chosen, ratio = select_best_viewpoint([vp], cluster, vmap, SensorModel())
        assert chosen is vp and ratio == 1.0

    def test_higher_ratio_wins(self):
        vmap = free_map()
        pts = np.array([[6.0, y, 3.0] for y in np.linspace(5.0, 7.0, 10)])
        cluster = make_cluster(pts, (-1.0, 0.0, 0.0))
        good = Viewpoint(Pose4((2.0, 6.0, 3.0), 0.0), 0)
        bad = Viewpoint(Pose4((2.0, 6.0, 3.0), np.pi / 2.0), 0)
        chosen, ratio = select_best_viewpoint([bad, good], cluster, vmap, SensorModel())
        assert chosen is good
        assert ratio > visibility_ratio(bad, cluster, vmap, SensorModel())

    def test_tie_breaks_distance_then_index(self):
        vmap = free_map()
        cluster = make_cluster(np.array([[6.0, 6.0, 3.0]]), (-1.0, 0.0, 0.0))
        near = Viewpoint(Pose4((4.0, 6.0, 3.0), 0.0), 0)
        far = Viewpoint(Pose4((2.0, 6.0, 3.0), 0.0), 0)
        current = Pose4((4.5, 6.0, 3.0), 0.0)
        chosen, _ = select_best_viewpoint([far, near], cluster, vmap, SensorModel(), current)
        assert chosen is near
        # same distance -> first index
        a = Viewpoint(Pose4((5.0, 5.0, 3.0), np.pi / 2.0), 0)
        b = Viewpoint(Pose4((5.0, 7.0, 3.0), -np.pi / 2.0), 0)
        current = Pose4((5.0, 6.0, 3.0), 0.0)
        chosen, _ = select_best_viewpoint([a, b], cluster, vmap, SensorModel(), current)
        assert chosen is a

    def test_matches_argmax_oracle(self):
        rng = np.random.default_rng(3)
        vmap = free_map(dims=(24, 24, 24), resolution=0.5)
        vmap.states[8, 4:20, 2:10] = OCCUPIED
        pts = rng.uniform(5.5, 7.5, size=(30, 3))
        pts[:, 2] = rng.uniform(2.0, 4.0, 30)
        cluster = make_cluster(pts, (-1.0, 0.0, 0.0))
        sensor = SensorModel(max_range=10.0)
        cands = [
            Viewpoint(Pose4(rng.uniform(1.0, 3.5, 3) + [0.0, 3.0, 1.0], rng.uniform(-0.6, 0.6)), 0)
            for _ in range(12)
        ]
        current = Pose4((2.0, 6.0, 3.0), 0.0)
        chosen, ratio = select_best_viewpoint(cands, cluster, vmap, sensor, current)
        scored = []
        for i, c in enumerate(cands):
            r = visibility_ratio(c, cluster, vmap, sensor)
            d = np.linalg.norm(c.position - current.position)
            scored.append((-r, d, i))
        best = min(scored)
        assert chosen is cands[best[2]]
        assert ratio == -best[0]

    def test_empty_raises(self):
        vmap = free_map()
        cluster = make_cluster(np.array([[1.0, 1.0, 1.0]]), (1.0, 0.0, 0.0))
        with pytest.raises(NoFeasibleViewpoint):
            select_best_viewpoint([], cluster, vmap, SensorModel())


class TestPathLength:
    def test_straight_line_free_space(self):
        vmap = free_map(dims=(32, 32, 32), resolution=0.5)
        a = np.array([2.25, 8.25, 8.25])
        b = a + np.array([5.0, 0.0, 0.0])
        L = astar_path_length(vmap, a, b)
        assert 5.0 <= L <= 5.2

    def test_same_point_zero(self):
        vmap = free_map()
        p = np.array([3.0, 3.0, 3.0])
        assert astar_path_length(vmap, p, p) == 0.0

    def test_walled_off_unreachable(self):
        vmap = free_map(dims=(16, 16, 16), resolution=0.5)
        vmap.states[6:11, 6:11, 6:11] = OCCUPIED
        vmap.states[7:10, 7:10, 7:10] = FREE  # hollow pocket
        a = np.array([1.2, 1.2, 1.2])
        b = np.array([4.3, 4.3, 4.3])  # inside the pocket
        assert astar_path_length(vmap, a, b) == np.inf

    def test_unknown_penalty_on_straight_path(self):
        vmap = VolumetricMap((0.0, 0.0, 0.0), 0.5, (32, 32, 32))  # all unknown
        a = np.array([2.25, 8.25, 8.25])
        b = a + np.array([4.0, 0.0, 0.0])
        assert astar_path_length(vmap, a, b) == pytest.approx(4.0 * 1.2, abs=1e-9)

    def test_mixed_free_unknown_straight(self):
        vmap = free_map(dims=(32, 8, 8), resolution=0.5)
        vmap.states[16:24, :, :] = UNKNOWN  # x in [8, 12)
        a = np.array([6.25, 2.25, 2.25])
        b = np.array([13.75, 2.25, 2.25])
        expected = (7.5 - 4.0) + 1.2 * 4.0
        assert astar_path_length(vmap, a, b) == pytest.approx(expected, abs=1e-9)

    def test_detour_around_wall(self):
        vmap = free_map(dims=(24, 24, 24), resolution=0.5)
        vmap.states[12, 0:20, :] = OCCUPIED  # wall with a gap at high y
        a = np.array([3.25, 5.25, 5.25])
        b = np.array([9.25, 5.25, 5.25])
        L = astar_path_length(vmap, a, b)
        straight = np.linalg.norm(b - a)
        assert np.isfinite(L)
        assert L > straight + 1.0  # must detour through the gap


class TestCosts:
    def test_pairwise_identical_zero(self):
        vmap = free_map()
        vp = Viewpoint(Pose4((3.0, 3.0, 3.0), 0.7), 0)
        assert pairwise_cost(vp, vp, vmap, PlannerParams()) == 0.0

    def test_pairwise_translation_time(self):
        vmap = free_map()
        a = Viewpoint(Pose4((3.0, 3.0, 3.0), 0.3), 0)
        b = Viewpoint(Pose4((4.7, 3.0, 3.0), 0.3), 1)
        cost = pairwise_cost(a, b, vmap, PlannerParams())
        assert cost == pytest.approx(1.7 / 0.85, abs=1e-9)

    def test_pairwise_yaw_wraparound(self):
        vmap = free_map()
        a = Viewpoint(Pose4((3.0, 3.0, 3.0), 0.1), 0)
        b = Viewpoint(Pose4((3.0, 3.0, 3.0), 2.0 * np.pi - 0.1), 1)
        assert pairwise_cost(a, b, vmap, PlannerParams()) == pytest.approx(0.4, abs=1e-9)

    def test_consistency_axes(self):
        current = Pose4((1.0, 1.0, 1.0), 0.0)
        along = consistency_cost((3.0, 1.0, 1.0), current, (1.0, 0.0, 0.0))
        opposite = consistency_cost((-1.0, 1.0, 1.0), current, (1.0, 0.0, 0.0))
        ortho = consistency_cost((1.0, 4.0, 1.0), current, (1.0, 0.0, 0.0))
        assert along == pytest.approx(0.0, abs=1e-12)
        assert opposite == pytest.approx(np.pi, abs=1e-12)
        assert ortho == pytest.approx(np.pi / 2.0, abs=1e-12)

    def test_consistency_no_history_or_coincident(self):
        current = Pose4((1.0, 1.0, 1.0), 0.0)
        assert consistency_cost((5.0, 1.0, 1.0), current, None) == 0.0
        assert consistency_cost((1.0, 1.0, 1.0), current, (1.0, 0.0, 0.0)) == 0.0


class TestCostMatrix:
    def _fixture(self):
        vmap = free_map(dims=(32, 32, 16), resolution=0.5)
        vps = [
            Viewpoint(Pose4((10.0, 4.0, 3.0), 2.8), 0),
            Viewpoint(Pose4((12.0, 9.0, 3.5), -2.0), 1),
            Viewpoint(Pose4((4.0, 11.0, 2.5), -0.6), 2),
        ]
        current = Pose4((2.0, 2.0, 2.0), 0.4)
        return vmap, vps, current

    def test_diagonal_and_column_zero(self):
        vmap, vps, current = self._fixture()
        m = build_cost_matrix(vps, current, (1.0, 0.0, 0.0), vmap, PlannerParams())
        assert m.n == 4
        assert np.all(np.diag(m.entries) == 0.0)
        assert np.all(m.entries[:, 0] == 0.0)

    def test_entries_match_per_entry_oracle(self):
        vmap, vps, current = self._fixture()
        params = PlannerParams()
        last_dir = np.array([0.0, 1.0, 0.0])
        m = build_cost_matrix(vps, current, last_dir, vmap, params)
        for k in range(1, 4):
            for h in range(1, 4):
                if k == h:
                    continue
                ref = pairwise_cost(vps[k - 1], vps[h - 1], vmap, params)
                assert m.entries[k, h] == pytest.approx(ref, abs=1e-9)
        for h in range(1, 4):
            vh = vps[h - 1]
            move = (
                astar_path_length(vmap, current.position, vh.position) / params.v_max
                + yaw_gap(current.yaw, vh.yaw) / params.omega
            )
            ref = params.beta1 * move + params.beta2 * consistency_cost(
                vh.position, current, last_dir
            )
            assert m.entries[0, h] == pytest.approx(ref, abs=1e-9)

    def test_first_cycle_no_consistency(self):
        vmap, vps, current = self._fixture()
        params = PlannerParams()
        m = build_cost_matrix(vps, current, None, vmap, params)
        for h in range(1, 4):
            vh = vps[h - 1]
            move = (
                astar_path_length(vmap, current.position, vh.position) / params.v_max
                + yaw_gap(current.yaw, vh.yaw) / params.omega
            )
            assert m.entries[0, h] == pytest.approx(params.beta1 * move, abs=1e-9)

    def test_consistency_steers_first_hop(self):
        vmap = free_map(dims=(32, 32, 16), resolution=0.5)
        current = Pose4((8.0, 8.0, 3.0), 0.0)
        ahead = Viewpoint(Pose4((12.0, 8.0, 3.0), 0.0), 0)
        behind = Viewpoint(Pose4((4.0, 8.0, 3.0), 0.0), 1)
        m = build_cost_matrix([ahead, behind], current, (1.0, 0.0, 0.0), vmap, PlannerParams())
        plan = solve_atsp(m)
        assert plan.order[1] == 1  # the viewpoint along the previous direction


class TestSolveAndExport:
    def test_two_node_plan(self):
        m = CostMatrix(np.array([[0.0, 2.5], [0.0, 0.0]]))
        plan = solve_atsp(m)
        assert plan.order == (0, 1)
        assert plan.total_cost == 2.5

    def test_csv_roundtrip(self, tmp_path):
        vmap = free_map(dims=(32, 32, 16), resolution=0.5)
        vps = [
            Viewpoint(Pose4((10.0, 4.0, 3.0), 2.8), 0),
            Viewpoint(Pose4((4.0, 11.0, 2.5), -0.6), 1),
        ]
        current = Pose4((2.0, 2.0, 2.0), 0.0)
        params = PlannerParams()
        m = build_cost_matrix(vps, current, None, vmap, params)
        plan = solve_atsp(m)
        out = tmp_path / "plan.csv"
        plan_to_csv(plan, vps, current, out, matrix=m)
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 3
        assert int(rows[0]["index"]) == 0
        assert float(rows[0]["cumulative_cost"]) == 0.0
        assert float(rows[-1]["cumulative_cost"]) == pytest.approx(plan.total_cost, abs=1e-5)

    def test_ply_export(self, tmp_path):
        vps = [Viewpoint(Pose4((1.0, 0.0, 0.0), 0.0), 0)]
        plan = GlobalPlan((0, 1), 1.0)
        out = tmp_path / "plan.ply"
        plan_to_ply(plan, vps, Pose4((0.0, 0.0, 0.0), 0.0), out)
        text = out.read_text()
        assert "element vertex 2" in text and "element edge 1" in text


class TestRouting:
    def test_free_space_routes_direct(self):
        vmap = free_map(dims=(24, 24, 24), resolution=0.5)
        a = np.array([2.25, 5.25, 5.25])
        b = np.array([9.25, 7.25, 6.25])
        route = astar_route(vmap, a, b)
        assert len(route) == 2
        assert np.array_equal(route[0], a) and np.array_equal(route[1], b)

    def test_detours_around_a_wall(self):
        vmap = free_map(dims=(24, 24, 24), resolution=0.5)
        vmap.states[12, 0:20, :] = OCCUPIED  # gap only at high y
        a = np.array([3.25, 5.25, 5.25])
        b = np.array([9.25, 5.25, 5.25])
        route = astar_route(vmap, a, b)
        assert route is not None and len(route) > 2
        assert np.array_equal(route[0], a) and np.array_equal(route[-1], b)
        # interior waypoints stay out of occupied cells
        interior = np.array(route[1:-1])
        ijk = vmap.world_to_ijk(interior)
        assert not np.any(vmap.states[ijk[:, 0], ijk[:, 1], ijk[:, 2]] == OCCUPIED)
        length = sum(np.linalg.norm(np.array(q) - np.array(p)) for p, q in zip(route, route[1:]))
        assert length > np.linalg.norm(b - a) + 1.0

    def test_sealed_goal_returns_none(self):
        vmap = free_map(dims=(16, 16, 16), resolution=0.5)
        vmap.states[6:11, 6:11, 6:11] = OCCUPIED
        vmap.states[7:10, 7:10, 7:10] = FREE  # hollow pocket
        a = np.array([1.2, 1.2, 1.2])
        b = np.array([4.3, 4.3, 4.3])
        assert astar_route(vmap, a, b) is None

    def test_inflation_closes_a_narrow_slit(self):
        def walled():
            vmap = free_map(dims=(24, 24, 24), resolution=0.5)
            vmap.states[12, :, :] = OCCUPIED
            vmap.states[12, 10, 10] = FREE  # one-voxel slit
            return vmap

        a = np.array([3.25, 5.25, 5.25])
        b = np.array([9.25, 5.25, 5.25])
        thin = astar_route(walled(), a, b, inflate=0.0)
        assert thin is not None
        fat = astar_route(walled(), a, b, inflate=0.8)
        assert fat is None

    def test_inflated_route_keeps_clearance(self):
        vmap = free_map(dims=(24, 24, 24), resolution=0.5)
        vmap.states[12, 0:16, :] = OCCUPIED  # wide gap at high y
        a = np.array([3.25, 4.25, 5.25])
        b = np.array([9.25, 4.25, 5.25])
        route = astar_route(vmap, a, b, inflate=0.8)
        assert route is not None and len(route) > 2
        interior = np.array(route[1:-1])
        assert np.all(vmap.clearance_ok(interior, 0.5))

    def test_direct_shortcut_respects_inflation(self):
        # straight segment passes 0.5 m from a block: fine uninflated,
        # rerouted when 0.8 m of clearance is demanded
        vmap = free_map(dims=(24, 24, 24), resolution=0.5)
        vmap.states[11:13, 11:13, 0:10] = OCCUPIED
        a = np.array([4.25, 6.75, 2.25])
        b = np.array([8.25, 6.75, 2.25])
        assert len(astar_route(vmap, a, b, inflate=0.0)) == 2
        route = astar_route(vmap, a, b, inflate=0.8)
        assert route is not None
