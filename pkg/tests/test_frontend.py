"""Tests for LiDAR preprocessing, merging, feature and rail extraction.

Oracles: brute-force filtering, closed-form constant-velocity de-skew,
counting across merge windows, synthetic wedge/plane scenes with known edge
lines, and simulator ground truth for rail geometry.
"""

import numpy as np
import pytest

from railfuse.errors import (
    CoverageGapError,
    InvalidArgumentError,
    NoPrimaryFrameError,
    NoRailsError,
    UnreliablePlaneError,
)
from railfuse.frontend import (
    FrontendConfig,
    LidarScan,
    extract_features,
    extract_rail_tracks,
    motion_compensate,
    remove_close_points,
    scan_from_frame,
    synchronize_merge,
    voxel_downsample,
)
from railfuse.geometry import NS_PER_S, PoseInterpolator, RigidTransform, quat_rotate
from railfuse.simulator import (
    ArcSegment,
    LidarSpec,
    NoiseConfig,
    SceneConfig,
    SensorRig,
    SpeedProfile,
    StraightSegment,
    TrackLayout,
    build_track,
    default_rig,
    simulate_run,
)
from railfuse.simulator.rig import _yaw_pitch


def make_scan(points, start_ns=0, lidar_id=1, line_id=None, t_ns=None):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    return LidarScan(
        lidar_id=lidar_id,
        frame_start_ns=start_ns,
        points=points,
        intensity=np.zeros(n),
        t_ns=np.asarray(t_ns) if t_ns is not None else start_ns + np.arange(n, dtype=np.int64),
        line_id=np.asarray(line_id) if line_id is not None else np.zeros(n, dtype=np.int64),
    )


def rail_view_rig():
    """Single fine-resolution forward LiDAR for rail-extraction tests."""
    spec = LidarSpec(1, _yaw_pitch(0, 8, [2.0, 0.0, -0.3]), 81.7, 25.1, 80.0,
                     n_azimuth=1600, n_elevation=64)
    return SensorRig({1: spec})


class TestRemoveClose:
    def test_close_point_removed(self):
        scan = make_scan([[0.2, 0.2, 0.0], [5.0, 0.0, 0.0]])
        out = remove_close_points(scan, 0.5)
        assert len(out) == 1 and out.points[0, 0] == 5.0

    def test_empty_scan(self):
        scan = make_scan(np.zeros((0, 3)))
        assert len(remove_close_points(scan, 0.5)) == 0

    def test_matches_bruteforce_and_preserves_order(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(scale=2.0, size=(500, 3))
        scan = make_scan(pts)
        out = remove_close_points(scan, 1.5)
        expect = [i for i in range(500) if np.linalg.norm(pts[i]) >= 1.5]
        assert len(out) == len(expect)
        np.testing.assert_array_equal(out.points, pts[expect])
        assert np.all(np.diff(out.t_ns) > 0)  # original order kept

    def test_nonpositive_min_range_rejected(self):
        with pytest.raises(InvalidArgumentError):
            remove_close_points(make_scan([[1.0, 0, 0]]), 0.0)


class TestMotionCompensate:
    @staticmethod
    def interp_const_velocity(v, t0_ns=0, t1_ns=200_000_000):
        stamps = np.array([t0_ns, t1_ns], dtype=np.int64)
        pos = np.array([[0.0, 0.0, 0.0], [np.asarray(v)[0] * (t1_ns - t0_ns) / NS_PER_S, 0.0, 0.0]])
        quats = np.tile([1.0, 0, 0, 0], (2, 1))
        return PoseInterpolator(stamps, pos, quats)

    def test_stationary_unchanged(self):
        interp = PoseInterpolator(
            np.array([0, 200_000_000]), np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1))
        )
        scan = make_scan([[10.0, 1.0, 0.5]], t_ns=[50_000_000])
        out = motion_compensate(scan, interp, RigidTransform.identity())
        np.testing.assert_allclose(out.points, scan.points, atol=1e-9)

    def test_constant_velocity_closed_form(self):
        """A landmark sensed 50 ms into the sweep while moving forward at
        10 m/s sits 0.5 m farther ahead when re-expressed at frame start."""
        interp = self.interp_const_velocity([10.0, 0.0, 0.0])
        scan = make_scan([[20.0, 0.0, 0.0]], t_ns=[50_000_000])
        out = motion_compensate(scan, interp, RigidTransform.identity())
        np.testing.assert_allclose(out.points[0], [20.5, 0.0, 0.0], atol=1e-9)

    def test_coverage_gap_raises(self):
        interp = self.interp_const_velocity([1.0, 0.0, 0.0], 0, 40_000_000)
        scan = make_scan([[5.0, 0.0, 0.0]], t_ns=[50_000_000])
        with pytest.raises(CoverageGapError):
            motion_compensate(scan, interp, RigidTransform.identity())

    def test_simulator_deskew_reduces_smear(self):
        """At 20 m/s, compensated points lie on world surfaces; raw points
        smear by tens of centimeters."""
        track = build_track(TrackLayout((StraightSegment(400.0),)))
        rig = default_rig(lidar_ids=(1,))
        ds = simulate_run(track, rig, SpeedProfile.constant(20.0, 2.0), NoiseConfig.zero(), seed=0)
        fr = ds.lidar_frames[1][5]
        scan = scan_from_frame(fr)
        spec = rig.lidars[1]
        # pose interpolation from ground truth sampled at 100 Hz
        gt = ds.ground_truth
        m = (gt.traj_t_ns >= fr.frame_start_ns - 20_000_000) & (
            gt.traj_t_ns <= fr.frame_start_ns + 120_000_000
        )
        interp = PoseInterpolator(gt.traj_t_ns[m], gt.traj_p[m], gt.traj_q[m])
        out = motion_compensate(scan, interp, spec.extrinsic)

        p0, q0 = gt.pose_at(np.array([fr.frame_start_ns]))
        T0 = RigidTransform(q0[0], p0[0]).compose(spec.extrinsic)

        def world_dist(points):
            n = len(points)
            w = quat_rotate(np.broadcast_to(T0.q, (n, 4)), points) + T0.t
            return ds.world.surface_distance(w)

        assert np.max(world_dist(out.points)) < 0.01
        assert np.max(world_dist(scan.points)) > 0.10


class TestSynchronizeMerge:
    def test_window_boundaries(self):
        t_k, t_k1 = 1_000_000_000, 1_100_000_000
        primary = make_scan([[1.0, 0, 0]], start_ns=t_k, lidar_id=1)
        at_start = make_scan([[2.0, 0, 0]], start_ns=t_k, lidar_id=3)
        at_next = make_scan([[3.0, 0, 0]], start_ns=t_k1, lidar_id=4)
        ident = {i: RigidTransform.identity() for i in (1, 3, 4)}
        fused = synchronize_merge(primary, [at_start, at_next], ident, t_k1)
        assert fused.frame_start_ns == t_k and fused.lidar_id == 1
        assert sorted(fused.source_id.tolist()) == [1, 3]  # closed left, open right

    def test_missing_primary(self):
        with pytest.raises(NoPrimaryFrameError):
            synchronize_merge(None, [], {}, 0)

    def test_counting_oracle_and_extrinsic_transform(self):
        rng = np.random.default_rng(11)
        t_k, t_k1 = 0, 100_000_000
        extr = {1: RigidTransform.identity()}
        primary = make_scan(rng.normal(size=(40, 3)) + [20, 0, 0], start_ns=t_k, lidar_id=1)
        secondaries, expected = [], 40
        for lid in range(2, 8):
            delay = int(rng.integers(0, 80_000_000))
            n = int(rng.integers(5, 30))
            T = RigidTransform.from_rotvec(rng.normal(scale=0.2, size=3), rng.normal(size=3))
            extr[lid] = T
            secondaries.append(
                make_scan(rng.normal(size=(n, 3)), start_ns=t_k + delay, lidar_id=lid)
            )
            expected += n
        # one scan deliberately outside the window
        extr[7] = RigidTransform.identity()
        late = make_scan(rng.normal(size=(9, 3)), start_ns=t_k1 + 5, lidar_id=7)
        fused = synchronize_merge(primary, secondaries + [late], extr, t_k1)
        assert len(fused) == expected
        # spot-check the rigid transform of one secondary into the primary frame
        s = secondaries[0]
        T = extr[s.lidar_id]
        got = fused.points[fused.source_id == s.lidar_id]
        want = quat_rotate(np.broadcast_to(T.q, (len(s), 4)), s.points) + T.t
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestVoxelDownsample:
    def test_one_point_per_voxel(self):
        pts = np.array([[0.01, 0.01, 0.01], [0.05, 0.05, 0.05], [0.35, 0.0, 0.0]])
        out, = voxel_downsample(pts, 0.2)
        assert len(out) == 2
        np.testing.assert_array_equal(out[0], pts[0])  # first representative kept

    def test_extras_follow(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [1.01, 0, 0]])
        inten = np.array([7.0, 8.0, 9.0])
        out, oi = voxel_downsample(pts, 0.5, inten)
        np.testing.assert_array_equal(oi, [7.0, 8.0])


class TestExtractFeatures:
    def test_single_plane_no_edges(self):
        x = np.linspace(2.0, 6.0, 120)
        lines, ids = [], []
        for line in range(3):
            lines.append(np.column_stack([x, np.full_like(x, 0.3 * line), np.full_like(x, -1.0)]))
            ids.append(np.full(len(x), line))
        scan = make_scan(np.vstack(lines), line_id=np.concatenate(ids))
        fc = extract_features(scan)
        assert fc.n_edges == 0
        assert fc.n_planars > 0

    def test_dihedral_edge_localized(self):
        """Wedge y = 2|x| + 1: every reported edge point lies within 5 cm of
        the true crease line {x=0, y=1}."""
        x = np.linspace(-2.0, 2.0, 501)
        pts = np.column_stack([x, 2.0 * np.abs(x) + 1.0, np.full_like(x, 1.5)])
        fc = extract_features(make_scan(pts))
        assert fc.n_edges >= 1
        d = np.hypot(fc.edges[:, 0], fc.edges[:, 1] - 1.0)
        assert np.max(d) < 0.05
        assert fc.n_planars > 0

    def test_empty_scan(self):
        fc = extract_features(make_scan(np.zeros((0, 3))))
        assert fc.n_edges == 0 and fc.n_planars == 0

    def test_short_lines_yield_empty(self):
        scan = make_scan(np.random.default_rng(0).normal(size=(8, 3)))
        fc = extract_features(scan)
        assert fc.n_edges == 0 and fc.n_planars == 0

    def test_occlusion_silhouette_not_an_edge(self):
        # foreground slab in front of a far wall: the range jump at the
        # silhouette must not be reported as an edge feature
        x = np.linspace(-1.0, 1.0, 200)
        y = np.where(x < 0.0, 5.0, 20.0)
        pts = np.column_stack([x, y, np.zeros_like(x)])
        fc = extract_features(make_scan(pts))
        assert fc.n_edges == 0

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(300, 3)) + [10, 0, 0]
        scan = make_scan(pts)
        a = extract_features(scan)
        b = extract_features(scan)
        np.testing.assert_array_equal(a.edges, b.edges)
        np.testing.assert_array_equal(a.planars, b.planars)


@pytest.fixture(scope="module")
def straight_rail_scan():
    track = build_track(TrackLayout((StraightSegment(200.0),)))
    ds = simulate_run(track, rail_view_rig(), SpeedProfile.constant(0.0, 0.3),
                      NoiseConfig.zero(), seed=0, start_s=20.0)
    return scan_from_frame(ds.lidar_frames[1][0])


class TestExtractRails:
    MOUNT_HEIGHT = 1.7     # LiDAR 1 sits 2.0 - 0.3 m above the bed plane
    PITCH = np.deg2rad(8.0)
    GAUGE = 1.435

    def test_straight_track_geometry(self, straight_rail_scan):
        ext = extract_rail_tracks(straight_rail_scan, self.MOUNT_HEIGHT, self.PITCH, self.GAUGE)
        assert abs(ext.left_line[0][1] - self.GAUGE / 2) < 1e-3
        assert abs(ext.right_line[0][1] + self.GAUGE / 2) < 1e-3
        ang = np.degrees(np.arccos(min(1.0, ext.plane_normal[2])))
        assert ang < 0.1
        assert abs(ext.plane_offset) < 0.02
        assert ext.inlier_ratio >= 0.7
        assert len(ext.left_points) >= 30 and len(ext.right_points) >= 30

    def test_no_rails_in_tunnel(self):
        track = build_track(TrackLayout((StraightSegment(200.0),)))
        scene = SceneConfig(tunnel_ranges=((0.0, 200.0),), with_pylons=False)
        ds = simulate_run(track, rail_view_rig(), SpeedProfile.constant(0.0, 0.3),
                          NoiseConfig.zero(), seed=0, scene=scene, start_s=20.0)
        scan = scan_from_frame(ds.lidar_frames[1][0])
        with pytest.raises(NoRailsError):
            extract_rail_tracks(scan, self.MOUNT_HEIGHT, self.PITCH, self.GAUGE)

    def test_superelevated_curve_roll(self):
        """Vehicle on level straight looks ahead at a banked curve: the
        extracted bed plane rolls by atan(superelevation / gauge) ≈ 1.996°."""
        layout = TrackLayout(
            (StraightSegment(60.0), ArcSegment(3000.0, 0.05, superelevation=0.05), StraightSegment(20.0))
        )
        ds = simulate_run(build_track(layout), rail_view_rig(), SpeedProfile.constant(0.0, 0.3),
                          NoiseConfig.zero(), seed=0, start_s=58.0)
        scan = scan_from_frame(ds.lidar_frames[1][0])
        # restrict to the fully banked part of the curve (>10 m past the ramp)
        cp, sp = np.cos(self.PITCH), np.sin(self.PITCH)
        x_lev = scan.points[:, 0] * cp + scan.points[:, 2] * sp
        scan = scan.select((x_lev > 14.0) & (x_lev < 34.0))
        ext = extract_rail_tracks(scan, self.MOUNT_HEIGHT, self.PITCH, self.GAUGE)
        roll = np.degrees(np.arctan2(abs(ext.plane_normal[1]), ext.plane_normal[2]))
        assert abs(roll - 1.996) < 0.2

    def test_translation_invariance_along_track(self):
        track = build_track(TrackLayout((StraightSegment(300.0),)))
        outs = []
        for s0 in (20.0, 25.0):
            ds = simulate_run(track, rail_view_rig(), SpeedProfile.constant(0.0, 0.3),
                              NoiseConfig.zero(), seed=0, start_s=s0)
            scan = scan_from_frame(ds.lidar_frames[1][0])
            outs.append(extract_rail_tracks(scan, self.MOUNT_HEIGHT, self.PITCH, self.GAUGE))
        a, b = outs
        cosang = np.clip(a.plane_normal @ b.plane_normal, -1.0, 1.0)
        assert np.degrees(np.arccos(cosang)) < 0.05
        assert abs(a.plane_offset - b.plane_offset) < 0.01

    def test_unreliable_plane(self):
        """Twisted track: the two rail lines are skew (one climbs, one drops),
        so no single plane fits their union at the required inlier ratio."""
        rng = np.random.default_rng(2)
        x = np.linspace(3.0, 30.0, 800)
        ground = np.column_stack([x, rng.uniform(-2.0, 2.0, len(x)), np.zeros_like(x)])
        rails = []
        for side in (1.0, -1.0):
            z = 0.176 + side * 0.004 * (x - 16.5)
            rails.append(np.column_stack([x, np.full_like(x, side * self.GAUGE / 2), z]))
        ground = np.repeat(ground, 4, axis=0)  # bed median must come from the ground
        pts = np.vstack([ground] + rails)
        scan = make_scan(pts)
        with pytest.raises(UnreliablePlaneError):
            extract_rail_tracks(scan, 0.0, 0.0, self.GAUGE)

    def test_side_lidar_rejected(self, straight_rail_scan):
        scan = straight_rail_scan
        bad = LidarScan(3, scan.frame_start_ns, scan.points, scan.intensity, scan.t_ns, scan.line_id)
        with pytest.raises(InvalidArgumentError):
            extract_rail_tracks(bad, self.MOUNT_HEIGHT, self.PITCH, self.GAUGE)
