"""Tests for the sliding-window MAP estimator.

Oracles: analytic plane/line geometry, finite-difference Jacobians, dense
linear-algebra reference solves, Gaussian-elimination marginals, and the
zero-noise simulator.
"""

import numpy as np
import pytest

from railfuse.errors import DegenerateFrameError, InvalidArgumentError
from railfuse.estimator import (
    FactorSummary,
    GnssFactor,
    GroundFactor,
    ImuFactor,
    LidarFactor,
    MarginalPrior,
    SlidingWindow,
    compute_weights,
    gnss_residual,
    ground_residual,
    lidar_residual,
    marginalize_oldest,
    optimize_window,
    state_boxminus,
)
from railfuse.geometry import RigidTransform, quat_to_matrix
from railfuse.preintegration import STATE_DIM, NavState, gravity_vector, integrate
from railfuse.registration import CorrespondenceSet
from railfuse.simulator import (
    ArcSegment,
    NoiseConfig,
    SpeedProfile,
    StraightSegment,
    TrackLayout,
    build_track,
    default_rig,
    simulate_run,
)

GRAVITY = gravity_vector()


def pose_at(gt, t_ns):
    p, q = gt.pose_at(t_ns)
    import numpy as _np
    return _np.reshape(p, 3), _np.reshape(q, 4)


def empty_corr(edges=0, planes=0, rng=None):
    rng = rng or np.random.default_rng(0)
    return CorrespondenceSet(
        edge_points=rng.normal(size=(edges, 3)),
        edge_anchors=rng.normal(size=(edges, 3)),
        edge_dirs=_unit(rng.normal(size=(edges, 3))),
        plane_points=rng.normal(size=(planes, 3)),
        plane_normals=_unit(rng.normal(size=(planes, 3))),
        plane_offsets=rng.normal(size=planes),
    )


def _unit(v):
    v = np.atleast_2d(v)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_state(rng, scale=1.0):
    q = rng.normal(size=4)
    return NavState(
        rng.normal(scale=scale, size=3),
        rng.normal(scale=scale, size=3),
        q / np.linalg.norm(q),
        rng.normal(scale=0.01, size=3),
        rng.normal(scale=0.001, size=3),
        1.0 + rng.normal(scale=0.01),
    )


class TestComputeWeights:
    def test_equal_displacement(self):
        w_i, _, _ = compute_weights([1.0, 0, 0], [0, 1.0, 0], 1.0, 1.0)
        assert w_i == 1.0

    def test_double_displacement(self):
        w_i, _, _ = compute_weights(1.0, 2.0, 1.0, 1.0)
        assert w_i == 0.0

    def test_half_lambda(self):
        _, w_d, _ = compute_weights(1.0, 1.0, 0.5, 1.0)
        assert w_d == 0.5

    def test_stationary(self):
        w_i, _, _ = compute_weights(0.0, 0.3, 1.0, 1.0)
        assert w_i == 1.0

    def test_product_and_range(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            w_i, w_d, w = compute_weights(
                rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 3), 1.0
            )
            assert 0.0 <= w_i <= 1.0 and 0.0 <= w_d <= 1.0
            assert w == pytest.approx(w_i * w_d)


class TestLidarResidual:
    def test_exact_geometry_zero_residual(self):
        """Body points generated from world structures through the true pose
        give zero residual at that pose."""
        rng = np.random.default_rng(2)
        T = RigidTransform.from_rotvec([0.1, -0.2, 0.3], [4.0, 1.0, -2.0])
        anchors = rng.normal(size=(6, 3))
        dirs = _unit(rng.normal(size=(6, 3)))
        world_on_line = anchors + rng.normal(size=(6, 1)) * dirs
        normals = _unit(rng.normal(size=(8, 3)))
        offsets = rng.normal(size=8)
        base = rng.normal(size=(8, 3))
        world_on_plane = base + (offsets - np.einsum("ni,ni->n", normals, base))[:, None] * normals
        corr = CorrespondenceSet(
            T.inverse().apply(world_on_line), anchors, dirs,
            T.inverse().apply(world_on_plane), normals, offsets,
        )
        x = NavState(T.t, np.zeros(3), T.q, np.zeros(3), np.zeros(3))
        r, _ = lidar_residual([x], [LidarFactor(0, 1, corr)])
        assert np.linalg.norm(r) < 1e-9

    def test_simulator_ground_plane_zero_residual(self):
        """Noiseless simulator ground returns satisfy the world bed plane at
        the true pose within the surface tolerance."""
        track = build_track(TrackLayout((StraightSegment(80.0),)))
        rig = default_rig(lidar_ids=(1,))
        data = simulate_run(track, rig, SpeedProfile.constant(5.0, 4.0),
                            NoiseConfig.zero(), seed=0)
        frame = data.lidar_frames[1][10]
        gt = data.ground_truth
        p, q = pose_at(gt, frame.frame_start_ns)
        ext = rig.lidars[1].extrinsic
        ground = frame.points[frame.intensity == 40]
        body_pts = ext.apply(ground)
        n = len(body_pts)
        corr = CorrespondenceSet(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)),
            body_pts, np.tile([0.0, 0.0, 1.0], (n, 1)), np.zeros(n),
        )
        x = NavState(p, np.zeros(3), q, np.zeros(3), np.zeros(3))
        r, _ = lidar_residual([x], [LidarFactor(0, 1, corr, sigma=1.0)])
        # points are stamped across the sweep; the pose at frame start bounds
        # the residual by the intra-frame motion of flat ground (none in z)
        assert np.max(np.abs(r)) < 1e-4

    def test_zero_weight_factor_absent(self):
        rng = np.random.default_rng(3)
        x = random_state(rng)
        f1 = LidarFactor(0, 1, empty_corr(planes=20, rng=rng))
        f2 = LidarFactor(0, 2, empty_corr(planes=20, rng=rng), weight=0.0)
        r1, _ = lidar_residual([x], [f1])
        r12, _ = lidar_residual([x], [f1, f2])
        np.testing.assert_array_equal(r1, r12)

    def test_jacobian_finite_difference(self):
        rng = np.random.default_rng(4)
        x = random_state(rng)
        f = LidarFactor(0, 1, empty_corr(edges=5, planes=7, rng=rng), weight=0.7)
        r0, blocks = lidar_residual([x], [f])
        J = np.zeros((len(r0), STATE_DIM))
        for sl, _, blk in blocks:
            J[sl] = blk
        eps = 1e-6
        for a in range(STATE_DIM):
            d = np.zeros(STATE_DIM)
            d[a] = eps
            rp, _ = lidar_residual([x.boxplus(d)], [f])
            rm, _ = lidar_residual([x.boxplus(-d)], [f])
            fd = (rp - rm) / (2 * eps)
            denom = max(1.0, np.max(np.abs(fd)))
            assert np.max(np.abs(fd - J[:, a])) / denom < 1e-4

    def test_degenerate_frame(self):
        rng = np.random.default_rng(5)
        x = random_state(rng)
        with pytest.raises(DegenerateFrameError):
            lidar_residual([x], [LidarFactor(0, 1, empty_corr(planes=3, rng=rng))])


class TestGroundResidual:
    def test_identity(self):
        r = ground_residual([0, 0, 1.0], 0.2, [0, 0, 1.0], 0.2, RigidTransform.identity())
        assert np.linalg.norm(r) < 1e-15

    def test_pure_z_translation(self):
        T = RigidTransform.identity()
        T = RigidTransform(T.q, np.array([0.0, 0.0, 0.1]))
        r = ground_residual([0, 0, 1.0], 0.0, [0, 0, 1.0], 0.0, T)
        np.testing.assert_allclose(r, [0, 0, 0, 0.1], atol=1e-15)

    def test_simulator_true_interframe_motion(self):
        """Body-frame bed planes at consecutive true poses are consistent
        under the true relative motion."""
        track = build_track(TrackLayout(
            (StraightSegment(30.0), ArcSegment(500.0, 0.2, 0.08), StraightSegment(20.0))
        ))
        rig = default_rig(lidar_ids=(1,))
        data = simulate_run(track, rig, SpeedProfile.constant(8.0, 6.0),
                            NoiseConfig.zero(), seed=0, start_s=20.0)
        gt = data.ground_truth
        n_w = np.array([0.0, 0.0, 1.0])
        d_w = 0.0
        for t0 in (1_000_000_000, 3_000_000_000):
            t1 = t0 + 100_000_000
            p0, q0 = pose_at(gt, t0)
            p1, q1 = pose_at(gt, t1)
            T0 = RigidTransform(q0, p0)
            T1 = RigidTransform(q1, p1)
            m0 = (T0.rotation_matrix.T @ n_w, d_w - n_w @ p0)
            m1 = (T1.rotation_matrix.T @ n_w, d_w - n_w @ p1)
            T_rel = T0.inverse().compose(T1)
            r = ground_residual(m0[0], m0[1], m1[0], m1[1], T_rel)
            assert np.linalg.norm(r) < 1e-9

    def test_factor_jacobian_finite_difference(self):
        from railfuse.estimator import _ground_factor_residual

        rng = np.random.default_rng(6)
        xk, xk1 = random_state(rng), random_state(rng)
        n = _unit(rng.normal(size=3))[0]
        f = GroundFactor(0, n, 0.5, _unit(rng.normal(size=3))[0], -0.2, sigma=0.1)
        r0, Jk, Jk1 = _ground_factor_residual(xk, xk1, f)
        eps = 1e-6
        for a in range(STATE_DIM):
            d = np.zeros(STATE_DIM)
            d[a] = eps
            rp, _, _ = _ground_factor_residual(xk.boxplus(d), xk1, f)
            rm, _, _ = _ground_factor_residual(xk.boxplus(-d), xk1, f)
            assert np.max(np.abs((rp - rm) / (2 * eps) - Jk[:, a])) < 1e-5
            rp, _, _ = _ground_factor_residual(xk, xk1.boxplus(d), f)
            rm, _, _ = _ground_factor_residual(xk, xk1.boxplus(-d), f)
            assert np.max(np.abs((rp - rm) / (2 * eps) - Jk1[:, a])) < 1e-5


def straight_dataset(duration=6.0, speed=8.0):
    track = build_track(TrackLayout((StraightSegment(80.0),)))
    rig = default_rig(lidar_ids=(1,))
    return rig, simulate_run(track, rig, SpeedProfile.constant(speed, duration),
                             NoiseConfig.zero(), seed=0)


def partial_delta(data, t0_ns, t1_ns):
    sel = (data.imu_t_ns >= t0_ns) & (data.imu_t_ns <= t1_ns)
    osel = (data.odom_t_ns >= t0_ns - 20_000_000) & (data.odom_t_ns <= t1_ns + 20_000_000)
    return integrate(
        data.imu_t_ns[sel], data.imu_accel[sel], data.imu_gyro[sel],
        data.odom_t_ns[osel], data.odom_speed[osel],
        np.zeros(3), np.zeros(3),
    )


class TestGnssResidual:
    def setup_method(self):
        self.rig, self.data = straight_dataset()
        self.gt = self.data.ground_truth

    def make_factor(self, t0_ns, dt_ns=500_000_000, offset=np.zeros(3)):
        t1 = t0_ns + dt_ns
        p1, q1 = pose_at(self.gt, t1)
        lever = self.rig.gnss_lever_arm
        fix = p1 + quat_to_matrix(q1) @ lever + offset
        delta = partial_delta(self.data, t0_ns, t1)
        return GnssFactor(0, fix, delta, lever, np.array([3.0, 3.0, 5.0]))

    def true_state(self, t_ns):
        p, q = pose_at(self.gt, t_ns)
        v = quat_to_matrix(q)[:, 0] * 8.0
        return NavState(p, v, q, np.zeros(3), np.zeros(3))

    def test_truth_zero_residual(self):
        t0 = 1_000_000_000
        f = self.make_factor(t0)
        r, _ = gnss_residual(self.true_state(t0), f)
        assert np.linalg.norm(r * f.sigma) < 1e-8

    def test_fix_displacement_linearity(self):
        t0 = 1_000_000_000
        x = self.true_state(t0)
        f0 = self.make_factor(t0)
        f1 = self.make_factor(t0, offset=np.array([1.0, 0.0, 0.0]))
        r0, _ = gnss_residual(x, f0)
        r1, _ = gnss_residual(x, f1)
        expect = quat_to_matrix(x.q).T @ [1.0, 0.0, 0.0] / f0.sigma
        np.testing.assert_allclose(r1 - r0, expect, atol=1e-12)

    def test_jacobian_finite_difference(self):
        rng = np.random.default_rng(7)
        t0 = 2_000_000_000
        f = self.make_factor(t0)
        x = self.true_state(t0).boxplus(rng.normal(scale=0.05, size=STATE_DIM))
        r0, J = gnss_residual(x, f)
        eps = 1e-6
        for a in range(STATE_DIM):
            d = np.zeros(STATE_DIM)
            d[a] = eps
            rp, _ = gnss_residual(x.boxplus(d), f)
            rm, _ = gnss_residual(x.boxplus(-d), f)
            assert np.max(np.abs((rp - rm) / (2 * eps) - J[:, a])) < 1e-5


def toy_window(rng, n_states=3):
    """Small window with prior + lidar + ground + gnss-free factors."""
    w = SlidingWindow(window_size=10)
    for k in range(n_states):
        w.add_keyframe(k * 100_000_000 + 1, random_state(rng, scale=0.1))
    d = STATE_DIM * 2
    A = rng.normal(size=(d, d)) * 0.3
    w.prior = MarginalPrior(
        mean=[w.states[0].copy(), w.states[1].copy()],
        sqrt_info=A.T @ A / 10 + np.eye(d),
        offset=rng.normal(scale=0.01, size=d),
    )
    for k in range(n_states):
        w.lidar_factors.append(LidarFactor(k, 1, empty_corr(edges=4, planes=8, rng=rng)))
    for k in range(n_states - 1):
        n = _unit(rng.normal(size=3))[0]
        w.ground_factors.append(GroundFactor(k, n, 0.1, _unit(rng.normal(size=3))[0], 0.2))
    return w


class TestAssembleCost:
    def test_prior_only_gradient_zero_at_mean(self):
        rng = np.random.default_rng(8)
        w = SlidingWindow()
        x = random_state(rng)
        w.add_keyframe(1, x)
        A = rng.normal(size=(STATE_DIM, STATE_DIM))
        w.prior = MarginalPrior([x.copy()], A.T @ A + np.eye(STATE_DIM), np.zeros(STATE_DIM))
        _, b, cost, _ = w.assemble_cost()
        assert np.linalg.norm(b) < 1e-12
        assert cost < 1e-24

    def test_class_additivity(self):
        rng = np.random.default_rng(9)
        w = toy_window(rng)
        _, _, cost_all, per = w.assemble_cost()
        assert cost_all == pytest.approx(sum(per.values()), rel=1e-12)
        saved = w.ground_factors
        w.ground_factors = []
        _, _, cost_no_ground, _ = w.assemble_cost()
        w.ground_factors = saved
        assert cost_all - cost_no_ground == pytest.approx(per["ground"], rel=1e-9)

    def test_normal_equations_match_dense_reference(self):
        """H dx = b must agree with a dense stacked least-squares solve."""
        rng = np.random.default_rng(10)
        w = toy_window(rng)
        w.huber_threshold = np.inf
        H, b, _, _ = w.assemble_cost()
        rows_r, rows_J = [], []
        D = STATE_DIM * len(w.states)
        for _, r, binds in w._factor_terms():
            J = np.zeros((len(r), D))
            for i, Ji in binds:
                J[:, i * STATE_DIM:(i + 1) * STATE_DIM] = Ji
            rows_r.append(r)
            rows_J.append(J)
        Jd = np.vstack(rows_J)
        rd = np.concatenate(rows_r)
        dx_dense, *_ = np.linalg.lstsq(Jd, -rd, rcond=None)
        dx = np.linalg.solve(H + 1e-12 * np.eye(D), b)
        assert np.max(np.abs(dx - dx_dense)) < 1e-8


class TestOptimizeWindow:
    def test_single_state_prior_only(self):
        rng = np.random.default_rng(11)
        w = SlidingWindow()
        mean = random_state(rng)
        w.add_keyframe(1, mean.boxplus(rng.normal(scale=0.05, size=STATE_DIM)))
        A = rng.normal(size=(STATE_DIM, STATE_DIM))
        w.prior = MarginalPrior([mean.copy()], A.T @ A + np.eye(STATE_DIM), np.zeros(STATE_DIM))
        summary = optimize_window(w)
        assert isinstance(summary, FactorSummary)
        assert np.linalg.norm(state_boxminus(w.states[0], mean)) < 1e-6

    @staticmethod
    def simulator_window(perturb=None):
        rig, data = straight_dataset()
        gt = data.ground_truth
        w = SlidingWindow(window_size=10)
        stamps = [1_000_000_000 + k * 200_000_000 for k in range(5)]
        lever = rig.odom_lever_arm
        for k, t in enumerate(stamps):
            p, q = pose_at(gt, t)
            v = quat_to_matrix(q)[:, 0] * 8.0
            x = NavState(p, v, q, np.zeros(3), np.zeros(3))
            if perturb is not None and k == perturb[0]:
                x = x.boxplus(perturb[1])
            w.add_keyframe(t, x)
        for k in range(4):
            w.imu_factors.append(ImuFactor(
                k, partial_delta(data, stamps[k], stamps[k + 1]),
                odom_lever_arm=lever,
            ))
        # anchor the gauge freedom with a prior on the first state
        p0, q0 = pose_at(gt, stamps[0])
        x0 = NavState(p0, quat_to_matrix(q0)[:, 0] * 8.0, q0, np.zeros(3), np.zeros(3))
        w.prior = MarginalPrior([x0], 1e4 * np.eye(STATE_DIM), np.zeros(STATE_DIM))
        # plane constraints from noiseless ground returns
        ext = rig.lidars[1].extrinsic
        for k, t in enumerate(stamps):
            frame = min(data.lidar_frames[1], key=lambda f: abs(f.frame_start_ns - t))
            ground = frame.points[frame.intensity == 40][::7]
            body = ext.apply(ground)
            n = len(body)
            corr = CorrespondenceSet(
                np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)),
                body, np.tile([0.0, 0.0, 1.0], (n, 1)), np.zeros(n),
            )
            w.lidar_factors.append(LidarFactor(k, 1, corr, sigma=0.05))
        return gt, stamps, w

    def test_zero_noise_convergence_to_truth(self):
        rng = np.random.default_rng(12)
        gt, stamps, w = self.simulator_window()
        for k in range(len(w.states)):
            d = np.zeros(STATE_DIM)
            d[:3] = rng.normal(scale=0.02, size=3)
            d[6:9] = rng.normal(scale=0.002, size=3)
            w.states[k] = w.states[k].boxplus(d)
        optimize_window(w)
        for k, t in enumerate(stamps):
            p, q = pose_at(gt, t)
            x = w.states[k]
            assert np.linalg.norm(x.p - p) < 1e-3
            dq = np.linalg.norm(state_boxminus(x, NavState(p, x.v, q, x.ba, x.bg, x.c))[6:9])
            assert dq < 1e-4

    def test_perturb_and_recover(self):
        d = np.zeros(STATE_DIM)
        d[0:3] = [0.3, -0.3, 0.2]  # 0.5 m perturbation split over axes
        gt, stamps, w = self.simulator_window(perturb=(2, d))
        optimize_window(w)
        p, _ = pose_at(gt, stamps[2])
        assert np.linalg.norm(w.states[2].p - p) < 1e-2

    def test_monotone_and_weight_scale_invariance(self):
        rng = np.random.default_rng(13)
        w = toy_window(rng)
        w.huber_threshold = np.inf
        s1 = optimize_window(w, max_iterations=100, rel_tol=1e-12)
        states1 = [s.copy() for s in w.states]
        # common positive rescale of every factor class
        w2 = toy_window(np.random.default_rng(13))
        w2.huber_threshold = np.inf
        k = 2.7
        w2.prior.sqrt_info *= np.sqrt(k)
        w2.prior.offset *= np.sqrt(k)
        for f in w2.lidar_factors:
            f.sigma /= np.sqrt(k)
        for f in w2.ground_factors:
            f.sigma /= np.sqrt(k)
        optimize_window(w2, max_iterations=100, rel_tol=1e-12)
        for a, b in zip(states1, w2.states):
            assert np.linalg.norm(state_boxminus(a, b)) < 1e-6
        assert s1.total_cost >= 0.0

    def test_empty_window(self):
        with pytest.raises(InvalidArgumentError):
            optimize_window(SlidingWindow())


class TestMarginalizeOldest:
    def test_linear_gaussian_schur_oracle(self):
        """Prior-only 3-state window: the marginal information/offset must
        equal the dense Schur complement."""
        rng = np.random.default_rng(14)
        w = SlidingWindow()
        for k in range(3):
            w.add_keyframe(k + 1, random_state(rng, scale=0.1))
        D = STATE_DIM * 3
        A = rng.normal(size=(D, D))
        L = A.T @ A / D + np.eye(D)
        Lc = np.linalg.cholesky(L).T
        u = rng.normal(size=D)
        w.prior = MarginalPrior([s.copy() for s in w.states], Lc, u)

        H = Lc.T @ Lc
        b = Lc.T @ u
        m = STATE_DIM
        H_star = H[m:, m:] - H[m:, :m] @ np.linalg.inv(H[:m, :m]) @ H[:m, m:]
        b_star = b[m:] - H[m:, :m] @ np.linalg.inv(H[:m, :m]) @ b[:m]

        new = marginalize_oldest(w)
        Hn = new.prior.sqrt_info.T @ new.prior.sqrt_info
        bn = new.prior.sqrt_info.T @ new.prior.offset
        assert np.max(np.abs(Hn - H_star)) < 1e-9 * max(1.0, np.max(np.abs(H_star)))
        assert np.max(np.abs(bn - b_star)) < 1e-9 * max(1.0, np.max(np.abs(b_star)))

    def test_equivalence_after_marginalization(self):
        """On the linear prior-only problem, optimizing the marginalized
        window reproduces the full-window optimum of the remaining states."""
        rng = np.random.default_rng(15)
        w = SlidingWindow()
        for k in range(3):
            w.add_keyframe(k + 1, random_state(rng, scale=0.01))
        D = STATE_DIM * 3
        A = rng.normal(size=(D, D))
        Lc = np.linalg.cholesky(A.T @ A / D + np.eye(D)).T
        u = rng.normal(scale=0.01, size=D)
        w.prior = MarginalPrior([s.copy() for s in w.states], Lc, u)

        w_full = SlidingWindow()
        w_full.states = [s.copy() for s in w.states]
        w_full.stamps_ns = list(w.stamps_ns)
        w_full.prior = MarginalPrior([s.copy() for s in w.prior.mean], Lc.copy(), u.copy())
        optimize_window(w_full, max_iterations=50)

        new = marginalize_oldest(w)
        optimize_window(new, max_iterations=50)
        for a, b in zip(w_full.states[1:], new.states):
            assert np.linalg.norm(state_boxminus(a, b)) < 1e-6

    def test_state_without_factors_dropped(self):
        rng = np.random.default_rng(16)
        w = SlidingWindow()
        for k in range(3):
            w.add_keyframe(k + 1, random_state(rng))
        w.lidar_factors.append(LidarFactor(1, 1, empty_corr(planes=12, rng=rng)))
        new = marginalize_oldest(w)
        assert new.prior is None
        assert len(new.states) == 2
        assert new.lidar_factors[0].state_index == 0

    def test_window_size_bounded(self):
        rng = np.random.default_rng(17)
        w = SlidingWindow(window_size=4)
        for k in range(5):
            w.add_keyframe(k + 1, random_state(rng, scale=0.01))
        assert w.full
        D = STATE_DIM * 2
        A = rng.normal(size=(D, D))
        w.prior = MarginalPrior(
            [w.states[0].copy(), w.states[1].copy()],
            np.linalg.cholesky(A.T @ A / D + np.eye(D)).T,
            np.zeros(D),
        )
        new = marginalize_oldest(w)
        assert len(new.states) == w.window_size
        assert not new.full
