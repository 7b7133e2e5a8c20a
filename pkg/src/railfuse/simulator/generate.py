"""Deterministic synthetic sensor-stream generation.

Produces a complete multi-sensor dataset (IMU 200 Hz, wheel odometer 100 Hz,
GNSS 1 Hz, per-LiDAR 10 Hz frames with exact per-point timestamps) from an
analytic track, a speed profile and a world model, together with the ground
truth needed by evaluation oracles.

Kinematics are derived from the analytic pose function by high-order central
differences, so the emitted inertial data is consistent with the trajectory
to well below sensor-noise level. All randomness flows from a single seeded
generator, drawn in a fixed order, making output bit-identical per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from railfuse.errors import InvalidArgumentError, PrimaryImmutableError
from railfuse.geometry import (
    NS_PER_S,
    RigidTransform,
    quat_conjugate,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
)
from railfuse.preintegration import gravity_vector
from railfuse.simulator.rig import PRIMARY_LIDAR_ID, LidarSpec, SensorRig
from railfuse.simulator.track import TrackMap
from railfuse.simulator.world import SceneConfig, World

IMU_RATE_HZ = 200.0
ODOM_RATE_HZ = 100.0
GNSS_RATE_HZ = 1.0
LIDAR_RATE_HZ = 10.0
FRAME_SPAN_S = 0.09          # active sweep time inside each 0.1 s frame
_STENCIL_H = 1e-3            # s, central-difference step for derivatives


@dataclass(frozen=True)
class SpeedProfile:
    """Piecewise-linear speed over time; distance is exact (quadratic arcs)."""

    times: np.ndarray    # s, strictly increasing, starting at 0
    speeds: np.ndarray   # m/s, >= 0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        v = np.asarray(self.speeds, dtype=np.float64)
        if t.size == 0 or v.size != t.size:
            raise InvalidArgumentError("speed profile must have matching, non-empty knots")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0.0):
            raise InvalidArgumentError("speed profile times must start at 0 and increase")
        if np.any(v < 0.0):
            raise InvalidArgumentError("speed profile speeds must be non-negative")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "speeds", v)
        # cumulative distance at each knot (trapezoid is exact for linear v)
        d = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(t))])
        object.__setattr__(self, "_knot_dist", d)

    @classmethod
    def constant(cls, speed: float, duration: float) -> "SpeedProfile":
        return cls(np.array([0.0, duration]), np.array([speed, speed]))

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    def speed_at(self, t) -> np.ndarray:
        return np.interp(np.asarray(t, dtype=np.float64), self.times, self.speeds)

    def distance_at(self, t) -> np.ndarray:
        """Distance traveled by time t; linear extrapolation beyond the knots."""
        t = np.asarray(t, dtype=np.float64)
        i = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        t0, t1 = self.times[i], self.times[i + 1]
        v0, v1 = self.speeds[i], self.speeds[i + 1]
        tc = np.clip(t, self.times[0], self.times[-1])
        dt = tc - t0
        a = (v1 - v0) / (t1 - t0)
        d = self._knot_dist[i] + v0 * dt + 0.5 * a * dt * dt
        d = d + np.where(t < self.times[0], (t - self.times[0]) * self.speeds[0], 0.0)
        d = d + np.where(t > self.times[-1], (t - self.times[-1]) * self.speeds[-1], 0.0)
        return d


@dataclass(frozen=True)
class NoiseConfig:
    """True error sources applied by the generator (all zero-mean Gaussian)."""

    accel_sigma: float = 0.0           # m/s² white noise per sample
    gyro_sigma: float = 0.0            # rad/s white noise per sample
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias_walk: float = 0.0       # m/s² / sqrt(s)
    gyro_bias_walk: float = 0.0        # rad/s / sqrt(s)
    odom_sigma: float = 0.0            # m/s white noise on the raw reading
    odom_scale: float = 1.0            # true scale c: c * reading = speed
    gnss_sigma: np.ndarray = field(default_factory=lambda: np.array([3.0, 3.0, 5.0]))
    lidar_range_sigma: float = 0.0     # m along-ray

    def __post_init__(self):
        object.__setattr__(self, "accel_bias", np.asarray(self.accel_bias, dtype=np.float64))
        object.__setattr__(self, "gyro_bias", np.asarray(self.gyro_bias, dtype=np.float64))
        object.__setattr__(self, "gnss_sigma", np.asarray(self.gnss_sigma, dtype=np.float64))
        if not (0.5 < self.odom_scale < 1.5):
            raise InvalidArgumentError("odometer scale outside sane bounds (0.5, 1.5)")

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(gnss_sigma=np.zeros(3))

    @classmethod
    def nominal(cls) -> "NoiseConfig":
        """Field-realistic defaults used by the end-to-end scenarios."""
        return cls(
            accel_sigma=0.02,
            gyro_sigma=0.002,
            accel_bias=np.array([0.05, -0.03, 0.02]),
            gyro_bias=np.array([0.002, -0.001, 0.0015]),
            accel_bias_walk=2e-4,
            gyro_bias_walk=2e-5,
            odom_sigma=0.05,
            odom_scale=1.02,
            gnss_sigma=np.array([3.0, 3.0, 5.0]),
            lidar_range_sigma=0.01,
        )


@dataclass
class LidarFrame:
    """One sweep of one LiDAR, points in the sensor frame at capture time."""

    lidar_id: int
    frame_start_ns: int
    t_ns: np.ndarray       # (N,) per-point capture times, strictly increasing
    points: np.ndarray     # (N, 3)
    intensity: np.ndarray  # (N,)
    line_id: np.ndarray    # (N,) scan-line (elevation row) index


@dataclass
class GroundTruth:
    """Everything the evaluation oracles need, none of it visible to the pipeline."""

    track: TrackMap
    speed: SpeedProfile
    rig: SensorRig
    start_s: float
    traj_t_ns: np.ndarray          # sampled reference trajectory (100 Hz)
    traj_p: np.ndarray
    traj_q: np.ndarray
    accel_bias: np.ndarray         # (N_imu, 3) true bias at each IMU stamp
    gyro_bias: np.ndarray
    odom_scale: float
    extrinsic_switches: list       # [(lidar_id, t_ns, RigidTransform), ...]

    def pose_at(self, t_ns) -> tuple:
        """True body pose(s) at arbitrary times (positions (N,3), quats (N,4))."""
        t = np.atleast_1d(np.asarray(t_ns, dtype=np.float64)) / NS_PER_S
        s = self.start_s + self.speed.distance_at(t)
        return self.track.pose(s, self.rig.body_height)


@dataclass
class SimDataset:
    """Immutable bundle of all generated sensor streams."""

    imu_t_ns: np.ndarray
    imu_accel: np.ndarray
    imu_gyro: np.ndarray
    odom_t_ns: np.ndarray
    odom_speed: np.ndarray
    gnss_t_ns: np.ndarray
    gnss_pos: np.ndarray
    gnss_sigma: np.ndarray          # (N, 3) per-axis std dev reported per fix
    lidar_frames: dict              # lidar_id -> [LidarFrame, ...]
    rig: SensorRig
    world: World
    ground_truth: GroundTruth


def _body_poses(track: TrackMap, speed: SpeedProfile, start_s: float, height: float, t: np.ndarray):
    return track.pose(start_s + speed.distance_at(t), height)


def _stencil(track, speed, start_s, height, t):
    """Pose samples at t + {-2h,-h,0,h,2h} for 5-point derivatives."""
    h = _STENCIL_H
    out = []
    for k in (-2, -1, 0, 1, 2):
        p, q = _body_poses(track, speed, start_s, height, t + k * h)
        out.append((p, q))
    # hemisphere-align every sample to the center quaternion
    qc = out[2][1]
    aligned = []
    for p, q in out:
        q = np.where(np.sum(q * qc, axis=-1, keepdims=True) < 0.0, -q, q)
        aligned.append((p, q))
    return aligned


def _sensor_directions(spec: LidarSpec):
    """Unit ray directions in the sensor frame, column-major sweep order."""
    az = np.deg2rad(np.linspace(-0.5, 0.5, spec.n_azimuth) * spec.fov_h_deg)
    el = np.deg2rad(np.linspace(-0.5, 0.5, spec.n_elevation) * spec.fov_v_deg)
    azg = np.repeat(az, spec.n_elevation)
    elg = np.tile(el, spec.n_azimuth)
    ce = np.cos(elg)
    dirs = np.stack([ce * np.cos(azg), ce * np.sin(azg), np.sin(elg)], axis=-1)
    line = np.tile(np.arange(spec.n_elevation), spec.n_azimuth)
    return dirs, line


def simulate_run(
    track: TrackMap,
    rig: SensorRig,
    speed: SpeedProfile,
    noise: NoiseConfig | None = None,
    seed: int = 0,
    scene: SceneConfig | None = None,
    start_s: float = 1.0,
) -> SimDataset:
    """Generate a full dataset for one run. Same arguments + seed => same bytes."""
    noise = noise or NoiseConfig.zero()
    duration = speed.duration
    end_s = start_s + float(speed.distance_at(duration))
    if end_s > track.total_length - 1.0:
        raise InvalidArgumentError(
            f"speed profile travels to s={end_s:.1f} m but the track ends at "
            f"{track.total_length:.1f} m; extend the layout"
        )
    world = World(track, scene)
    rng = np.random.default_rng(seed)
    g = gravity_vector()
    h = _STENCIL_H

    # --- IMU (200 Hz): 5-point stencils on the analytic pose -------------
    t_imu = np.arange(0.0, duration + 1e-12, 1.0 / IMU_RATE_HZ)
    st = _stencil(track, speed, start_s, rig.body_height, t_imu)
    (pm2, qm2), (pm1, qm1), (p0, q0), (pp1, qp1), (pp2, qp2) = st
    qdot = (-qp2 + 8.0 * qp1 - 8.0 * qm1 + qm2) / (12.0 * h)
    omega_body = 2.0 * quat_multiply(quat_conjugate(q0), qdot)[..., 1:]
    pddot = (-pp2 + 16.0 * pp1 - 30.0 * p0 + 16.0 * pm1 - pm2) / (12.0 * h * h)
    R0 = quat_to_matrix(q0)
    accel_body = np.einsum("nij,nj->ni", R0.transpose(0, 2, 1), pddot + g)

    n_imu = len(t_imu)
    dt_imu = 1.0 / IMU_RATE_HZ
    ba = noise.accel_bias + np.cumsum(
        rng.standard_normal((n_imu, 3)) * noise.accel_bias_walk * np.sqrt(dt_imu), axis=0
    )
    bg = noise.gyro_bias + np.cumsum(
        rng.standard_normal((n_imu, 3)) * noise.gyro_bias_walk * np.sqrt(dt_imu), axis=0
    )
    imu_accel = accel_body + ba + rng.standard_normal((n_imu, 3)) * noise.accel_sigma
    imu_gyro = omega_body + bg + rng.standard_normal((n_imu, 3)) * noise.gyro_sigma
    imu_t_ns = np.round(t_imu * NS_PER_S).astype(np.int64)

    # --- wheel odometer (100 Hz): signed speed of the wheel contact point -
    t_odo = np.arange(0.0, duration + 1e-12, 1.0 / ODOM_RATE_HZ)
    sto = _stencil(track, speed, start_s, rig.body_height, t_odo)
    arm = rig.odom_lever_arm
    pw = [p + quat_rotate(q, arm) for p, q in sto]
    pw_dot = (-pw[4] + 8.0 * pw[3] - 8.0 * pw[1] + pw[0]) / (12.0 * h)
    fwd_axis = quat_rotate(sto[2][1], quat_rotate(rig.odom_rotation.q, np.array([1.0, 0.0, 0.0])))
    v_true = np.einsum("ni,ni->n", pw_dot, fwd_axis)
    odom_speed = v_true / noise.odom_scale + rng.standard_normal(len(t_odo)) * noise.odom_sigma
    odom_t_ns = np.round(t_odo * NS_PER_S).astype(np.int64)

    # --- GNSS (1 Hz): antenna position + per-axis white noise -------------
    t_gnss = np.arange(0.0, duration + 1e-12, 1.0 / GNSS_RATE_HZ)
    pg, qg = _body_poses(track, speed, start_s, rig.body_height, t_gnss)
    antenna = pg + quat_rotate(qg, rig.gnss_lever_arm)
    gnss_pos = antenna + rng.standard_normal((len(t_gnss), 3)) * noise.gnss_sigma
    gnss_t_ns = np.round(t_gnss * NS_PER_S).astype(np.int64)
    gnss_sigma = np.tile(noise.gnss_sigma, (len(t_gnss), 1))

    # --- LiDAR (10 Hz, per-point times, per-point ray origins) ------------
    frame_period_ns = int(round(NS_PER_S / LIDAR_RATE_HZ))
    lidar_frames = {}
    for lidar_id in sorted(rig.lidars):
        spec = rig.lidars[lidar_id]
        dirs_s, line = _sensor_directions(spec)
        n_pts = len(dirs_s)
        dt_pt_ns = FRAME_SPAN_S * NS_PER_S / n_pts
        offs_ns = (np.arange(n_pts) * dt_pt_ns).astype(np.int64)
        frames = []
        k = 0
        while True:
            start_ns = k * frame_period_ns + spec.start_offset_ns
            if (start_ns + FRAME_SPAN_S * NS_PER_S) / NS_PER_S > duration:
                break
            t_pts_ns = start_ns + offs_ns
            t_pts = t_pts_ns / NS_PER_S
            pb, qb = _body_poses(track, speed, start_s, rig.body_height, t_pts)
            Rb = quat_to_matrix(qb)
            T_ext = spec.extrinsic_at(start_ns)
            origins = pb + np.einsum("nij,j->ni", Rb, T_ext.t)
            dirs_b = dirs_s @ quat_to_matrix(T_ext.q).T
            dirs_w = np.einsum("nij,nj->ni", Rb, dirs_b)
            s_now = start_s + float(speed.distance_at(start_ns / NS_PER_S))
            window = (s_now - spec.max_range - 15.0, s_now + spec.max_range + 15.0)
            hit, ranges, _, inten = world.raycast(origins, dirs_w, spec.max_range, window)
            ranges = ranges + rng.standard_normal(n_pts) * noise.lidar_range_sigma
            if np.any(hit):
                pts_sensor = dirs_s[hit] * ranges[hit, None]
                frames.append(
                    LidarFrame(
                        lidar_id=lidar_id,
                        frame_start_ns=int(start_ns),
                        t_ns=t_pts_ns[hit],
                        points=pts_sensor,
                        intensity=inten[hit],
                        line_id=line[hit],
                    )
                )
            k += 1
        lidar_frames[lidar_id] = frames

    # --- reference trajectory for evaluation ------------------------------
    t_ref = np.arange(0.0, duration + 1e-12, 0.01)
    p_ref, q_ref = _body_poses(track, speed, start_s, rig.body_height, t_ref)
    switches = [
        (lid, t_ns, T)
        for lid, spec in sorted(rig.lidars.items())
        for t_ns, T in spec.extrinsic_timeline
    ]
    gt = GroundTruth(
        track=track,
        speed=speed,
        rig=rig,
        start_s=start_s,
        traj_t_ns=np.round(t_ref * NS_PER_S).astype(np.int64),
        traj_p=p_ref,
        traj_q=quat_normalize(q_ref),
        accel_bias=ba,
        gyro_bias=bg,
        odom_scale=noise.odom_scale,
        extrinsic_switches=switches,
    )
    return SimDataset(
        imu_t_ns=imu_t_ns,
        imu_accel=imu_accel,
        imu_gyro=imu_gyro,
        odom_t_ns=odom_t_ns,
        odom_speed=odom_speed,
        gnss_t_ns=gnss_t_ns,
        gnss_pos=gnss_pos,
        gnss_sigma=gnss_sigma,
        lidar_frames=lidar_frames,
        rig=rig,
        world=world,
        ground_truth=gt,
    )


def inject_extrinsic_drift(
    rig: SensorRig, lidar_id: int, at_ns: int, perturbation: RigidTransform
) -> SensorRig:
    """Return a rig whose LiDAR `lidar_id` switches to a perturbed mount at `at_ns`.

    The perturbation composes on the sensor side (mount moves under the
    sensor), so every post-switch scan of a fixed landmark shifts by the
    inverse perturbation in the sensor frame.
    """
    if lidar_id == PRIMARY_LIDAR_ID:
        raise PrimaryImmutableError(
            "LiDAR 1 defines the body frame; its extrinsic cannot drift"
        )
    if lidar_id not in rig.lidars:
        raise InvalidArgumentError(f"rig has no LiDAR {lidar_id}")
    spec = rig.lidars[lidar_id]
    base = spec.extrinsic_at(int(at_ns))
    new_spec = replace(
        spec,
        extrinsic_timeline=sorted(
            spec.extrinsic_timeline + [(int(at_ns), base.compose(perturbation))],
            key=lambda entry: entry[0],
        ),
    )
    lidars = dict(rig.lidars)
    lidars[lidar_id] = new_spec
    return replace(rig, lidars=lidars)
