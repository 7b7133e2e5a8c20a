"""Sensor rig description: LiDAR mounts, FoVs and lever arms.

LiDAR ids follow the vehicle installation convention: 1-2 front-view,
3-6 side-view, 7 up-view. LiDAR 1 is the primary unit and its frame is the
body frame (identity extrinsic by definition). Extrinsics of the secondaries
may change over time (drift injection), so each carries a timeline of
``(switch_time_ns, transform)`` entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from railfuse.errors import InvalidArgumentError, PrimaryImmutableError
from railfuse.geometry import RigidTransform

PRIMARY_LIDAR_ID = 1


@dataclass
class LidarSpec:
    lidar_id: int
    extrinsic: RigidTransform          # lidar -> body at t=0
    fov_h_deg: float
    fov_v_deg: float
    max_range: float
    n_azimuth: int = 96
    n_elevation: int = 16
    start_offset_ns: int = 0           # frame-start delay vs the primary
    extrinsic_timeline: list = field(default_factory=list)  # [(t_ns, T), ...]

    def extrinsic_at(self, t_ns: int) -> RigidTransform:
        T = self.extrinsic
        for switch_ns, Tnew in self.extrinsic_timeline:
            if t_ns >= switch_ns:
                T = Tnew
        return T


@dataclass
class SensorRig:
    lidars: dict                        # id -> LidarSpec
    imu_lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    odom_lever_arm: np.ndarray = field(default_factory=lambda: np.array([-1.0, 0.0, -1.5]))
    odom_rotation: RigidTransform = field(default_factory=RigidTransform.identity)
    gnss_lever_arm: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    body_height: float = 2.0            # body origin above the bed plane, m

    def __post_init__(self):
        ids = sorted(self.lidars)
        if len(set(ids)) != len(ids) or any(i < 1 or i > 7 for i in ids):
            raise InvalidArgumentError("LiDAR ids must be unique and within 1..7")
        if PRIMARY_LIDAR_ID not in self.lidars:
            raise InvalidArgumentError("rig must include the primary LiDAR (id 1)")
        self.imu_lever_arm = np.asarray(self.imu_lever_arm, dtype=np.float64)
        self.odom_lever_arm = np.asarray(self.odom_lever_arm, dtype=np.float64)
        self.gnss_lever_arm = np.asarray(self.gnss_lever_arm, dtype=np.float64)

    @property
    def lidar_ids(self):
        return sorted(self.lidars)

    def extrinsic_at(self, lidar_id: int, t_ns: int) -> RigidTransform:
        return self.lidars[lidar_id].extrinsic_at(t_ns)


def _yaw_pitch(yaw_deg: float, pitch_deg: float, t) -> RigidTransform:
    """Mount orientation from yaw about z then pitch about the new y."""
    yaw = RigidTransform.from_rotvec([0, 0, np.deg2rad(yaw_deg)])
    pitch = RigidTransform.from_rotvec([0, np.deg2rad(pitch_deg), 0])
    T = yaw.compose(pitch)
    return RigidTransform(T.q, np.asarray(t, dtype=np.float64))


def default_rig(lidar_ids=(1, 2, 3, 4, 7), dense: bool = False) -> SensorRig:
    """Desk-scale seven-LiDAR rig (a subset keeps runs fast).

    Front units look slightly down so the track bed and rails stay in view;
    side units look outward at the pylon corridor; the up unit is pitched
    +40° for overhead structure.
    """
    k = 1.5 if dense else 1.0
    specs = {
        1: LidarSpec(1, _yaw_pitch(0, 8, [2.0, 0.0, -0.3]), 81.7, 25.1, 80.0,
                     int(160 * k), int(24 * k), 0),
        2: LidarSpec(2, _yaw_pitch(0, 8, [1.8, -0.5, -0.2]), 81.7, 25.1, 80.0,
                     int(128 * k), int(20 * k), 13_000_000),
        3: LidarSpec(3, _yaw_pitch(90, 0, [0.5, 0.8, 0.0]), 81.7, 25.1, 60.0,
                     int(64 * k), int(12 * k), 27_000_000),
        4: LidarSpec(4, _yaw_pitch(-90, 0, [0.5, -0.8, 0.0]), 81.7, 25.1, 60.0,
                     int(64 * k), int(12 * k), 41_000_000),
        5: LidarSpec(5, _yaw_pitch(90, 0, [-0.5, 0.8, 0.3]), 14.5, 16.2, 100.0,
                     int(32 * k), int(12 * k), 8_000_000),
        6: LidarSpec(6, _yaw_pitch(-90, 0, [-0.5, -0.8, 0.3]), 14.5, 16.2, 100.0,
                     int(32 * k), int(12 * k), 19_000_000),
        7: LidarSpec(7, _yaw_pitch(0, -40, [0.0, 0.0, 0.5]), 81.7, 25.1, 60.0,
                     int(64 * k), int(12 * k), 33_000_000),
    }
    return SensorRig({i: specs[i] for i in lidar_ids})
