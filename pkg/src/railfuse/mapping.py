"""Submap construction, GNSS-initialized fallback registration, submap-to-
submap alignment, and global map export.

Keyframes carry merged body-frame clouds; a submap accumulates up to ten of
them (one second of 10 Hz keyframes), voxel-downsampled to 0.2 m in the world
frame. Sealed submaps are chained by NDT alignment seeded from GNSS-anchored
relative poses, and the global map is exported as ASCII points tagged with
intensity, LiDAR id, and submap id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyMapError,
    InsufficientOverlapError,
    InsufficientStructureError,
    InvalidArgumentError,
    RejectedKeyframeError,
)
from .frontend import voxel_downsample
from .geometry import RigidTransform
from .registration import _ndt_cells, icp_register, ndt_register

SUBMAP_KEYFRAMES = 10
SUBMAP_VOXEL = 0.2
MAP_HEADER = "# railfuse-map v1"


@dataclass
class Keyframe:
    """One estimator keyframe with its merged body-frame cloud."""

    stamp_ns: int
    pose: RigidTransform            # body -> world
    cloud: np.ndarray               # (N, 3) body frame
    intensity: np.ndarray | None = None
    lidar_ids: np.ndarray | None = None

    def __post_init__(self):
        self.cloud = np.asarray(self.cloud, dtype=np.float64).reshape(-1, 3)
        n = len(self.cloud)
        if self.intensity is None:
            self.intensity = np.zeros(n)
        if self.lidar_ids is None:
            self.lidar_ids = np.ones(n, dtype=np.int64)


@dataclass
class Submap:
    """Up to ten time-ordered keyframes and their accumulated world cloud."""

    submap_id: int
    keyframes: list = field(default_factory=list)
    sealed: bool = False

    @property
    def anchor_pose(self) -> RigidTransform:
        if not self.keyframes:
            raise InvalidArgumentError("empty submap has no anchor")
        return self.keyframes[0].pose

    @property
    def start_ns(self) -> int:
        return self.keyframes[0].stamp_ns

    def world_cloud(self, voxel: float = SUBMAP_VOXEL):
        """(points, intensity, lidar_ids) in world frame, downsampled."""
        pts = np.vstack([k.pose.apply(k.cloud) for k in self.keyframes])
        inten = np.concatenate([k.intensity for k in self.keyframes])
        ids = np.concatenate([k.lidar_ids for k in self.keyframes])
        return voxel_downsample(pts, voxel, inten, ids)


def submap_insert(submap: Submap, keyframe: Keyframe):
    """Append a keyframe; on the 11th the submap seals and a new one opens.

    Returns (active_submap, sealed_submap_or_None). A keyframe stamped at or
    before the submap's newest raises RejectedKeyframeError.
    """
    if submap.sealed:
        raise InvalidArgumentError("cannot insert into a sealed submap")
    if submap.keyframes and keyframe.stamp_ns <= submap.keyframes[-1].stamp_ns:
        raise RejectedKeyframeError(
            f"keyframe at {keyframe.stamp_ns} not after {submap.keyframes[-1].stamp_ns}"
        )
    if len(submap.keyframes) < SUBMAP_KEYFRAMES:
        submap.keyframes.append(keyframe)
        return submap, None
    submap.sealed = True
    fresh = Submap(submap_id=submap.submap_id + 1, keyframes=[keyframe])
    return fresh, submap


@dataclass
class FallbackResult:
    pose: RigidTransform
    corrected: bool
    flag: str = ""


def scan_to_map_fallback(
    frame_cloud: np.ndarray,
    submap: Submap,
    gnss_position: np.ndarray | None,
    last_orientation: np.ndarray,
    diverged_pose: RigidTransform,
) -> FallbackResult:
    """GNSS-initialized ICP recovery for a frame the estimator failed on.

    The body-frame cloud is registered against the current submap's world
    cloud, starting from the GNSS position with the last good orientation.
    The ICP pose replaces the diverged one only when its inlier RMS beats the
    diverged pose's; without a GNSS fix the prediction is held and flagged.
    """
    if gnss_position is None:
        return FallbackResult(diverged_pose, False, "no-gnss-fix")
    if not submap.keyframes:
        return FallbackResult(diverged_pose, False, "empty-submap")
    target, _, _ = submap.world_cloud()
    guess = RigidTransform(last_orientation, np.asarray(gnss_position, dtype=np.float64))
    try:
        result = icp_register(frame_cloud, target, initial_guess=guess)
    except (InsufficientOverlapError, InvalidArgumentError) as exc:
        return FallbackResult(diverged_pose, False, f"icp-failed: {exc}")
    if _cloud_fitness(frame_cloud, target, result.transform) < _cloud_fitness(
        frame_cloud, target, diverged_pose
    ):
        return FallbackResult(result.transform, True)
    return FallbackResult(diverged_pose, False, "icp-worse-than-estimate")


def _cloud_fitness(cloud: np.ndarray, target: np.ndarray, pose: RigidTransform) -> float:
    """Inlier RMS point distance of the posed cloud against the target."""
    from scipy.spatial import cKDTree

    dist, _ = cKDTree(target).query(pose.apply(cloud))
    inliers = dist[dist < 1.0]
    if len(inliers) < max(10, len(cloud) // 10):
        return np.inf
    return float(np.sqrt(np.mean(inliers**2)))


@dataclass
class AlignmentResult:
    pose: RigidTransform            # corrected anchor pose of the new submap
    accepted: bool
    flag: str = ""


def submap_to_submap_align(
    submap: Submap,
    previous: Submap,
    anchor_pose: RigidTransform,
) -> AlignmentResult:
    """NDT alignment of a sealed submap against its sealed predecessor.

    ``anchor_pose`` is the GNSS-anchored world pose of the new submap's
    anchor keyframe (the initial guess). The NDT correction is accepted only
    when it improves the match score over that guess; degenerate structure
    keeps the anchored pose.
    """
    if not (submap.sealed and previous.sealed):
        raise InvalidArgumentError("both submaps must be sealed")
    target, _, _ = previous.world_cloud()
    # express the new submap's cloud in world through the anchored guess
    rel = anchor_pose.compose(submap.anchor_pose.inverse())
    source, _, _ = submap.world_cloud()
    source = rel.apply(source)
    grid = _ndt_cells(target, 1.0, 6)
    if len(grid) < 10:
        return AlignmentResult(anchor_pose, False, "insufficient-structure")
    initial_score = grid.score(source)
    try:
        result = ndt_register(source, target)
    except InsufficientStructureError:
        return AlignmentResult(anchor_pose, False, "insufficient-structure")
    if result.cost < initial_score:
        return AlignmentResult(result.transform.compose(anchor_pose), True)
    return AlignmentResult(anchor_pose, False, "score-not-improved")


@dataclass
class GlobalMap:
    """Time-ordered sealed submaps in a shared world frame."""

    submaps: list = field(default_factory=list)

    def add(self, submap: Submap):
        if not submap.sealed:
            raise InvalidArgumentError("only sealed submaps enter the global map")
        if any(s.submap_id == submap.submap_id for s in self.submaps):
            raise InvalidArgumentError(f"submap {submap.submap_id} already registered")
        if self.submaps and submap.start_ns <= self.submaps[-1].start_ns:
            raise InvalidArgumentError("submap anchors must be time-ordered")
        self.submaps.append(submap)


def export_map(global_map: GlobalMap, path) -> int:
    """Write the global map as ASCII points; returns the point count.

    Format: header line ``# railfuse-map v1`` then one point per line,
    ``x y z intensity lidar_id submap_id`` space-separated with coordinates
    at 6 decimals, LF line endings.
    """
    if not global_map.submaps:
        raise EmptyMapError("no sealed submaps to export")
    count = 0
    with open(path, "w", newline="\n") as fh:
        fh.write(MAP_HEADER + "\n")
        for submap in global_map.submaps:
            pts, inten, ids = submap.world_cloud()
            for (x, y, z), it, lid in zip(pts, inten, ids):
                fh.write(
                    f"{x:.6f} {y:.6f} {z:.6f} {it:.1f} {int(lid)} {submap.submap_id}\n"
                )
            count += len(pts)
    return count


def load_map(path):
    """Read a map file back: (points, intensity, lidar_ids, submap_ids)."""
    with open(path) as fh:
        header = fh.readline().strip()
        if header != MAP_HEADER:
            raise InvalidArgumentError(f"unrecognized map header: {header!r}")
        rows = np.loadtxt(fh, ndmin=2)
    if rows.size == 0:
        rows = rows.reshape(0, 6)
    return rows[:, :3], rows[:, 3], rows[:, 4].astype(int), rows[:, 5].astype(int)
