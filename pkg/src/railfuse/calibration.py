"""Online extrinsic refinement for the secondary LiDARs.

Each LiDAR accumulates a submap of its raw returns in its *own* coordinate
frame at a common reference time: every frame is carried through
``(ref_pose ∘ E)⁻¹ ∘ pose(t) ∘ E`` with the current extrinsic ``E``. For a
slowly moving vehicle this construction is nearly independent of errors in
``E`` (exactly independent when stationary), so aligning a secondary submap
to the primary one with ICP — seeded with the current relative extrinsic —
directly measures the true sensor-to-primary transform ``A ≈ E₁⁻¹ Eᵢ`` and
the extrinsic updates as ``Eᵢ ← E₁ ∘ A``. The primary LiDAR (id 1) anchors
the rig and is never modified; the upward-facing LiDAR 7 is refined last,
against the already-corrected union of the others, because it shares no
field of view with the primary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    InsufficientOverlapError,
    InvalidArgumentError,
    SubmapTooSparseError,
)
from .frontend import voxel_downsample
from .geometry import (
    RigidTransform,
    quat_conjugate,
    quat_multiply,
    quat_rotate,
    so3_log,
)
from .registration import gicp_register

PRIMARY_LIDAR_ID = 1
SUBMAP_VOXEL = 0.1
MIN_SUBMAP_POINTS = 50_000
FIELD_TRIGGER_INTERVAL_NS = 4 * 3600 * 1_000_000_000  # documented field default
DESK_TRIGGER_INTERVAL_NS = 60 * 1_000_000_000
SECONDARY_WINDOW_NS = 1_200_000_000  # secondary accumulation span per round
OVERLAP_CROP = 0.5                   # m; drops points outside the shared view
CONVERGED_ROTATION_DEG = 0.1         # corrections below this deadband are
CONVERGED_TRANSLATION = 0.01         # treated as converged and not applied


def should_trigger(elapsed_ns: int, interval_ns: int = DESK_TRIGGER_INTERVAL_NS) -> bool:
    """True once the time since the last refinement reaches the interval."""
    if interval_ns <= 0:
        raise InvalidArgumentError("trigger interval must be positive")
    return int(elapsed_ns) >= int(interval_ns)


@dataclass
class LidarSubmap:
    """Accumulated raw returns of one LiDAR in its own frame at a reference time."""

    lidar_id: int
    cloud: np.ndarray
    start_ns: int
    end_ns: int
    reference_pose: RigidTransform = field(default_factory=RigidTransform.identity)

    @property
    def count(self) -> int:
        return len(self.cloud)


@dataclass
class ExtrinsicEstimate:
    lidar_id: int
    transform: RigidTransform       # sensor -> body
    last_refined_ns: int = 0
    converged: bool = False
    flag: str = ""


def _deskew_frame(frame, pose_at, extrinsic: RigidTransform) -> np.ndarray:
    """World-frame points of one frame under a constant-twist sweep model.

    Looks up the body pose at the first and last point timestamps and
    interpolates in between (linear translation, geodesic rotation), so the
    cost is two pose queries per frame instead of one per point.
    """
    t = np.asarray(frame.t_ns, dtype=np.int64)
    t0, t1 = int(t.min()), int(t.max())
    pose0 = pose_at(t0)
    q0 = np.asarray(pose0.q, dtype=np.float64).reshape(4)
    p0 = np.asarray(pose0.t, dtype=np.float64).reshape(3)
    local = quat_rotate(extrinsic.q, frame.points) + extrinsic.t
    if t1 == t0:
        return quat_rotate(q0, local) + p0
    pose1 = pose_at(t1)
    q1 = np.asarray(pose1.q, dtype=np.float64).reshape(4)
    p1 = np.asarray(pose1.t, dtype=np.float64).reshape(3)
    alpha = (t - t0) / float(t1 - t0)
    rotvec = so3_log(quat_multiply(quat_conjugate(q0), q1))
    angle = np.linalg.norm(rotvec)
    axis = rotvec / angle if angle > 0.0 else np.zeros(3)
    half = 0.5 * alpha * angle
    q_rel = np.concatenate(
        [np.cos(half)[:, None], np.sin(half)[:, None] * axis[None, :]], axis=1
    )
    q_t = quat_multiply(q0[None, :], q_rel)
    p_t = p0[None, :] + alpha[:, None] * (p1 - p0)[None, :]
    return quat_rotate(q_t, local) + p_t


def build_lidar_submap(
    frames,
    pose_at,
    extrinsic: RigidTransform,
    reference_pose: RigidTransform,
    voxel: float = SUBMAP_VOXEL,
    min_points: int = MIN_SUBMAP_POINTS,
) -> LidarSubmap:
    """Accumulate one LiDAR's frames into its own frame at the reference time.

    ``frames`` are the raw (pre-merge) frames of a single LiDAR; ``pose_at``
    maps a frame-start timestamp to the estimator body pose. Points map
    through (reference_pose ∘ extrinsic)⁻¹ ∘ pose(t) ∘ extrinsic, then
    downsample. At the reference time itself this is the identity, so the
    submap stays in raw sensor coordinates and an error in ``extrinsic``
    only smears the accumulation in proportion to the distance travelled.
    """
    if not frames:
        raise SubmapTooSparseError("no frames to accumulate")
    ref_inv = reference_pose.compose(extrinsic).inverse()
    parts = []
    for f in frames:
        # de-skew: two pose lookups per frame, then per-point interpolation
        # (constant-twist motion over one sweep; exact on straight track and
        # sub-millimetre on curves at rail speeds)
        parts.append(ref_inv.apply(_deskew_frame(f, pose_at, extrinsic)))
    cloud = np.vstack(parts)
    cloud, = voxel_downsample(cloud, voxel)
    if len(cloud) < min_points:
        raise SubmapTooSparseError(
            f"LiDAR {frames[0].lidar_id}: {len(cloud)} points after downsampling"
        )
    return LidarSubmap(
        lidar_id=frames[0].lidar_id,
        cloud=cloud,
        start_ns=frames[0].frame_start_ns,
        end_ns=frames[-1].frame_start_ns,
        reference_pose=reference_pose,
    )


def build_lidar_submaps(
    frames_by_lidar: dict,
    pose_at,
    extrinsics: dict,
    voxel: float = SUBMAP_VOXEL,
    min_points: int = MIN_SUBMAP_POINTS,
    window_ns: int | None = None,
) -> dict:
    """Per-LiDAR submaps, each referenced to the pose at its first used frame.

    The primary always accumulates all of its frames (wide, drift-free
    coverage); when ``window_ns`` is given each secondary only accumulates
    its trailing ``window_ns`` of frames, which keeps the smear caused by an
    erroneous extrinsic proportional to that short span. LiDARs without
    enough points are skipped (not an error for the round).
    """
    if PRIMARY_LIDAR_ID not in frames_by_lidar or not frames_by_lidar[PRIMARY_LIDAR_ID]:
        raise InvalidArgumentError("primary LiDAR frames required to anchor calibration")
    submaps = {}
    for lid in sorted(frames_by_lidar):
        frames = frames_by_lidar[lid]
        if not frames:
            continue
        if window_ns is not None and lid != PRIMARY_LIDAR_ID:
            cutoff = frames[-1].frame_start_ns - int(window_ns)
            frames = [f for f in frames if f.frame_start_ns >= cutoff]
        reference_pose = pose_at(frames[0].frame_start_ns)
        try:
            submaps[lid] = build_lidar_submap(
                frames, pose_at, extrinsics[lid],
                reference_pose, voxel, min_points,
            )
        except SubmapTooSparseError:
            continue
    return submaps


def refine_extrinsics(
    submaps: dict,
    estimates: dict,
    fitness_rms: float = 0.1,
    max_rotation_deg: float = 5.0,
    max_translation: float = 0.3,
    now_ns: int = 0,
) -> dict:
    """Align each secondary submap to the primary's and update its extrinsic.

    The submaps live in their own sensor frames with known reference body
    poses R, so the true alignment is A = (R₁E₁)⁻¹(RᵢEᵢ) and the current
    extrinsic provides the initial guess. After registration the extrinsic
    updates as Eᵢ ← Rᵢ⁻¹ R₁ E₁ A. Returns a new dict of ExtrinsicEstimates.
    An update is accepted only when the aligned inlier RMS is below
    ``fitness_rms`` and the correction stays inside the sanity bounds;
    otherwise the previous extrinsic is kept and the estimate flagged.
    LiDAR 7 is refined last against the union of the primary and the
    already-corrected submaps.
    """
    if PRIMARY_LIDAR_ID not in submaps:
        raise InvalidArgumentError("primary submap unavailable")
    if PRIMARY_LIDAR_ID not in estimates:
        raise InvalidArgumentError("primary extrinsic estimate required")

    out = {lid: ExtrinsicEstimate(lid, est.transform, est.last_refined_ns, est.converged, est.flag)
           for lid, est in estimates.items()}
    primary = out[PRIMARY_LIDAR_ID].transform
    anchor = submaps[PRIMARY_LIDAR_ID].reference_pose.compose(primary)
    anchor_inv = anchor.inverse()
    target_parts = [submaps[PRIMARY_LIDAR_ID].cloud]

    order = [lid for lid in sorted(submaps) if lid not in (PRIMARY_LIDAR_ID, 7)]
    if 7 in submaps:
        order.append(7)
    for lid in order:
        if lid not in out:
            raise InvalidArgumentError(f"no current extrinsic for LiDAR {lid}")
        target = np.vstack(target_parts)
        est = out[lid]
        ref = submaps[lid].reference_pose
        guess = anchor_inv.compose(ref).compose(est.transform)
        try:
            result, rms = _align_submap(submaps[lid].cloud, target, guess)
        except (InsufficientOverlapError, InvalidArgumentError) as exc:
            est.converged = False
            est.flag = f"alignment-failed: {exc}"
            continue
        refined = ref.inverse().compose(anchor).compose(result)
        correction = refined.compose(est.transform.inverse())
        rot = np.degrees(np.linalg.norm(correction.rotvec()))
        trans = float(np.linalg.norm(correction.t))
        if rms > fitness_rms or rot > max_rotation_deg or trans > max_translation:
            est.converged = False
            est.flag = (
                f"rejected: rms={rms:.3f} rot={rot:.2f}deg trans={trans:.3f}m"
            )
            continue
        est.converged = rot < CONVERGED_ROTATION_DEG and trans < CONVERGED_TRANSLATION
        if not est.converged:
            # deadband: corrections below the registration noise floor are
            # not applied, so a calibrated rig is left exactly unchanged
            est.transform = refined
        est.last_refined_ns = now_ns
        est.flag = ""
        target_parts.append(result.apply(submaps[lid].cloud))
    return out


def _align_submap(
    source: np.ndarray,
    target: np.ndarray,
    guess: RigidTransform,
    crop: float = OVERLAP_CROP,
) -> tuple:
    """Symmetric plane-to-plane alignment of partially overlapping submaps.

    Both clouds are cropped to the mutually visible region (their fields of
    view differ), then registered in both directions and the two results
    geodesically averaged: the nearest-neighbour sampling bias of two sparse
    scans of the same surface is antisymmetric in the match direction, so
    the average cancels most of it. Returns (transform, inlier RMS).
    """
    moved = guess.apply(source)
    dist, _ = cKDTree(target).query(moved)
    src = source[dist < crop]
    if len(src) < 100:
        raise InsufficientOverlapError("too little field-of-view overlap")
    dist_t, _ = cKDTree(guess.apply(src)).query(target)
    tgt = target[dist_t < crop]
    forward = gicp_register(src, tgt, initial_guess=guess).transform
    backward = gicp_register(tgt, src, initial_guess=guess.inverse()).transform
    delta = backward.inverse().compose(forward.inverse())
    half = RigidTransform.from_rotvec(0.5 * delta.rotvec(), 0.5 * delta.t)
    transform = half.compose(forward)
    rms = _inlier_rms(transform.apply(src), tgt)
    return transform, rms


def _inlier_rms(cloud: np.ndarray, target: np.ndarray, radius: float = 0.5,
                k: int = 8) -> float:
    """RMS point-to-plane distance against local plane fits in the target.

    Point-to-point residuals never drop below the target's sampling pitch,
    which varies with range; the distance to a plane through the nearest
    neighbourhood measures the actual surface misalignment instead.
    """
    tree = cKDTree(target)
    dist, _ = tree.query(cloud)
    inlier = dist < radius
    if inlier.sum() < max(10, len(cloud) // 10):
        return np.inf
    pts = cloud[inlier]
    _, nidx = tree.query(pts, k=k)
    neigh = target[nidx]                      # (n, k, 3)
    centroid = neigh.mean(axis=1)
    centered = neigh - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normal = vecs[:, :, 0]
    plane_dist = np.abs(np.einsum("ni,ni->n", pts - centroid, normal))
    return float(np.sqrt(np.mean(plane_dist**2)))


def run_calibration_round(
    frames_by_lidar: dict,
    pose_at,
    estimates: dict,
    window_ns: int = SECONDARY_WINDOW_NS,
    max_passes: int = 4,
    voxel: float = SUBMAP_VOXEL,
    min_points: int = MIN_SUBMAP_POINTS,
    now_ns: int = 0,
    **gates,
) -> tuple:
    """One triggered refinement round: iterate build + align to a fixed point.

    A submap built with a wrong extrinsic is smeared along the trajectory,
    so a single alignment recovers most but not all of the error; repeating
    the build with the updated extrinsic shrinks the smear geometrically.
    Secondary submaps are rebuilt each pass, the primary only once. Returns
    (estimates, history) where history records (now_ns, lidar_id, transform)
    after every pass for the convergence export.
    """
    if PRIMARY_LIDAR_ID not in frames_by_lidar or not frames_by_lidar[PRIMARY_LIDAR_ID]:
        raise InvalidArgumentError("primary LiDAR frames required to anchor calibration")
    primary_frames = frames_by_lidar[PRIMARY_LIDAR_ID]
    primary_submap = build_lidar_submap(
        primary_frames, pose_at, estimates[PRIMARY_LIDAR_ID].transform,
        pose_at(primary_frames[0].frame_start_ns), voxel, min_points,
    )
    history = []
    for _ in range(max_passes):
        submaps = {PRIMARY_LIDAR_ID: primary_submap}
        for lid in sorted(frames_by_lidar):
            if lid == PRIMARY_LIDAR_ID:
                continue
            frames = frames_by_lidar[lid]
            if not frames:
                continue
            cutoff = frames[-1].frame_start_ns - int(window_ns)
            frames = [f for f in frames if f.frame_start_ns >= cutoff]
            try:
                submaps[lid] = build_lidar_submap(
                    frames, pose_at, estimates[lid].transform,
                    pose_at(frames[0].frame_start_ns), voxel, min_points,
                )
            except SubmapTooSparseError:
                continue
        estimates = refine_extrinsics(submaps, estimates, now_ns=now_ns, **gates)
        for lid in sorted(estimates):
            if lid != PRIMARY_LIDAR_ID:
                history.append((now_ns, lid, estimates[lid].transform))
        if all(est.converged or est.flag
               for lid, est in estimates.items() if lid != PRIMARY_LIDAR_ID):
            break
    return estimates, history


def export_extrinsic_history(records, path) -> None:
    """Write refinement history: ``t_ns lidar_id tx ty tz qw qx qy qz``."""
    with open(path, "w", newline="\n") as fh:
        fh.write("# t_ns lidar_id tx ty tz qw qx qy qz\n")
        for t_ns, lid, T in records:
            t = T.t
            q = T.q
            fh.write(
                f"{int(t_ns)} {int(lid)} "
                f"{t[0]:.6f} {t[1]:.6f} {t[2]:.6f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n"
            )
