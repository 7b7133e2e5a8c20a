"""Per-LiDAR preprocessing and multi-LiDAR fusion front end.

Stages: close-point removal, motion compensation against a short-horizon
pose interpolation, time-window synchronization and merge into the primary
LiDAR frame, curvature-based edge/planar feature extraction per scan line,
and rail-track / track-bed plane extraction for forward-view units.

All thresholds live in :class:`FrontendConfig`; the extraction procedures
never synthesize coordinates — every output point is an input point, except
for the rigid transforms applied during compensation and merging.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from railfuse.errors import (
    CoverageGapError,
    InvalidArgumentError,
    NoPrimaryFrameError,
    NoRailsError,
    UnreliablePlaneError,
)
from railfuse.geometry import (
    PoseInterpolator,
    RigidTransform,
    quat_conjugate,
    quat_rotate,
)

MAX_FRAME_SPAN_NS = 110_000_000  # per-point stamps must fall in [start, start+0.11 s)


@dataclass
class LidarScan:
    """One LiDAR sweep; points in the emitting sensor's frame unless merged."""

    lidar_id: int
    frame_start_ns: int
    points: np.ndarray      # (N, 3)
    intensity: np.ndarray   # (N,)
    t_ns: np.ndarray        # (N,) per-point capture times
    line_id: np.ndarray     # (N,) scan-line index
    source_id: np.ndarray | None = None  # per-point origin LiDAR (set by merge)

    def __post_init__(self):
        if not 1 <= self.lidar_id <= 7:
            raise InvalidArgumentError(f"invalid LiDAR id {self.lidar_id}")
        n = len(self.points)
        if any(len(a) != n for a in (self.intensity, self.t_ns, self.line_id)):
            raise InvalidArgumentError("scan arrays must have equal length")
        if n and (
            np.min(self.t_ns) < self.frame_start_ns
            or np.max(self.t_ns) >= self.frame_start_ns + MAX_FRAME_SPAN_NS
        ):
            raise InvalidArgumentError("per-point timestamps outside the frame span")
        if self.source_id is None:
            self.source_id = np.full(n, self.lidar_id, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.points)

    def select(self, mask_or_index) -> "LidarScan":
        return LidarScan(
            self.lidar_id,
            self.frame_start_ns,
            self.points[mask_or_index],
            self.intensity[mask_or_index],
            self.t_ns[mask_or_index],
            self.line_id[mask_or_index],
            self.source_id[mask_or_index],
        )


def scan_from_frame(frame) -> LidarScan:
    """Adapt a simulator frame (or any object with the same fields) to a scan."""
    return LidarScan(
        lidar_id=frame.lidar_id,
        frame_start_ns=frame.frame_start_ns,
        points=np.asarray(frame.points, dtype=np.float64),
        intensity=np.asarray(frame.intensity, dtype=np.float64),
        t_ns=np.asarray(frame.t_ns, dtype=np.int64),
        line_id=np.asarray(frame.line_id, dtype=np.int64),
    )


@dataclass
class FeatureCloud:
    """Edge and planar features in the primary frame at frame-start time."""

    frame_start_ns: int
    edges: np.ndarray           # (E, 3)
    planars: np.ndarray         # (P, 3)
    edge_source: np.ndarray     # (E,) origin LiDAR id
    planar_source: np.ndarray   # (P,)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_planars(self) -> int:
        return len(self.planars)


@dataclass
class RailExtraction:
    """Rail lines and track-bed plane in the mount-leveled sensor frame.

    The leveled frame undoes the mount pitch and places the bed at z = 0, so
    a straight level track yields plane normal [0, 0, 1] and offset 0.
    """

    left_points: np.ndarray
    right_points: np.ndarray
    left_line: tuple            # (anchor (3,), unit direction (3,))
    right_line: tuple
    plane_normal: np.ndarray    # unit, +z hemisphere
    plane_offset: float         # n · p = d for points p on the plane
    inlier_ratio: float


@dataclass(frozen=True)
class FrontendConfig:
    min_range: float = 1.0
    voxel_leaf: float = 0.2
    # feature extraction (curvature is normalized by neighborhood² and range²,
    # which makes it range-invariant; realistic corner values are ~1e-4)
    curvature_neighborhood: int = 5       # points on each side
    edge_curvature_min: float = 1e-4
    planar_curvature_max: float = 1e-6
    occlusion_range_gap: float = 0.5      # m; range jumps mark silhouette points
    max_edges_per_sector: int = 4
    max_planars_per_sector: int = 40
    n_sectors: int = 6
    suppression_radius: int = 5           # index distance for non-max suppression
    # rail extraction
    bed_lateral_factor: float = 1.5       # gate half-width in gauges
    bed_height_slack: float = 0.3         # m above rail head still considered bed region
    strip_half_width: float = 0.25        # m around ±gauge/2
    grid_cell: float = 0.2                # m along track
    rail_head_height: float = 0.176
    rail_head_width: float = 0.07
    rail_min_candidates: int = 30
    line_ransac_threshold: float = 0.03
    line_ransac_iters: int = 200
    grow_line_distance: float = 0.05
    grow_height_tolerance: float = 0.02
    plane_ransac_threshold: float = 0.02
    plane_ransac_iters: int = 100
    min_plane_inlier_ratio: float = 0.7


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def remove_close_points(scan: LidarScan, min_range: float) -> LidarScan:
    """Drop points closer than `min_range` to the sensor; order preserved."""
    if min_range <= 0.0:
        raise InvalidArgumentError("min_range must be positive")
    if len(scan) == 0:
        return scan
    keep = np.linalg.norm(scan.points, axis=1) >= min_range
    return scan.select(keep)


def motion_compensate(scan: LidarScan, body_poses: PoseInterpolator, extrinsic: RigidTransform) -> LidarScan:
    """De-skew a sweep to the sensor pose at frame start.

    `body_poses` interpolates the body trajectory (any fixed reference frame)
    over the sweep span; each point is re-expressed in the sensor frame at
    `frame_start_ns` via the relative body motion between its capture time
    and frame start, conjugated by the sensor extrinsic.
    """
    if len(scan) == 0:
        return scan
    stamps = np.concatenate([[scan.frame_start_ns], scan.t_ns])
    if not body_poses.covers(stamps):
        raise CoverageGapError(
            f"pose interpolation [{body_poses.t_start}, {body_poses.t_end}] ns does not "
            f"cover scan span [{stamps.min()}, {stamps.max()}] ns"
        )
    p_t, q_t = body_poses.query(scan.t_ns)
    T0 = body_poses.pose_at(scan.frame_start_ns)
    # sensor@start <- body@start <- world <- body@t <- sensor@t
    q0_inv = quat_conjugate(T0.q)
    qe_inv = quat_conjugate(extrinsic.q)
    pts_body_t = quat_rotate(np.broadcast_to(extrinsic.q, (len(scan), 4)), scan.points) + extrinsic.t
    pts_world = quat_rotate(q_t, pts_body_t) + p_t
    pts_body0 = quat_rotate(np.broadcast_to(q0_inv, (len(scan), 4)), pts_world - T0.t)
    pts_sensor0 = quat_rotate(np.broadcast_to(qe_inv, (len(scan), 4)), pts_body0 - extrinsic.t)
    return replace(scan, points=pts_sensor0)


def synchronize_merge(
    primary: LidarScan | None,
    secondaries: list,
    extrinsics: dict,
    next_primary_start_ns: int,
) -> LidarScan:
    """Fuse de-skewed scans into the primary frame for one primary period.

    Includes exactly the secondary scans whose frame start falls in
    [primary start, next primary start); the fused scan inherits the primary
    LiDAR id and timestamp. `extrinsics` maps LiDAR id to its sensor-to-body
    transform; points are re-expressed relative to the primary mount.
    """
    if primary is None:
        raise NoPrimaryFrameError("no primary LiDAR scan for this period")
    t_k = primary.frame_start_ns
    T_p = extrinsics.get(primary.lidar_id, RigidTransform.identity())
    parts = [primary]
    pts = [primary.points]
    for scan in secondaries:
        if not (t_k <= scan.frame_start_ns < next_primary_start_ns):
            continue
        T_s = extrinsics.get(scan.lidar_id)
        if T_s is None:
            raise InvalidArgumentError(f"missing extrinsic for LiDAR {scan.lidar_id}")
        rel = T_p.inverse().compose(T_s)
        parts.append(scan)
        pts.append(quat_rotate(np.broadcast_to(rel.q, (len(scan), 4)), scan.points) + rel.t)
    return LidarScan(
        lidar_id=primary.lidar_id,
        frame_start_ns=t_k,
        points=np.concatenate(pts) if pts else np.zeros((0, 3)),
        intensity=np.concatenate([s.intensity for s in parts]),
        t_ns=np.clip(
            np.concatenate([s.t_ns for s in parts]), t_k, t_k + MAX_FRAME_SPAN_NS - 1
        ),
        line_id=np.concatenate([s.line_id for s in parts]),
        source_id=np.concatenate([s.source_id for s in parts]),
    )


def voxel_downsample(points: np.ndarray, leaf: float, *extras) -> tuple:
    """Keep one representative point (first seen) per cubic voxel of size leaf.

    Returns (points, *extras) filtered consistently; deterministic for a
    given input order.
    """
    if leaf <= 0.0:
        raise InvalidArgumentError("voxel leaf must be positive")
    if len(points) == 0:
        return (points, *extras)
    keys = np.floor(points / leaf).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first.sort()
    return (points[first], *(a[first] for a in extras))


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------


def _line_curvature(pts: np.ndarray, k: int, occlusion_gap: float) -> np.ndarray:
    """Curvature per point: ‖Σ_j (p_j − p_i)‖² over the ±k neighborhood,
    normalized by neighborhood size² and squared range.

    Points whose neighborhood crosses a range discontinuity (silhouette of a
    foreground object) are marked invalid (-1): their apparent corners move
    with viewpoint and would poison registration.
    """
    n = len(pts)
    c = np.full(n, -1.0)  # negative marks "no valid neighborhood"
    if n < 2 * k + 1:
        return c
    csum = np.vstack([np.zeros(3), np.cumsum(pts, axis=0)])
    i = np.arange(k, n - k)
    nb_sum = csum[i + k + 1] - csum[i - k]          # includes p_i itself
    diff = nb_sum - (2 * k + 1) * pts[i]
    r = np.linalg.norm(pts, axis=1)
    r2 = r[i] * r[i]
    c[i] = np.einsum("ij,ij->i", diff, diff) / ((2 * k) ** 2 * np.maximum(r2, 1e-12))
    jump = np.abs(np.diff(r)) > occlusion_gap
    if np.any(jump):
        bad = np.zeros(n, dtype=bool)
        for j in np.flatnonzero(jump):
            bad[max(0, j - k + 1) : j + k + 1] = True
        c[bad] = -1.0
    return c


def extract_features(scan: LidarScan, config: FrontendConfig | None = None) -> FeatureCloud:
    """Classify points into high-curvature edges and low-curvature planars.

    Points are processed per (source LiDAR, scan line) in time order; each
    line is split into azimuthal sectors with per-sector caps and index-space
    non-maximum suppression so features spread across the sweep.
    """
    cfg = config or FrontendConfig()
    k = cfg.curvature_neighborhood
    edges, planars, e_src, p_src = [], [], [], []
    if len(scan):
        groups = {}
        order = np.argsort(scan.t_ns, kind="stable")
        for idx in order:
            groups.setdefault((int(scan.source_id[idx]), int(scan.line_id[idx])), []).append(idx)
        for (src, _line), idxs in sorted(groups.items()):
            idxs = np.asarray(idxs)
            pts = scan.points[idxs]
            if len(pts) < 2 * k + 1:
                continue
            curv = _line_curvature(pts, k, cfg.occlusion_range_gap)
            sector_edges = max(1, len(pts) // cfg.n_sectors)
            for s0 in range(0, len(pts), sector_edges):
                sl = slice(s0, min(s0 + sector_edges, len(pts)))
                c = curv[sl]
                base = s0
                picked = []
                for local in np.argsort(-c, kind="stable"):
                    if c[local] < cfg.edge_curvature_min:
                        break
                    if len(picked) >= cfg.max_edges_per_sector:
                        break
                    if any(abs(local - p) <= cfg.suppression_radius for p in picked):
                        continue
                    picked.append(local)
                for local in picked:
                    edges.append(pts[base + local])
                    e_src.append(src)
                flat = np.flatnonzero((c >= 0.0) & (c <= cfg.planar_curvature_max))
                for local in flat[: cfg.max_planars_per_sector]:
                    planars.append(pts[base + local])
                    p_src.append(src)
    return FeatureCloud(
        frame_start_ns=scan.frame_start_ns if len(scan) else 0,
        edges=np.asarray(edges).reshape(-1, 3),
        planars=np.asarray(planars).reshape(-1, 3),
        edge_source=np.asarray(e_src, dtype=np.int64),
        planar_source=np.asarray(p_src, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# rail extraction
# ---------------------------------------------------------------------------


def _ransac_line(pts: np.ndarray, threshold: float, iters: int, rng) -> tuple:
    """Best (anchor, unit direction, inlier mask) by random 2-point sampling."""
    best_mask = None
    best_count = -1
    n = len(pts)
    for _ in range(iters):
        i, j = rng.choice(n, size=2, replace=False)
        d = pts[j] - pts[i]
        norm = np.linalg.norm(d)
        if norm < 1e-9:
            continue
        d = d / norm
        rel = pts - pts[i]
        dist = np.linalg.norm(rel - np.outer(rel @ d, d), axis=1)
        mask = dist < threshold
        if mask.sum() > best_count:
            best_count = int(mask.sum())
            best_mask = mask
    if best_mask is None or best_count < 2:
        raise NoRailsError("line sample degenerate: candidates nearly coincident")
    inl = pts[best_mask]
    anchor = inl.mean(axis=0)
    _, _, vt = np.linalg.svd(inl - anchor, full_matrices=False)
    direction = vt[0] / np.linalg.norm(vt[0])
    if direction[0] < 0:
        direction = -direction
    return anchor, direction, best_mask


def _ransac_plane(pts: np.ndarray, threshold: float, iters: int, rng) -> tuple:
    """Best (unit normal +z, offset, inlier mask) by random 3-point sampling."""
    best_mask = None
    best_count = -1
    n = len(pts)
    for _ in range(iters):
        idx = rng.choice(n, size=3, replace=False)
        a, b, c = pts[idx]
        nvec = np.cross(b - a, c - a)
        norm = np.linalg.norm(nvec)
        if norm < 1e-12:
            continue
        nvec = nvec / norm
        mask = np.abs((pts - a) @ nvec) < threshold
        if mask.sum() > best_count:
            best_count = int(mask.sum())
            best_mask = mask
    if best_mask is None or best_count < 3:
        raise UnreliablePlaneError("plane sample degenerate: candidates nearly collinear")
    inl = pts[best_mask]
    centroid = inl.mean(axis=0)
    _, _, vt = np.linalg.svd(inl - centroid, full_matrices=False)
    nvec = vt[2] / np.linalg.norm(vt[2])
    if nvec[2] < 0:
        nvec = -nvec
    return nvec, float(nvec @ centroid), best_mask


def extract_rail_tracks(
    scan: LidarScan,
    mount_height: float,
    mount_pitch: float,
    gauge: float,
    config: FrontendConfig | None = None,
    seed: int = 0,
) -> RailExtraction:
    """Detect the two rails and fit the track-bed plane (forward-view units).

    Pipeline: level the cloud using the known mount pitch/height, gate the
    track-bed corridor, keep per-cell local height maxima inside the two
    candidate strips at ±gauge/2, fit one 3D line per strip by RANSAC, grow
    each line along consistent heights, then fit the bed plane to both rail
    sets by RANSAC.
    """
    cfg = config or FrontendConfig()
    if scan.lidar_id not in (1, 2):
        raise InvalidArgumentError("rail extraction expects a forward-view LiDAR (id 1 or 2)")
    rng = np.random.default_rng(seed)
    # leveled frame: undo mount pitch, bed plane near z = 0
    cp, sp = np.cos(mount_pitch), np.sin(mount_pitch)
    R_level = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    pts = scan.points @ R_level.T
    pts[:, 2] += mount_height

    gate = (
        (np.abs(pts[:, 1]) <= cfg.bed_lateral_factor * gauge)
        & (pts[:, 2] >= -0.5)
        & (pts[:, 2] <= cfg.rail_head_height + cfg.bed_height_slack)
        & (pts[:, 0] > 0.0)
    )
    bed = pts[gate]

    def strip_candidates(side: float) -> np.ndarray:
        center = side * gauge / 2.0
        m = np.abs(bed[:, 1] - center) <= cfg.strip_half_width
        strip = bed[m]
        if len(strip) == 0:
            return strip
        cells = np.floor(strip[:, 0] / cfg.grid_cell).astype(np.int64)
        # bed reference height per cell from the full gated corridor
        bed_cells = np.floor(bed[:, 0] / cfg.grid_cell).astype(np.int64)
        keep = np.zeros(len(strip), dtype=bool)
        for cell in np.unique(cells):
            ref = bed[bed_cells == cell]
            if len(ref) == 0:
                continue
            bed_median = np.median(ref[:, 2])
            in_cell = cells == cell
            zmax = strip[in_cell, 2].max()
            if zmax - bed_median > 0.5 * cfg.rail_head_height:
                # local maxima: points near the cell's top rise
                keep |= in_cell & (strip[:, 2] > bed_median + 0.5 * cfg.rail_head_height)
        return strip[keep]

    left = strip_candidates(+1.0)
    right = strip_candidates(-1.0)
    if len(left) < cfg.rail_min_candidates or len(right) < cfg.rail_min_candidates:
        raise NoRailsError(
            f"rail strips too sparse (left {len(left)}, right {len(right)} candidates)"
        )

    def fit_and_grow(cands: np.ndarray, side: float):
        anchor, direction, inl = _ransac_line(cands, cfg.line_ransac_threshold, cfg.line_ransac_iters, rng)
        seed_z = np.median(cands[inl][:, 2])
        rel = cands - anchor
        dist = np.linalg.norm(rel - np.outer(rel @ direction, direction), axis=1)
        grown = (dist < cfg.grow_line_distance) & (
            np.abs(cands[:, 2] - seed_z) < cfg.grow_height_tolerance
        )
        grown |= inl
        pts = cands[grown]
        # Refit the line through the rail-head crest. The inner edge of the
        # head is an occlusion corner the sweep samples exactly (side face at
        # constant lateral offset), while the outer edge is self-occluded and
        # azimuth-quantized, so the head center is the inner edge plus half
        # the known head width — not the sample centroid.
        crest = pts[pts[:, 2] >= np.percentile(pts[:, 2], 90.0) - 0.005]
        if len(crest) >= 2:
            anchor = crest.mean(axis=0)
            _, _, vt = np.linalg.svd(crest - anchor, full_matrices=False)
            direction = vt[0] if vt[0, 0] >= 0 else -vt[0]
        side_face = pts[pts[:, 2] < np.percentile(pts[:, 2], 90.0) - 0.005]
        if len(side_face) >= 5:
            inner_y = float(np.median(side_face[:, 1]))
            anchor = anchor.copy()
            anchor[1] = inner_y + side * cfg.rail_head_width / 2.0
        return (anchor, direction), pts

    left_line, left_pts = fit_and_grow(left, +1.0)
    right_line, right_pts = fit_and_grow(right, -1.0)

    union = np.vstack([left_pts, right_pts])
    normal, offset, mask = _ransac_plane(union, cfg.plane_ransac_threshold, cfg.plane_ransac_iters, rng)
    ratio = float(mask.mean())
    if ratio < cfg.min_plane_inlier_ratio:
        raise UnreliablePlaneError(f"bed plane inlier ratio {ratio:.2f} below threshold")
    # report the plane through the bed surface, not the rail heads
    offset -= cfg.rail_head_height * float(normal[2])
    return RailExtraction(
        left_points=left_pts,
        right_points=right_pts,
        left_line=left_line,
        right_line=right_line,
        plane_normal=normal,
        plane_offset=offset,
        inlier_ratio=ratio,
    )
