"""Point-cloud alignment kernels and the degeneracy measure.

Provides the four registration flavors used by the pipeline — feature-based
point-to-line/plane Gauss-Newton, plane-to-plane GICP, point-to-point ICP,
and NDT — all reporting a common :class:`RegistrationResult` with the 6x6
information matrix of the final linearized system. The smallest eigenvalue
of that matrix feeds the degeneracy-aware weighting.

Pose increments use a left-multiplicative perturbation
``T ← (Exp(δθ), δt) ∘ T`` with the 6-vector ordered [δθ, δt].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from railfuse.errors import (
    InsufficientOverlapError,
    InsufficientStructureError,
    InvalidArgumentError,
    NoMapError,
    UnderconstrainedError,
)
from railfuse.geometry import (
    RigidTransform,
    matrix_to_quat,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    skew,
    so3_exp,
)

MIN_FEATURE_CORRESPONDENCES = 10


@dataclass
class CorrespondenceSet:
    """Edge (point-to-line) and planar (point-to-plane) associations.

    Edge pairs: feature point (source frame), line anchor + unit direction
    (target frame). Plane pairs: feature point, unit normal n and offset d
    with the plane satisfying ``n · x = d``.
    """

    edge_points: np.ndarray     # (E, 3)
    edge_anchors: np.ndarray    # (E, 3)
    edge_dirs: np.ndarray       # (E, 3) unit
    plane_points: np.ndarray    # (P, 3)
    plane_normals: np.ndarray   # (P, 3) unit
    plane_offsets: np.ndarray   # (P,)
    edge_weights: np.ndarray | None = None
    plane_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.edge_weights is None:
            self.edge_weights = np.ones(len(self.edge_points))
        if self.plane_weights is None:
            self.plane_weights = np.ones(len(self.plane_points))

    def __len__(self) -> int:
        return len(self.edge_points) + len(self.plane_points)


@dataclass
class RegistrationResult:
    transform: RigidTransform   # source -> target
    cost: float
    iterations: int
    information: np.ndarray     # 6x6, [δθ, δt] ordering
    cost_history: np.ndarray | None = None

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.information + self.information.T))[0])


def _apply(T: RigidTransform, pts: np.ndarray) -> np.ndarray:
    if len(pts) == 0:
        return pts
    return quat_rotate(np.broadcast_to(T.q, (len(pts), 4)), pts) + T.t


def _boxplus(T: RigidTransform, delta: np.ndarray) -> RigidTransform:
    dq = so3_exp(delta[:3])
    return RigidTransform(quat_normalize(quat_multiply(dq, T.q)), quat_rotate(dq, T.t) + delta[3:])


# ---------------------------------------------------------------------------
# feature correspondences + solver
# ---------------------------------------------------------------------------


def feature_correspondences(
    edges: np.ndarray,
    planars: np.ndarray,
    map_edges: np.ndarray,
    map_planars: np.ndarray,
    initial_guess: RigidTransform | None = None,
    k: int = 5,
    line_eigen_ratio: float = 3.0,
    plane_max_residual: float = 0.2,
    max_search_dist: float = 2.0,
) -> CorrespondenceSet:
    """Associate features with local line/plane structures in the map.

    Each edge feature (transformed by the initial guess) takes its `k`
    nearest map edge points; the neighborhood is accepted as a line when its
    dominant eigenvalue is at least `line_eigen_ratio` times the second.
    Each planar feature takes its `k` nearest map planar points fit by a
    least-squares plane, accepted when the worst point-plane residual stays
    under `plane_max_residual`.
    """
    map_edges = np.asarray(map_edges, dtype=np.float64).reshape(-1, 3)
    map_planars = np.asarray(map_planars, dtype=np.float64).reshape(-1, 3)
    if len(map_edges) < k and len(map_planars) < k:
        raise NoMapError("local map has no searchable edge or planar structure")
    T = initial_guess or RigidTransform.identity()

    e_pts, e_anchor, e_dir = [], [], []
    if len(edges) and len(map_edges) >= k:
        tree = cKDTree(map_edges)
        dist, idx = tree.query(_apply(T, edges), k=k)
        for i in range(len(edges)):
            if dist[i][-1] > max_search_dist:
                continue
            nb = map_edges[idx[i]]
            centroid = nb.mean(axis=0)
            cov = (nb - centroid).T @ (nb - centroid) / k
            w, v = np.linalg.eigh(cov)
            if w[2] >= line_eigen_ratio * max(w[1], 1e-12):
                e_pts.append(edges[i])
                e_anchor.append(centroid)
                e_dir.append(v[:, 2])

    p_pts, p_n, p_d = [], [], []
    if len(planars) and len(map_planars) >= k:
        tree = cKDTree(map_planars)
        dist, idx = tree.query(_apply(T, planars), k=k)
        for i in range(len(planars)):
            if dist[i][-1] > max_search_dist:
                continue
            nb = map_planars[idx[i]]
            centroid = nb.mean(axis=0)
            _, _, vt = np.linalg.svd(nb - centroid, full_matrices=False)
            n = vt[2]
            if np.max(np.abs((nb - centroid) @ n)) < plane_max_residual:
                p_pts.append(planars[i])
                p_n.append(n)
                p_d.append(n @ centroid)

    return CorrespondenceSet(
        edge_points=np.asarray(e_pts).reshape(-1, 3),
        edge_anchors=np.asarray(e_anchor).reshape(-1, 3),
        edge_dirs=np.asarray(e_dir).reshape(-1, 3),
        plane_points=np.asarray(p_pts).reshape(-1, 3),
        plane_normals=np.asarray(p_n).reshape(-1, 3),
        plane_offsets=np.asarray(p_d, dtype=np.float64),
    )


def correspondence_residuals(corr: CorrespondenceSet, T: RigidTransform):
    """Stacked weighted residuals and Jacobians of the correspondence cost.

    Edge rows are the 3-vector rejection of (T p − anchor) off the line
    direction (rank 2); plane rows are the signed point-plane distances.
    Returns (residuals (3E+P,), jacobian (3E+P, 6)).
    """
    res_parts, jac_parts = [], []
    if len(corr.edge_points):
        q = _apply(T, corr.edge_points)
        d = corr.edge_dirs
        rel = q - corr.edge_anchors
        # projector off the line direction, batched: P = I - d d^T
        P = np.eye(3)[None] - d[:, :, None] * d[:, None, :]
        proj = np.einsum("nij,nj->ni", P, rel)
        J = np.concatenate([-np.einsum("nij,njk->nik", P, skew(q)), P], axis=2)
        w = np.sqrt(corr.edge_weights)
        res_parts.append((w[:, None] * proj).ravel())
        jac_parts.append((w[:, None, None] * J).reshape(-1, 6))
    if len(corr.plane_points):
        q = _apply(T, corr.plane_points)
        n = corr.plane_normals
        r = np.einsum("ij,ij->i", q, n) - corr.plane_offsets
        w = np.sqrt(corr.plane_weights)
        Jr = -np.einsum("ni,nij->nj", n, skew(q))
        J = np.hstack([Jr, n])
        res_parts.append(w * r)
        jac_parts.append(w[:, None] * J)
    if not res_parts:
        return np.zeros(0), np.zeros((0, 6))
    return np.concatenate(res_parts), np.vstack(jac_parts)


def solve_feature_registration(
    corr: CorrespondenceSet,
    initial_guess: RigidTransform | None = None,
    max_iterations: int = 20,
    damping: float = 1e-6,
    tol: float = 1e-10,
) -> RegistrationResult:
    """Damped Gauss-Newton over the point-to-line/plane cost."""
    if len(corr) < MIN_FEATURE_CORRESPONDENCES:
        raise UnderconstrainedError(
            f"{len(corr)} correspondences; at least {MIN_FEATURE_CORRESPONDENCES} required"
        )
    T = initial_guess or RigidTransform.identity()
    res, jac = correspondence_residuals(corr, T)
    cost = float(res @ res)
    it = 0
    for it in range(1, max_iterations + 1):
        H = jac.T @ jac
        b = -jac.T @ res
        delta = np.linalg.solve(H + damping * np.eye(6), b)
        T_new = _boxplus(T, delta)
        res_new, jac_new = correspondence_residuals(corr, T_new)
        cost_new = float(res_new @ res_new)
        if cost_new <= cost:
            T, res, jac, prev = T_new, res_new, jac_new, cost
            cost = cost_new
            if prev - cost < tol * max(prev, 1.0) or np.linalg.norm(delta) < 1e-10:
                break
        else:
            damping *= 10.0
            if damping > 1e3:
                break
    return RegistrationResult(T, cost, it, jac.T @ jac)


# ---------------------------------------------------------------------------
# GICP / ICP
# ---------------------------------------------------------------------------


def _point_covariances(pts: np.ndarray, k: int = 20, eps: float = 1e-3) -> np.ndarray:
    """Plane-regularized covariance per point: eigenvalues replaced by
    (1, 1, eps) in the local surface basis."""
    k = min(k, len(pts))
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    nb = pts[idx]                                   # (N, k, 3)
    c = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", c, c) / k
    _, v = np.linalg.eigh(cov)                      # ascending eigenvalues
    d = np.array([eps, 1.0, 1.0])
    return np.einsum("nij,j,nkj->nik", v, d, v)


def gicp_register(
    source: np.ndarray,
    target: np.ndarray,
    initial_guess: RigidTransform | None = None,
    max_iterations: int = 50,
    tol: float = 1e-6,
    neighbors: int = 20,
    max_pair_dist: float = 2.0,
) -> RegistrationResult:
    """Plane-to-plane GICP with per-point covariances from local neighborhoods."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if len(source) < 100 or len(target) < 100:
        raise InvalidArgumentError("GICP needs at least 100 points per cloud")
    cov_s = _point_covariances(source, neighbors)
    cov_t = _point_covariances(target, neighbors)
    tree = cKDTree(target)
    T = initial_guess or RigidTransform.identity()
    cost = np.inf
    it = 0
    H = np.eye(6)
    for it in range(1, max_iterations + 1):
        q = _apply(T, source)
        dist, idx = tree.query(q)
        pairs = dist < max_pair_dist
        if pairs.sum() < 10:
            raise InsufficientOverlapError("fewer than 10 GICP pairs within range")
        R = T.rotation_matrix
        sel = np.flatnonzero(pairs)
        j = idx[sel]
        C = cov_t[j] + np.einsum("ij,njk,lk->nil", R, cov_s[sel], R)
        W = np.linalg.inv(C)
        r = q[sel] - target[j]
        S = skew(q[sel])                           # (n,3,3)
        WS = np.einsum("nij,njk->nik", W, S)
        Wr = np.einsum("nij,nj->ni", W, r)
        H = np.zeros((6, 6))
        b = np.zeros(6)
        H[3:, 3:] = W.sum(axis=0)
        H[3:, :3] = -WS.sum(axis=0)
        H[:3, 3:] = H[3:, :3].T
        H[:3, :3] = np.einsum("nij,nik->jk", S, WS)
        b[:3] = np.einsum("nji,nj->i", S, Wr)      # -J^T W r rotation block = S^T W r
        b[3:] = -Wr.sum(axis=0)
        cost_new = float(np.einsum("ni,ni->", r, Wr))
        delta = np.linalg.solve(H + 1e-9 * np.eye(6), b)
        T = _boxplus(T, delta)
        if np.linalg.norm(delta) < tol:
            cost = cost_new
            break
        cost = cost_new
    q = _apply(T, source)
    dist, _ = tree.query(q)
    if np.median(dist) > 2.0:
        raise InsufficientOverlapError(
            f"median correspondence distance {np.median(dist):.2f} m at convergence"
        )
    return RegistrationResult(T, cost, it, H)


def icp_register(
    source: np.ndarray,
    target: np.ndarray,
    initial_guess: RigidTransform | None = None,
    max_iterations: int = 50,
    tol: float = 1e-6,
    reject_dist: float = 1.0,
) -> RegistrationResult:
    """Point-to-point ICP with closed-form (SVD) per-iteration alignment."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if len(source) < 3 or len(target) < 3:
        raise InvalidArgumentError("ICP needs at least 3 points per cloud")
    tree = cKDTree(target)
    T = initial_guess or RigidTransform.identity()
    cost = np.inf
    it = 0
    n_pairs = 0
    history: list[float] = []
    for it in range(1, max_iterations + 1):
        q = _apply(T, source)
        dist, idx = tree.query(q)
        pairs = dist < reject_dist
        n_pairs = int(pairs.sum())
        if n_pairs < 3:
            raise InsufficientOverlapError("fewer than 3 ICP pairs within rejection range")
        a = q[pairs]
        bpts = target[idx[pairs]]
        ca, cb = a.mean(axis=0), bpts.mean(axis=0)
        Hm = (a - ca).T @ (bpts - cb)
        U, _, Vt = np.linalg.svd(Hm)
        Rm = Vt.T @ np.diag([1.0, 1.0, np.linalg.det(Vt.T @ U.T)]) @ U.T
        t = cb - Rm @ ca
        step = RigidTransform(matrix_to_quat(Rm), t)
        T = step.compose(T)
        cost_new = float(np.sum(np.linalg.norm(a @ Rm.T + t - bpts, axis=1) ** 2))
        history.append(cost_new)
        dnorm = np.linalg.norm(step.rotvec()) + np.linalg.norm(step.t)
        if abs(cost - cost_new) < tol * max(cost_new, 1.0) or dnorm < tol:
            cost = cost_new
            break
        cost = cost_new
    q = _apply(T, source)
    dist, idx = tree.query(q)
    if np.median(dist) > 2.0:
        raise InsufficientOverlapError(
            f"median correspondence distance {np.median(dist):.2f} m at convergence"
        )
    # information matrix of the equivalent point-to-point least squares
    pairs = dist < reject_dist
    H = np.zeros((6, 6))
    for p in q[pairs]:
        J = np.hstack([-skew(p), np.eye(3)])
        H += J.T @ J
    return RegistrationResult(T, cost, it, H, cost_history=np.asarray(history))


# ---------------------------------------------------------------------------
# NDT
# ---------------------------------------------------------------------------


_KEY_BASE = np.int64(1) << 21
_KEY_OFFSET = np.int64(1) << 20


def _pack_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    k = np.floor(points / voxel).astype(np.int64) + _KEY_OFFSET
    return (k[:, 0] * _KEY_BASE + k[:, 1]) * _KEY_BASE + k[:, 2]


@dataclass
class NdtGrid:
    """Gaussian distribution per occupied voxel of a target cloud."""

    voxel: float
    keys: np.ndarray    # sorted packed voxel keys, (C,)
    means: np.ndarray   # (C, 3)
    invs: np.ndarray    # inverse covariances, (C, 3, 3)
    tree: cKDTree       # over the cell means, for out-of-voxel fallback

    def __len__(self) -> int:
        return len(self.keys)

    def lookup(self, points: np.ndarray) -> np.ndarray:
        """Cell index per point: the containing voxel when occupied, else the
        nearest cell within one voxel length, else -1."""
        packed = _pack_keys(points, self.voxel)
        pos = np.searchsorted(self.keys, packed)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        idx = np.where(self.keys[pos_c] == packed, pos_c, -1)
        miss = idx < 0
        if np.any(miss):
            dist, near = self.tree.query(points[miss])
            idx[miss] = np.where(dist <= self.voxel, near, -1)
        return idx

    def score(self, points: np.ndarray) -> float:
        """Negative sum of Gaussian cell responses (lower beats higher)."""
        idx = self.lookup(points)
        i = idx[idx >= 0]
        q = points[idx >= 0] - self.means[i]
        e = np.einsum("ni,nij,nj->n", q, self.invs[i], q)
        return float(-np.exp(-0.5 * np.clip(e, 0.0, 50.0)).sum())


def _ndt_cells(target: np.ndarray, voxel: float, min_points: int) -> NdtGrid:
    packed = _pack_keys(target, voxel)
    order = np.argsort(packed)
    packed_sorted = packed[order]
    pts_sorted = target[order]
    boundaries = np.flatnonzero(np.diff(packed_sorted) != 0) + 1
    starts = np.concatenate([[0], boundaries])
    keys, means, invs = [], [], []
    for chunk, start in zip(np.split(pts_sorted, boundaries), starts):
        if len(chunk) < min_points:
            continue
        mu = chunk.mean(axis=0)
        c = chunk - mu
        cov = c.T @ c / len(chunk)
        w, v = np.linalg.eigh(cov)
        w = np.maximum(w, 1e-3 * max(w[2], 1e-9))  # avoid singular cells
        keys.append(packed_sorted[start])
        means.append(mu)
        invs.append(v @ np.diag(1.0 / w) @ v.T)
    means = np.asarray(means).reshape(-1, 3)
    return NdtGrid(
        voxel=voxel,
        keys=np.asarray(keys, dtype=np.int64),
        means=means,
        invs=np.asarray(invs).reshape(-1, 3, 3),
        tree=cKDTree(means) if len(means) else cKDTree(np.zeros((1, 3))),
    )


def ndt_register(
    source: np.ndarray,
    target: np.ndarray,
    initial_guess: RigidTransform | None = None,
    voxel: float = 1.0,
    min_points_per_cell: int = 6,
    max_iterations: int = 50,
    tol: float = 1e-8,
) -> RegistrationResult:
    """Damped Newton maximization of the NDT match score.

    The target is voxelized into Gaussian cells; each transformed source
    point contributes the response of its nearest cell. The Hessian uses the
    first-order (Gauss-Newton-like) term of the exact score Hessian.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    grid = _ndt_cells(target, voxel, min_points_per_cell)
    if len(grid) < 10:
        raise InsufficientStructureError(
            f"only {len(grid)} NDT cells with >= {min_points_per_cell} points"
        )
    T = initial_guess or RigidTransform.identity()
    cost = grid.score(_apply(T, source))
    damping = 1e-4
    it = 0
    H = np.eye(6)
    for it in range(1, max_iterations + 1):
        all_pts = _apply(T, source)
        idx = grid.lookup(all_pts)
        pts = all_pts[idx >= 0]
        i = idx[idx >= 0]
        q = pts - grid.means[i]
        B = grid.invs[i]
        e = np.einsum("ni,nij,nj->n", q, B, q)
        w = np.exp(-0.5 * np.clip(e, 0.0, 50.0))
        Bq = np.einsum("nij,nj->ni", B, q)
        # J_n = d q_n / d [δθ, δt] = [-skew(p_n), I]
        S = skew(pts)                               # (n, 3, 3)
        g = np.empty((len(pts), 6))
        g[:, :3] = np.einsum("nij,nj->ni", S, Bq)   # (-S)^T B q = S B q
        g[:, 3:] = Bq
        grad = (w[:, None] * g).sum(axis=0)
        wB = w[:, None, None] * B
        wBS = np.einsum("nij,njk->nik", wB, S)
        H = np.zeros((6, 6))
        H[3:, 3:] = wB.sum(axis=0)
        H[3:, :3] = -wBS.sum(axis=0)
        H[:3, 3:] = H[3:, :3].T
        H[:3, :3] = np.einsum("nij,nik->jk", S, wBS)
        H -= np.einsum("n,ni,nj->ij", w, g, g)
        # minimize cost = -sum w  =>  d cost = sum w * (q^T B dq)
        Hd = H + damping * np.eye(6)
        wmin = np.linalg.eigvalsh(0.5 * (Hd + Hd.T))[0]
        if wmin <= 0:
            Hd += (abs(wmin) + 1e-6) * np.eye(6)
        delta = np.linalg.solve(Hd, -grad)
        T_new = _boxplus(T, delta)
        cost_new = grid.score(_apply(T_new, source))
        if cost_new <= cost:
            improved = cost - cost_new
            T, cost = T_new, cost_new
            damping = max(damping / 3.0, 1e-8)
            if improved < tol * max(abs(cost), 1.0):
                break
        else:
            damping *= 10.0
            if damping > 1e6:
                break
    return RegistrationResult(T, cost, it, 0.5 * (H + H.T))


# ---------------------------------------------------------------------------
# degeneracy factor
# ---------------------------------------------------------------------------


def degeneracy_factor(information: np.ndarray, lambda_emp: float) -> tuple:
    """Smallest eigenvalue of the 6x6 system and the clamped weight λ/λ_emp."""
    A = np.asarray(information, dtype=np.float64)
    if A.shape != (6, 6):
        raise InvalidArgumentError("information matrix must be 6x6")
    if np.max(np.abs(A - A.T)) > 1e-9 * max(1.0, np.max(np.abs(A))):
        raise InvalidArgumentError("information matrix must be symmetric")
    if lambda_emp <= 0.0:
        raise InvalidArgumentError("lambda_emp must be positive")
    lam = float(np.linalg.eigvalsh(A)[0])
    return lam, float(np.clip(lam / lambda_emp, 0.0, 1.0))
