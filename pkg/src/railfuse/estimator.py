"""Sliding-window MAP estimator.

Fuses four factor classes over a window of keyframe states: a marginalization
prior, preintegrated IMU/odometer increments, weighted LiDAR feature
correspondences against the local map, and inter-frame ground-plane
constraints, plus unary GNSS position factors. States are the 16-dim
navigation states of :mod:`railfuse.preintegration`; increments use the
quaternion boxplus retraction (right-multiplicative orientation
perturbation).

Plane convention: a plane is the pair (n, d) with ``n . x = d`` and unit
normal n. Expressed in a new frame reached by the rigid motion (R, t) that
maps new-frame coordinates into the old frame, the plane becomes
``(R^T n, d - n . t)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateFrameError,
    InvalidArgumentError,
    NumericalFailureError,
)
from .geometry import (
    quat_conjugate,
    quat_multiply,
    quat_to_matrix,
    skew,
    so3_log,
    so3_right_jacobian,
)
from .preintegration import (
    DELTA_DIM,
    STATE_DIM,
    X_BA,
    X_BG,
    X_P,
    X_TH,
    X_V,
    NavState,
    PreintegratedDelta,
    gravity_vector,
    imu_odom_residual,
)
from .registration import CorrespondenceSet

FACTOR_CLASSES = ("prior", "imu", "lidar", "ground", "gnss")


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def compute_weights(p_body, p_lidar, lam: float, lam_emp: float):
    """Per-LiDAR fusion weight from inertial agreement and scene degeneracy.

    ``p_body`` is the preintegrated inter-keyframe displacement, ``p_lidar``
    the displacement implied by that LiDAR's registration; both may be
    3-vectors or plain norms. Returns ``(w_inertial, w_degeneracy, w)`` with
    ``w = w_inertial * w_degeneracy``, all clamped to [0, 1].
    """
    nb = float(np.linalg.norm(p_body)) if np.ndim(p_body) else abs(float(p_body))
    nl = float(np.linalg.norm(p_lidar)) if np.ndim(p_lidar) else abs(float(p_lidar))
    if lam_emp <= 0.0:
        raise InvalidArgumentError("lam_emp must be positive")
    if nb <= 1e-6:
        w_i = 1.0  # stationary: no displacement to disagree with
    else:
        w_i = 1.0 - ((nb - nl) / nb) ** 2
        w_i = min(max(w_i, 0.0), 1.0)
    w_d = min(max(lam / lam_emp, 0.0), 1.0)
    return w_i, w_d, w_i * w_d


# ---------------------------------------------------------------------------
# factors
# ---------------------------------------------------------------------------


@dataclass
class LidarFactor:
    """Feature correspondences of one LiDAR at one keyframe.

    ``corr`` holds body-frame feature points associated with world-frame map
    lines/planes; ``weight`` is the fused w from :func:`compute_weights`.
    """

    state_index: int
    lidar_id: int
    corr: CorrespondenceSet
    weight: float = 1.0
    sigma: float = 0.05


@dataclass
class GroundFactor:
    """Consecutive-frame rail-bed plane constraint, body-frame planes."""

    state_index: int  # constrains (k, k+1)
    normal_k: np.ndarray
    offset_k: float
    normal_k1: np.ndarray
    offset_k1: float
    sigma: float = 0.05


@dataclass
class GnssFactor:
    """GNSS antenna position fix tied to state k through the partial
    preintegration from keyframe k to the fix timestamp."""

    state_index: int
    position: np.ndarray           # world-frame fix
    delta: PreintegratedDelta      # keyframe k -> fix time
    lever_arm: np.ndarray          # antenna in body frame
    sigma: np.ndarray              # per-axis standard deviations (3,)


@dataclass
class ImuFactor:
    state_index: int  # constrains (k, k+1)
    delta: PreintegratedDelta
    odom_lever_arm: np.ndarray | None = None


@dataclass
class MarginalPrior:
    """Square-root prior over the first ``len(mean)`` window states.

    Residual: sqrt_info @ (x [-] mean) - offset, with the Jacobian frozen at
    the linearization point (first-estimate style).
    """

    mean: list
    sqrt_info: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        d = STATE_DIM * len(self.mean)
        self.sqrt_info = np.asarray(self.sqrt_info, dtype=np.float64).reshape(d, d)
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(d)


def state_boxminus(x: NavState, x0: NavState) -> np.ndarray:
    """Tangent dx with x = x0.boxplus(dx)."""
    dx = np.empty(STATE_DIM)
    dx[X_P] = x.p - x0.p
    dx[X_V] = x.v - x0.v
    dx[X_TH] = so3_log(quat_multiply(quat_conjugate(x0.q), x.q))
    dx[X_BA] = x.ba - x0.ba
    dx[X_BG] = x.bg - x0.bg
    dx[15] = x.c - x0.c
    return dx


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------


def lidar_residual(states, factors, min_total: int = 10):
    """Stacked, whitened LiDAR residuals and per-state Jacobians.

    Returns (residual, jacobian_blocks) where jacobian_blocks is a list of
    (row_slice, state_index, block). Raises DegenerateFrameError when factors
    are present but carry fewer than ``min_total`` correspondences in all.
    """
    total = sum(len(f.corr) for f in factors)
    if factors and total < min_total:
        raise DegenerateFrameError(
            f"{total} LiDAR correspondences across all sensors; frame held by IMU/odometer"
        )
    res_parts, blocks = [], []
    row = 0
    for f in factors:
        if f.weight <= 0.0 or len(f.corr) == 0:
            continue
        x = states[f.state_index]
        R = quat_to_matrix(x.q)
        s = np.sqrt(f.weight) / f.sigma
        c = f.corr
        if len(c.edge_points):
            y = c.edge_points @ R.T + x.p
            d = c.edge_dirs
            P = np.eye(3) - np.einsum("ni,nj->nij", d, d)
            r = np.einsum("nij,nj->ni", P, y - c.edge_anchors)
            sw = s * np.sqrt(c.edge_weights)
            J = np.zeros((len(r), 3, STATE_DIM))
            J[:, :, X_P] = P
            J[:, :, X_TH] = -np.einsum(
                "nij,njk->nik", P, np.einsum("ij,njk->nik", R, skew(c.edge_points))
            )
            res_parts.append((sw[:, None] * r).ravel())
            blocks.append((slice(row, row + 3 * len(r)), f.state_index,
                           (sw[:, None, None] * J).reshape(-1, STATE_DIM)))
            row += 3 * len(r)
        if len(c.plane_points):
            y = c.plane_points @ R.T + x.p
            n = c.plane_normals
            r = np.einsum("ni,ni->n", n, y) - c.plane_offsets
            sw = s * np.sqrt(c.plane_weights)
            J = np.zeros((len(r), STATE_DIM))
            J[:, X_P] = n
            J[:, X_TH] = -np.einsum(
                "ni,nij->nj", n, np.einsum("ij,njk->nik", R, skew(c.plane_points))
            )
            res_parts.append(sw * r)
            blocks.append((slice(row, row + len(r)), f.state_index, sw[:, None] * J))
            row += len(r)
    if not res_parts:
        return np.zeros(0), []
    return np.concatenate(res_parts), blocks


def ground_residual(normal_k, offset_k, normal_k1, offset_k1, T_rel) -> np.ndarray:
    """4-vector plane-consistency residual between consecutive frames.

    ``T_rel`` maps frame-(k+1) coordinates into frame k. The frame-k plane
    (n, d) predicts (R^T n, d - n . t) in frame k+1; the residual is the
    measured frame-(k+1) plane minus that prediction.
    """
    R = T_rel.rotation_matrix
    n_pred = R.T @ np.asarray(normal_k, dtype=np.float64)
    d_pred = float(offset_k) - float(np.asarray(normal_k) @ T_rel.t)
    r = np.empty(4)
    r[:3] = np.asarray(normal_k1, dtype=np.float64) - n_pred
    r[3] = float(offset_k1) - d_pred
    return r


def _ground_factor_residual(x_k: NavState, x_k1: NavState, f: GroundFactor):
    """Whitened residual and Jacobians (4 x 16 each) w.r.t. both states."""
    R_k = quat_to_matrix(x_k.q)
    R_k1 = quat_to_matrix(x_k1.q)
    n_k = f.normal_k
    dp = x_k1.p - x_k.p
    w = R_k.T @ dp
    m = R_k1.T @ (R_k @ n_k)

    r = np.empty(4)
    r[:3] = f.normal_k1 - m
    r[3] = f.offset_k1 - f.offset_k + n_k @ w

    Jk = np.zeros((4, STATE_DIM))
    Jk1 = np.zeros((4, STATE_DIM))
    Jk[:3, X_TH] = R_k1.T @ R_k @ skew(n_k)
    Jk1[:3, X_TH] = -skew(m)
    Jk[3, X_P] = -(R_k @ n_k)
    Jk1[3, X_P] = R_k @ n_k
    Jk[3, X_TH] = n_k @ skew(w)

    s = 1.0 / f.sigma
    return s * r, s * Jk, s * Jk1


def gnss_residual(x_k: NavState, f: GnssFactor, gravity=None):
    """Whitened 3-vector GNSS residual and Jacobian (3 x 16) w.r.t. x_k.

    The fix is expressed in the body frame of keyframe k and compared with
    the bias-corrected preintegrated displacement to the fix time; the
    antenna lever arm is carried through the predicted orientation.
    """
    g = gravity_vector() if gravity is None else np.asarray(gravity, dtype=np.float64)
    dt = f.delta.dt
    alpha_c, _, gamma_c, _ = f.delta.corrected(x_k.ba, x_k.bg, x_k.c)
    R_k = quat_to_matrix(x_k.q)
    R_g = quat_to_matrix(gamma_c)
    ell = np.asarray(f.lever_arm, dtype=np.float64)

    u0 = f.position - x_k.p + 0.5 * g * dt * dt - x_k.v * dt
    r = R_k.T @ u0 - R_g @ ell - alpha_c

    J = np.zeros((3, STATE_DIM))
    J[:, X_P] = -R_k.T
    J[:, X_V] = -R_k.T * dt
    J[:, X_TH] = skew(R_k.T @ u0)
    J[:, X_BA] = -f.delta.J_alpha_ba
    v0 = f.delta.J_theta_bg @ (x_k.bg - f.delta.lin_bg)
    J[:, X_BG] = -f.delta.J_alpha_bg + R_g @ skew(ell) @ so3_right_jacobian(v0) @ f.delta.J_theta_bg

    s = 1.0 / np.asarray(f.sigma, dtype=np.float64)
    return s * r, s[:, None] * J


# ---------------------------------------------------------------------------
# sliding window
# ---------------------------------------------------------------------------


@dataclass
class FactorSummary:
    """Converged-window diagnostics: per-class costs and per-LiDAR weights."""

    costs: dict
    total_cost: float
    iterations: int
    lidar_weights: dict = field(default_factory=dict)


@dataclass
class SlidingWindow:
    """Ordered keyframe states with their attached factors.

    Factor ``state_index`` fields refer to positions in ``states``; binary
    factors constrain (index, index + 1).
    """

    window_size: int = 10
    gravity: np.ndarray = field(default_factory=gravity_vector)
    states: list = field(default_factory=list)
    stamps_ns: list = field(default_factory=list)
    imu_factors: list = field(default_factory=list)
    lidar_factors: list = field(default_factory=list)
    ground_factors: list = field(default_factory=list)
    gnss_factors: list = field(default_factory=list)
    prior: MarginalPrior | None = None
    huber_threshold: float = 5.0

    def add_keyframe(self, stamp_ns: int, state: NavState):
        if self.stamps_ns and stamp_ns <= self.stamps_ns[-1]:
            raise InvalidArgumentError("keyframe timestamps must be strictly increasing")
        self.states.append(state.copy())
        self.stamps_ns.append(int(stamp_ns))

    @property
    def full(self) -> bool:
        return len(self.states) > self.window_size

    # -- linearization --------------------------------------------------

    def _factor_terms(self):
        """Yield (class_name, residual, [(state_index, jacobian)]) tuples."""
        if self.prior is not None:
            k = len(self.prior.mean)
            dx = np.concatenate(
                [state_boxminus(self.states[i], self.prior.mean[i]) for i in range(k)]
            )
            r = self.prior.sqrt_info @ dx - self.prior.offset
            binds = [
                (i, self.prior.sqrt_info[:, i * STATE_DIM:(i + 1) * STATE_DIM])
                for i in range(k)
            ]
            yield "prior", r, binds
        for f in self.imu_factors:
            r, Jk, Jk1 = imu_odom_residual(
                self.states[f.state_index], self.states[f.state_index + 1],
                f.delta, gravity=self.gravity, odom_lever_arm=f.odom_lever_arm,
            )
            W = f.delta.sqrt_info()
            yield "imu", W @ r, [(f.state_index, W @ Jk), (f.state_index + 1, W @ Jk1)]
        by_state: dict = {}
        for f in self.lidar_factors:
            by_state.setdefault(f.state_index, []).append(f)
        for idx, group in sorted(by_state.items()):
            r, blocks = lidar_residual(self.states, group)
            for sl, i, J in blocks:
                yield "lidar", r[sl], [(i, J)]
        for f in self.ground_factors:
            r, Jk, Jk1 = _ground_factor_residual(
                self.states[f.state_index], self.states[f.state_index + 1], f
            )
            yield "ground", r, [(f.state_index, Jk), (f.state_index + 1, Jk1)]
        for f in self.gnss_factors:
            r, J = gnss_residual(self.states[f.state_index], f, gravity=self.gravity)
            yield "gnss", r, [(f.state_index, J)]

    def assemble_cost(self):
        """Linearize every factor at the current states.

        Returns (H, b, cost, per_class_cost): the Gauss-Newton normal
        equations H dx = b over the stacked state tangents and the whitened
        squared-residual totals. Residual blocks whose whitened norm exceeds
        ``huber_threshold * sqrt(dim)`` are Huber-downweighted.
        """
        n = len(self.states)
        D = STATE_DIM * n
        H = np.zeros((D, D))
        b = np.zeros(D)
        cost = 0.0
        per_class = {k: 0.0 for k in FACTOR_CLASSES}
        for name, r, binds in self._factor_terms():
            norm = np.linalg.norm(r)
            th = self.huber_threshold * np.sqrt(max(len(r), 1))
            scale = 1.0 if norm <= th or name == "prior" else np.sqrt(th / norm)
            r = scale * r
            cost += float(r @ r)
            per_class[name] += float(r @ r)
            for ai, (i, Ji) in enumerate(binds):
                Ji = scale * Ji
                sl_i = slice(i * STATE_DIM, (i + 1) * STATE_DIM)
                b[sl_i] -= Ji.T @ r
                for j, Jj in binds[ai:]:
                    Jj_s = scale * Jj
                    sl_j = slice(j * STATE_DIM, (j + 1) * STATE_DIM)
                    blk = Ji.T @ Jj_s
                    H[sl_i, sl_j] += blk
                    if i != j:
                        H[sl_j, sl_i] += blk.T
        return H, b, cost, per_class

    def _evaluate_cost(self) -> float:
        total = 0.0
        for name, r, _ in self._factor_terms():
            norm = np.linalg.norm(r)
            th = self.huber_threshold * np.sqrt(max(len(r), 1))
            scale = 1.0 if norm <= th or name == "prior" else np.sqrt(th / norm)
            total += float((scale * r) @ (scale * r))
        return total


def optimize_window(window: SlidingWindow, max_iterations: int = 20,
                    rel_tol: float = 1e-6) -> FactorSummary:
    """Levenberg-Marquardt over the window with on-manifold state updates.

    Accepted steps never increase the (Huber-gated, whitened) cost; a
    non-finite cost raises NumericalFailureError with the window rolled back
    to its pre-call states.
    """
    if not window.states:
        raise InvalidArgumentError("window has no states")
    backup = [s.copy() for s in window.states]
    n = len(window.states)
    damping = 1e-6
    it = 0
    try:
        H, b, cost, _ = window.assemble_cost()
        if not np.isfinite(cost):
            raise NumericalFailureError("non-finite cost at current linearization")
        for it in range(1, max_iterations + 1):
            Hd = H + damping * np.diag(np.maximum(np.diag(H), 1.0))
            try:
                dx = np.linalg.solve(Hd, b)
            except np.linalg.LinAlgError as exc:
                raise NumericalFailureError(str(exc)) from exc
            trial = [
                window.states[i].boxplus(dx[i * STATE_DIM:(i + 1) * STATE_DIM])
                for i in range(n)
            ]
            saved = window.states
            window.states = trial
            new_cost = window._evaluate_cost()
            if not np.isfinite(new_cost):
                window.states = saved
                raise NumericalFailureError("non-finite cost after update")
            if new_cost <= cost:
                improved = cost - new_cost
                cost = new_cost
                damping = max(damping / 3.0, 1e-9)
                if improved < rel_tol * max(cost, 1e-12):
                    break
                H, b, cost, _ = window.assemble_cost()
            else:
                window.states = saved
                damping *= 10.0
                if damping > 1e8:
                    break
    except NumericalFailureError:
        window.states = backup
        raise
    _, _, final_cost, per_class = window.assemble_cost()
    weights = {
        (f.state_index, f.lidar_id): f.weight for f in window.lidar_factors
    }
    return FactorSummary(costs=per_class, total_cost=final_cost,
                         iterations=it, lidar_weights=weights)


def marginalize_oldest(window: SlidingWindow) -> SlidingWindow:
    """Eliminate the oldest state by Schur complement.

    All factors touching state 0 (plus the existing prior) are linearized at
    the current states; the state-0 block is eliminated and the result
    becomes the new prior over the remaining states it connects to. The
    prior's linearization points are frozen at the current states.
    """
    if not window.states:
        raise InvalidArgumentError("window has no states")

    touching = []
    keep_imu, keep_lidar, keep_ground, keep_gnss = [], [], [], []
    for f in window.imu_factors:
        (touching if f.state_index == 0 else keep_imu).append(f)
    for f in window.lidar_factors:
        (touching if f.state_index == 0 else keep_lidar).append(f)
    for f in window.ground_factors:
        (touching if f.state_index == 0 else keep_ground).append(f)
    for f in window.gnss_factors:
        (touching if f.state_index == 0 else keep_gnss).append(f)

    if not touching and window.prior is None:
        # nothing connects the oldest state: drop it outright
        new = _shifted_window(window, keep_imu, keep_lidar, keep_ground, keep_gnss)
        new.prior = None
        return new

    # connected scope: state 0 plus everything a touching factor or the old
    # prior binds
    scope = {0}
    for f in touching:
        scope.add(f.state_index)
        if isinstance(f, (ImuFactor, GroundFactor)):
            scope.add(f.state_index + 1)
    if window.prior is not None:
        scope.update(range(len(window.prior.mean)))
    scope = sorted(scope)
    pos = {i: k for k, i in enumerate(scope)}
    D = STATE_DIM * len(scope)
    H = np.zeros((D, D))
    b = np.zeros(D)

    sub = SlidingWindow(gravity=window.gravity)
    sub.states = window.states
    sub.prior = window.prior
    sub.imu_factors = [f for f in touching if isinstance(f, ImuFactor)]
    sub.lidar_factors = [f for f in touching if isinstance(f, LidarFactor)]
    sub.ground_factors = [f for f in touching if isinstance(f, GroundFactor)]
    sub.gnss_factors = [f for f in touching if isinstance(f, GnssFactor)]
    for _, r, binds in sub._factor_terms():
        for ai, (i, Ji) in enumerate(binds):
            sl_i = slice(pos[i] * STATE_DIM, (pos[i] + 1) * STATE_DIM)
            b[sl_i] -= Ji.T @ r
            for j, Jj in binds[ai:]:
                sl_j = slice(pos[j] * STATE_DIM, (pos[j] + 1) * STATE_DIM)
                blk = Ji.T @ Jj
                H[sl_i, sl_j] += blk
                if i != j:
                    H[sl_j, sl_i] += blk.T
    # Schur complement: eliminate the state-0 block
    m = STATE_DIM
    Haa = H[:m, :m]
    if np.linalg.matrix_rank(Haa) < m:
        Haa = Haa + 1e-8 * np.eye(m)
        import warnings

        warnings.warn("singular marginalization block regularized", RuntimeWarning)
    Hab = H[:m, m:]
    Hbb = H[m:, m:]
    Haa_inv = np.linalg.inv(Haa)
    H_star = Hbb - Hab.T @ Haa_inv @ Hab
    b_star = b[m:] - Hab.T @ Haa_inv @ b[:m]

    w, v = np.linalg.eigh(0.5 * (H_star + H_star.T))
    keep = w > 1e-10 * max(w[-1], 1.0)
    sqrt_info_r = (np.sqrt(w[keep])[:, None] * v[:, keep].T)
    # pad back to square for a well-formed prior
    L = np.zeros((H_star.shape[0],) * 2)
    L[: sqrt_info_r.shape[0]] = sqrt_info_r
    u = np.zeros(H_star.shape[0])
    u[: sqrt_info_r.shape[0]] = (v[:, keep].T @ b_star) / np.sqrt(w[keep])

    remaining_scope = scope[1:]  # window indices before the shift
    mean = [window.states[i].copy() for i in remaining_scope]

    new = _shifted_window(window, keep_imu, keep_lidar, keep_ground, keep_gnss)
    new.prior = MarginalPrior(mean=mean, sqrt_info=L, offset=u)
    return new


def _shifted_window(window, imu, lidar, ground, gnss) -> SlidingWindow:
    """Copy of the window without state 0; factor indices shift down by 1."""
    import copy

    new = SlidingWindow(
        window_size=window.window_size,
        gravity=window.gravity,
        huber_threshold=window.huber_threshold,
    )
    new.states = [s.copy() for s in window.states[1:]]
    new.stamps_ns = list(window.stamps_ns[1:])

    def shift(f):
        g = copy.copy(f)
        g.state_index = f.state_index - 1
        return g

    new.imu_factors = [shift(f) for f in imu]
    new.lidar_factors = [shift(f) for f in lidar]
    new.ground_factors = [shift(f) for f in ground]
    new.gnss_factors = [shift(f) for f in gnss]
    return new
