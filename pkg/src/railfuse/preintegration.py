"""IMU + wheel-odometer preintegration between consecutive keyframes.

The increment between keyframes k and k+1 collects:

- ``alpha``  double-integrated specific force in the frame at k  [m]
- ``beta``   integrated specific force in the frame at k         [m/s]
- ``gamma``  relative rotation as a unit quaternion
- ``phi``    integrated odometer displacement mapped into the
             IMU frame at k                                       [m]

together with a 19x19 first-order covariance and the sensitivity of the
increment to the linearization biases / odometer scale, so a small bias
update never forces re-integration.

Error-state ordering (19): [dalpha, dbeta, dtheta, dba, dbg, dphi, dc].
Per-keyframe state tangent ordering (16): [dp, dv, dtheta, dba, dbg, dc].
Rotation perturbations are right-multiplicative: q ⊞ dθ = q ⊗ Exp(dθ).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from railfuse.errors import (
    InsufficientDataError,
    InvalidStreamError,
    ReintegrationRequiredError,
)
from railfuse.geometry import (
    IDENTITY_QUAT,
    RigidTransform,
    quat_conjugate,
    quat_exp_jacobian,
    quat_left_matrix,
    quat_multiply,
    quat_normalize,
    quat_right_matrix,
    quat_to_matrix,
    skew,
    so3_exp,
    so3_right_jacobian,
)

GRAVITY = 9.80665  # m/s^2, +z in the world frame

DELTA_DIM = 19
STATE_DIM = 16

# slices into the 19-dim increment error state
S_ALPHA = slice(0, 3)
S_BETA = slice(3, 6)
S_THETA = slice(6, 9)
S_BA = slice(9, 12)
S_BG = slice(12, 15)
S_PHI = slice(15, 18)
I_C = 18

# slices into the 16-dim per-state tangent
X_P = slice(0, 3)
X_V = slice(3, 6)
X_TH = slice(6, 9)
X_BA = slice(9, 12)
X_BG = slice(12, 15)
X_C = 15


def gravity_vector(magnitude: float = GRAVITY) -> np.ndarray:
    return np.array([0.0, 0.0, magnitude])


@dataclass
class NavState:
    """World-frame navigation state of one keyframe."""

    p: np.ndarray
    v: np.ndarray
    q: np.ndarray  # body -> world
    ba: np.ndarray
    bg: np.ndarray
    c: float = 1.0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(3)
        self.v = np.asarray(self.v, dtype=np.float64).reshape(3)
        self.q = quat_normalize(self.q)
        self.ba = np.asarray(self.ba, dtype=np.float64).reshape(3)
        self.bg = np.asarray(self.bg, dtype=np.float64).reshape(3)
        self.c = float(self.c)

    @staticmethod
    def identity() -> "NavState":
        return NavState(np.zeros(3), np.zeros(3), IDENTITY_QUAT.copy(), np.zeros(3), np.zeros(3))

    def copy(self) -> "NavState":
        return NavState(self.p.copy(), self.v.copy(), self.q.copy(), self.ba.copy(), self.bg.copy(), self.c)

    def boxplus(self, dx: np.ndarray) -> "NavState":
        """Retract a 16-dim tangent increment onto the state."""
        dx = np.asarray(dx, dtype=np.float64)
        return NavState(
            self.p + dx[X_P],
            self.v + dx[X_V],
            quat_multiply(self.q, so3_exp(dx[X_TH])),
            self.ba + dx[X_BA],
            self.bg + dx[X_BG],
            self.c + dx[X_C],
        )

    def pose(self) -> RigidTransform:
        return RigidTransform(self.q, self.p)


@dataclass
class ImuNoise:
    """Continuous-time noise densities used for covariance propagation."""

    accel_density: float = 0.02       # m/s^2 / sqrt(Hz)
    gyro_density: float = 0.002      # rad/s / sqrt(Hz)
    accel_bias_walk: float = 2e-4    # m/s^3 / sqrt(Hz)
    gyro_bias_walk: float = 2e-5     # rad/s^2 / sqrt(Hz)
    odom_density: float = 0.05       # m/s / sqrt(Hz)
    scale_walk: float = 1e-4         # 1/s / sqrt(Hz)


@dataclass
class PreintegratedDelta:
    """Preintegrated IMU/odometer increment between two keyframes."""

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray  # unit quaternion
    phi: np.ndarray
    dt: float
    dt_ns: int
    cov: np.ndarray                 # 19x19, ordering as module header
    jac: np.ndarray                 # 19x19 sensitivity to initial error state
    lin_ba: np.ndarray
    lin_bg: np.ndarray
    lin_c: float
    _sqrt_info: np.ndarray | None = field(default=None, repr=False)

    # bias/scale sensitivity blocks
    @property
    def J_alpha_ba(self) -> np.ndarray:
        return self.jac[S_ALPHA, S_BA]

    @property
    def J_alpha_bg(self) -> np.ndarray:
        return self.jac[S_ALPHA, S_BG]

    @property
    def J_beta_ba(self) -> np.ndarray:
        return self.jac[S_BETA, S_BA]

    @property
    def J_beta_bg(self) -> np.ndarray:
        return self.jac[S_BETA, S_BG]

    @property
    def J_theta_bg(self) -> np.ndarray:
        return self.jac[S_THETA, S_BG]

    @property
    def J_phi_bg(self) -> np.ndarray:
        return self.jac[S_PHI, S_BG]

    @property
    def J_phi_c(self) -> np.ndarray:
        return self.jac[S_PHI, I_C]

    def sqrt_info(self) -> np.ndarray:
        """Whitening matrix W with Wᵀ W = cov⁻¹ (inverse Cholesky factor)."""
        if self._sqrt_info is None:
            L = np.linalg.cholesky(self.cov + 1e-16 * np.eye(DELTA_DIM))
            self._sqrt_info = np.linalg.inv(L)
        return self._sqrt_info

    def corrected(self, ba: np.ndarray, bg: np.ndarray, c: float):
        """First-order bias/scale corrected (alpha, beta, gamma, phi)."""
        dba = np.asarray(ba) - self.lin_ba
        dbg = np.asarray(bg) - self.lin_bg
        dc = float(c) - self.lin_c
        alpha = self.alpha + self.J_alpha_ba @ dba + self.J_alpha_bg @ dbg
        beta = self.beta + self.J_beta_ba @ dba + self.J_beta_bg @ dbg
        gamma = quat_multiply(self.gamma, so3_exp(self.J_theta_bg @ dbg))
        gamma = gamma / np.linalg.norm(gamma)
        phi = self.phi + self.J_phi_bg @ dbg + self.J_phi_c * dc
        return alpha, beta, gamma, phi


def _interp_odom(imu_stamps_ns, odom_stamps_ns, odom_speeds) -> np.ndarray:
    """Time-interpolate odometer speed to the IMU stamps (edge hold outside)."""
    if odom_stamps_ns is None or len(odom_stamps_ns) == 0:
        return np.zeros(len(imu_stamps_ns))
    t = np.asarray(imu_stamps_ns, dtype=np.float64)
    ts = np.asarray(odom_stamps_ns, dtype=np.float64)
    return np.interp(t, ts, np.asarray(odom_speeds, dtype=np.float64))


def integrate(
    imu_stamps_ns: np.ndarray,
    accel: np.ndarray,
    gyro: np.ndarray,
    odom_stamps_ns: np.ndarray | None,
    odom_speeds: np.ndarray | None,
    lin_ba: np.ndarray,
    lin_bg: np.ndarray,
    lin_c: float = 1.0,
    odom_extrinsic: RigidTransform | None = None,
    noise: ImuNoise | None = None,
) -> PreintegratedDelta:
    """Midpoint-rule preintegration of an IMU/odometer interval.

    ``odom_extrinsic`` rotates the odometer forward axis (+x) into the IMU
    body frame; its translation is the odometer lever arm and does not enter
    the increment itself.
    """
    imu_stamps_ns = np.asarray(imu_stamps_ns, dtype=np.int64)
    if imu_stamps_ns.size < 2:
        raise InsufficientDataError("preintegration needs at least two IMU samples")
    if np.any(np.diff(imu_stamps_ns) <= 0):
        raise InvalidStreamError("IMU timestamps must strictly increase")
    accel = np.asarray(accel, dtype=np.float64)
    gyro = np.asarray(gyro, dtype=np.float64)
    if odom_stamps_ns is not None and len(odom_stamps_ns) > 1:
        if np.any(np.diff(np.asarray(odom_stamps_ns)) <= 0):
            raise InvalidStreamError("odometer timestamps must strictly increase")
    noise = noise or ImuNoise()
    lin_ba = np.asarray(lin_ba, dtype=np.float64).reshape(3)
    lin_bg = np.asarray(lin_bg, dtype=np.float64).reshape(3)
    ext = odom_extrinsic or RigidTransform.identity()
    R_ob = quat_to_matrix(ext.q)
    fwd = R_ob[:, 0]  # odometer forward axis in the IMU frame

    speeds = _interp_odom(imu_stamps_ns, odom_stamps_ns, odom_speeds)

    alpha = np.zeros(3)
    beta = np.zeros(3)
    gamma = IDENTITY_QUAT.copy()
    phi = np.zeros(3)
    P = np.zeros((DELTA_DIM, DELTA_DIM))
    J = np.eye(DELTA_DIM)

    a_unb = accel - lin_ba
    w_unb = gyro - lin_bg
    dts = np.diff(imu_stamps_ns).astype(np.float64) / 1e9

    R_i = np.eye(3)
    for i in range(len(dts)):
        dt = dts[i]
        w_mid = 0.5 * (w_unb[i] + w_unb[i + 1])
        step = w_mid * dt
        dq = so3_exp(step)
        gamma_next = quat_multiply(gamma, dq)
        gamma_next = gamma_next / np.linalg.norm(gamma_next)
        R_next = quat_to_matrix(gamma_next)

        a0 = R_i @ a_unb[i]
        a1 = R_next @ a_unb[i + 1]
        a_mid = 0.5 * (a0 + a1)
        alpha = alpha + beta * dt + 0.5 * a_mid * dt * dt
        beta = beta + a_mid * dt

        v_mid = 0.5 * (speeds[i] + speeds[i + 1])
        vo = fwd * (lin_c * v_mid)
        R_mid = 0.5 * (R_i + R_next)
        phi = phi + R_mid @ vo * dt

        # first-order error-state transition
        F = np.eye(DELTA_DIM)
        a_hat0 = skew(a_unb[i])
        a_hat1 = skew(a_unb[i + 1])
        Rd = quat_to_matrix(dq)
        Jr = so3_right_jacobian(step)
        # dtheta' = Rdᵀ dtheta - Jr dt dbg
        F[S_THETA, S_THETA] = Rd.T
        F[S_THETA, S_BG] = -Jr * dt
        # dbeta' = dbeta - 0.5 dt (R_i [a0]x dθ + R_next [a1]x dθ') - R_mid dt dba
        dfdth = -0.5 * dt * (R_i @ a_hat0 + R_next @ a_hat1 @ Rd.T)
        dfdbg = 0.5 * dt * R_next @ a_hat1 @ Jr * dt
        F[S_BETA, S_THETA] = dfdth
        F[S_BETA, S_BA] = -R_mid * dt
        F[S_BETA, S_BG] = dfdbg
        # dalpha' = dalpha + dbeta dt + 0.5 dt (dbeta-step terms)
        F[S_ALPHA, S_BETA] = np.eye(3) * dt
        F[S_ALPHA, S_THETA] = 0.5 * dt * dfdth
        F[S_ALPHA, S_BA] = -0.5 * R_mid * dt * dt
        F[S_ALPHA, S_BG] = 0.5 * dt * dfdbg
        # dphi' = dphi - R_mid [vo]x dθ dt + R_mid fwd v_mid dt dc
        F[S_PHI, S_THETA] = -R_mid @ skew(vo) * dt
        F[S_PHI, I_C] = (R_mid @ fwd * (v_mid * dt)).reshape(3)

        # noise input: [na, ng, ns, nba, nbg, nc]
        G = np.zeros((DELTA_DIM, 12))
        G[S_BETA, 0:3] = R_mid * dt
        G[S_ALPHA, 0:3] = 0.5 * R_mid * dt * dt
        G[S_THETA, 3:6] = Jr * dt
        G[S_PHI, 6:9] = -R_mid * dt  # odometer noise mapped through R_mid
        Q = np.zeros((12, 12))
        Q[0:3, 0:3] = (noise.accel_density**2 / dt) * np.eye(3)
        Q[3:6, 3:6] = (noise.gyro_density**2 / dt) * np.eye(3)
        Q[6:9, 6:9] = (noise.odom_density**2 / dt) * np.eye(3)
        P = F @ P @ F.T + G @ Q @ G.T
        # bias / scale random walks enter directly
        P[S_BA, S_BA] += noise.accel_bias_walk**2 * dt * np.eye(3)
        P[S_BG, S_BG] += noise.gyro_bias_walk**2 * dt * np.eye(3)
        P[I_C, I_C] += noise.scale_walk**2 * dt

        J = F @ J

        gamma = gamma_next
        R_i = R_next

    dt_ns = int(imu_stamps_ns[-1] - imu_stamps_ns[0])
    # the F-chain bias columns already express d(increment)/d(linearization
    # bias): a bias increase is subtracted from the raw samples
    sens = J
    return PreintegratedDelta(
        alpha=alpha,
        beta=beta,
        gamma=quat_normalize(gamma),
        phi=phi,
        dt=dt_ns / 1e9,
        dt_ns=dt_ns,
        cov=0.5 * (P + P.T),
        jac=sens,
        lin_ba=lin_ba.copy(),
        lin_bg=lin_bg.copy(),
        lin_c=float(lin_c),
    )


BIAS_CORRECTION_GUARD = 0.1


def bias_correct(delta: PreintegratedDelta, ba: np.ndarray, bg: np.ndarray, c: float | None = None) -> PreintegratedDelta:
    """First-order update of the increment to new linearization biases."""
    ba = np.asarray(ba, dtype=np.float64).reshape(3)
    bg = np.asarray(bg, dtype=np.float64).reshape(3)
    c = delta.lin_c if c is None else float(c)
    step = max(
        float(np.max(np.abs(ba - delta.lin_ba))),
        float(np.max(np.abs(bg - delta.lin_bg))),
        abs(c - delta.lin_c),
    )
    if step >= BIAS_CORRECTION_GUARD:
        raise ReintegrationRequiredError(
            f"bias delta {step:.3g} exceeds first-order guard {BIAS_CORRECTION_GUARD}"
        )
    alpha, beta, gamma, phi = delta.corrected(ba, bg, c)
    return replace(
        delta,
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        phi=phi,
        lin_ba=ba.copy(),
        lin_bg=bg.copy(),
        lin_c=c,
        _sqrt_info=delta._sqrt_info,
    )


def predict_state(x_k: NavState, delta: PreintegratedDelta, gravity: np.ndarray | None = None) -> NavState:
    """Propagate a keyframe state through one increment."""
    g = gravity_vector() if gravity is None else np.asarray(gravity, dtype=np.float64)
    alpha, beta, gamma, _ = delta.corrected(x_k.ba, x_k.bg, x_k.c)
    R_k = quat_to_matrix(x_k.q)
    dt = delta.dt
    p = x_k.p + x_k.v * dt - 0.5 * g * dt * dt + R_k @ alpha
    v = x_k.v - g * dt + R_k @ beta
    q = quat_multiply(x_k.q, gamma)
    return NavState(p, v, q / np.linalg.norm(q), x_k.ba.copy(), x_k.bg.copy(), x_k.c)


def imu_odom_residual(
    x_k: NavState,
    x_k1: NavState,
    delta: PreintegratedDelta,
    gravity: np.ndarray | None = None,
    odom_lever_arm: np.ndarray | None = None,
    with_jacobians: bool = True,
):
    """19-dim preintegration residual and Jacobians w.r.t. both states.

    Row layout matches the increment error state: [alpha, beta, theta,
    ba, bg, phi, c]. The odometer rows compare the odometer-origin
    displacement, so they vanish at the propagated state for any lever arm.
    """
    g = gravity_vector() if gravity is None else np.asarray(gravity, dtype=np.float64)
    p_o = np.zeros(3) if odom_lever_arm is None else np.asarray(odom_lever_arm, dtype=np.float64)
    dt = delta.dt

    dba = x_k.ba - delta.lin_ba
    dbg = x_k.bg - delta.lin_bg
    alpha_c, beta_c, gamma_c, phi_c = delta.corrected(x_k.ba, x_k.bg, x_k.c)

    R_k = quat_to_matrix(x_k.q)
    R_k1 = quat_to_matrix(x_k1.q)
    RkT = R_k.T

    u = x_k1.p - x_k.p + 0.5 * g * dt * dt - x_k.v * dt
    w = x_k1.v + g * dt - x_k.v
    u2 = x_k1.p - x_k.p + R_k1 @ p_o - R_k @ p_o

    q_rel = quat_multiply(quat_conjugate(x_k.q), x_k1.q)
    A = quat_multiply(quat_conjugate(gamma_c), q_rel)

    r = np.zeros(DELTA_DIM)
    r[S_ALPHA] = RkT @ u - alpha_c
    r[S_BETA] = RkT @ w - beta_c
    r[S_THETA] = 2.0 * A[1:] * np.sign(A[0]) if A[0] != 0 else 2.0 * A[1:]
    r[S_BA] = x_k1.ba - x_k.ba
    r[S_BG] = x_k1.bg - x_k.bg
    r[S_PHI] = RkT @ u2 - phi_c
    r[I_C] = x_k1.c - x_k.c

    if not with_jacobians:
        return r, None, None

    Jk = np.zeros((DELTA_DIM, STATE_DIM))
    Jk1 = np.zeros((DELTA_DIM, STATE_DIM))

    # alpha rows
    Jk[S_ALPHA, X_P] = -RkT
    Jk[S_ALPHA, X_V] = -RkT * dt
    Jk[S_ALPHA, X_TH] = skew(RkT @ u)
    Jk[S_ALPHA, X_BA] = -delta.J_alpha_ba
    Jk[S_ALPHA, X_BG] = -delta.J_alpha_bg
    Jk1[S_ALPHA, X_P] = RkT

    # beta rows
    Jk[S_BETA, X_V] = -RkT
    Jk[S_BETA, X_TH] = skew(RkT @ w)
    Jk[S_BETA, X_BA] = -delta.J_beta_ba
    Jk[S_BETA, X_BG] = -delta.J_beta_bg
    Jk1[S_BETA, X_V] = RkT

    # theta rows (sign follows the scalar-part canonicalization used above)
    sgn = np.sign(A[0]) if A[0] != 0 else 1.0
    L_gc = quat_left_matrix(quat_conjugate(gamma_c))
    Jk[S_THETA, X_TH] = -sgn * (L_gc @ quat_right_matrix(q_rel))[1:, 1:]
    Jk1[S_THETA, X_TH] = sgn * quat_left_matrix(A)[1:, 1:]
    # exact chain through gamma_c = gamma ⊗ Exp(J_theta_bg (bg - lin_bg))
    v0 = delta.J_theta_bg @ dbg
    C = quat_multiply(quat_conjugate(delta.gamma), q_rel)
    D = quat_exp_jacobian(-v0)
    Jk[S_THETA, X_BG] = -2.0 * sgn * (quat_right_matrix(C) @ D @ delta.J_theta_bg)[1:, :]

    # bias rows
    Jk[S_BA, X_BA] = -np.eye(3)
    Jk1[S_BA, X_BA] = np.eye(3)
    Jk[S_BG, X_BG] = -np.eye(3)
    Jk1[S_BG, X_BG] = np.eye(3)

    # phi rows
    Jk[S_PHI, X_P] = -RkT
    Jk[S_PHI, X_TH] = skew(RkT @ (x_k1.p - x_k.p + R_k1 @ p_o))
    Jk[S_PHI, X_BG] = -delta.J_phi_bg
    Jk[S_PHI, X_C] = -delta.J_phi_c
    Jk1[S_PHI, X_P] = RkT
    Jk1[S_PHI, X_TH] = -RkT @ R_k1 @ skew(p_o)

    # scale row
    Jk[I_C, X_C] = -1.0
    Jk1[I_C, X_C] = 1.0

    return r, Jk, Jk1
