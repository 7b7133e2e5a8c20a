"""Rotation / rigid-transform algebra and integer-nanosecond time arithmetic.

Quaternions are Hamilton convention, scalar first ``[w, x, y, z]``, and carry
the passive body-to-world meaning: ``rotate(q_bw, v_body) = v_world``.
Construction-style operations (normalization, exp map) canonicalize the
double cover to ``w >= 0``; raw products keep their sign so that residuals
built from quaternion products stay smooth.

All functions broadcast over leading axes: quaternions have shape ``(..., 4)``
and vectors ``(..., 3)``.

Timestamps throughout the package are integer nanoseconds since the dataset
epoch, so ordering and subtraction are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from railfuse.errors import InvalidArgumentError

NS_PER_S = 1_000_000_000

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])

_SMALL_ANGLE = 1e-8


def s_to_ns(t: float) -> int:
    """Convert seconds to the nearest integer nanosecond."""
    return int(round(t * NS_PER_S))


def ns_to_s(t_ns) -> float:
    return np.asarray(t_ns, dtype=np.float64) / NS_PER_S if np.ndim(t_ns) else t_ns / NS_PER_S


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Unit-normalize and canonicalize to w >= 0."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    q = q / n
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b (no renormalization, no sign canonicalization)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by quaternion(s) q."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = q[..., :1]
    u = q[..., 1:]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix R(q), shape (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (Shepperd's method, w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax([R[0, 0], R[1, 1], R[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return quat_normalize(q)


def quat_left_matrix(q: np.ndarray) -> np.ndarray:
    """4x4 matrix L(q) with L(q) @ p == q ⊗ p."""
    w, x, y, z = q
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, -z, y],
            [y, z, w, -x],
            [z, -y, x, w],
        ]
    )


def quat_right_matrix(q: np.ndarray) -> np.ndarray:
    """4x4 matrix Rm(q) with Rm(q) @ p == p ⊗ q."""
    w, x, y, z = q
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, z, -y],
            [y, -z, w, x],
            [z, y, -x, w],
        ]
    )


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]x, shape (..., 3, 3)."""
    v = np.asarray(v, dtype=np.float64)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    o = np.zeros_like(x)
    return np.stack(
        [
            np.stack([o, -z, y], axis=-1),
            np.stack([z, o, -x], axis=-1),
            np.stack([-y, x, o], axis=-1),
        ],
        axis=-2,
    )


def so3_exp(v: np.ndarray) -> np.ndarray:
    """Exponential map: axis-angle vector (radians) to unit quaternion.

    Small angles (< 1e-8 rad) use the second-order series of sin(θ/2)/θ.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError("so3_exp: non-finite input")
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < _SMALL_ANGLE
    # sin(θ/2)/θ; series 1/2 - θ²/48 below the branch point
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    w = np.cos(half)
    q = np.concatenate([w, k * v], axis=-1)
    return quat_normalize(q)


def so3_log(q: np.ndarray) -> np.ndarray:
    """Logarithm map: unit quaternion to axis-angle vector, angle in [0, π]."""
    q = quat_normalize(q)
    vec = q[..., 1:]
    n = np.linalg.norm(vec, axis=-1, keepdims=True)
    w = q[..., :1]
    angle = 2.0 * np.arctan2(n, w)
    small = n < _SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 2.0, angle / np.where(small, 1.0, n))
    return k * vec


def so3_right_jacobian(v: np.ndarray) -> np.ndarray:
    """Right Jacobian Jr of SO(3): exp(v + dv) ≈ exp(v) ⊗ exp(Jr dv)."""
    v = np.asarray(v, dtype=np.float64)
    theta = float(np.linalg.norm(v))
    S = skew(v)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * S + (1.0 / 6.0) * (S @ S)
    t2 = theta * theta
    return (
        np.eye(3)
        - ((1.0 - np.cos(theta)) / t2) * S
        + ((theta - np.sin(theta)) / (t2 * theta)) * (S @ S)
    )


def quat_exp_jacobian(u: np.ndarray) -> np.ndarray:
    """4x3 derivative of the quaternion exponential dExp(u)/du."""
    u = np.asarray(u, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(u))
    out = np.zeros((4, 3))
    if theta < 1e-4:
        out[0, :] = -0.25 * u
        out[1:, :] = 0.5 * (1.0 - theta * theta / 24.0) * np.eye(3) - np.outer(u, u) / 24.0
    else:
        s, c = np.sin(0.5 * theta), np.cos(0.5 * theta)
        out[0, :] = -0.5 * s * u / theta
        out[1:, :] = (s / theta) * np.eye(3) + (0.5 * c / theta**2 - s / theta**3) * np.outer(u, u)
    return out


def quat_kinematics_step(q: np.ndarray, omega: np.ndarray, dt: float) -> np.ndarray:
    """Advance q by body rate omega held constant over dt (zeroth-order hold)."""
    if dt < 0:
        raise InvalidArgumentError("quat_kinematics_step: negative dt")
    q = np.asarray(q, dtype=np.float64)
    dq = so3_exp(np.asarray(omega, dtype=np.float64) * dt)
    out = quat_multiply(q, dq)
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def quat_slerp(q0: np.ndarray, q1: np.ndarray, alpha) -> np.ndarray:
    """Spherical interpolation along the shorter arc; alpha broadcasts."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0.0, -q1, q1)
    rel = quat_multiply(quat_conjugate(q0), q1)
    alpha = np.asarray(alpha, dtype=np.float64)[..., None]
    out = quat_multiply(q0, so3_exp(so3_log(rel) * alpha))
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


@dataclass(frozen=True)
class RigidTransform:
    """Rigid transform: p_out = R(q) p_in + t."""

    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(np.asarray(self.q, dtype=np.float64)))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3).copy())

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    @staticmethod
    def from_rotvec(rotvec, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return RigidTransform(so3_exp(np.asarray(rotvec, dtype=np.float64)), np.asarray(t))

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform point(s), shape (..., 3)."""
        return quat_rotate(self.q, np.asarray(p, dtype=np.float64)) + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply ``other`` first, then ``self``."""
        return RigidTransform(
            quat_multiply(self.q, other.q), quat_rotate(self.q, other.t) + self.t
        )

    def inverse(self) -> "RigidTransform":
        qi = quat_conjugate(self.q)
        return RigidTransform(qi, -quat_rotate(qi, self.t))

    def rotvec(self) -> np.ndarray:
        return so3_log(self.q)

    def almost_equal(self, other: "RigidTransform", rot_tol=1e-10, trans_tol=1e-10) -> bool:
        dq = quat_multiply(quat_conjugate(self.q), other.q)
        ang = float(np.linalg.norm(so3_log(dq)))
        return ang <= rot_tol and float(np.linalg.norm(self.t - other.t)) <= trans_tol


def transform_point(T: RigidTransform, p: np.ndarray) -> np.ndarray:
    """R(q)·p + t (alias of RigidTransform.apply as a free function)."""
    return T.apply(p)


def pose_compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


class PoseInterpolator:
    """Piecewise pose interpolation: linear translation, slerp rotation.

    Built from sampled body poses at integer-nanosecond stamps; queries
    vectorized over arrays of stamps.
    """

    def __init__(self, stamps_ns: np.ndarray, positions: np.ndarray, quats: np.ndarray):
        stamps_ns = np.asarray(stamps_ns, dtype=np.int64)
        if stamps_ns.size < 2:
            raise InvalidArgumentError("PoseInterpolator needs at least two samples")
        if np.any(np.diff(stamps_ns) <= 0):
            raise InvalidArgumentError("PoseInterpolator stamps must strictly increase")
        self.stamps_ns = stamps_ns
        self.positions = np.asarray(positions, dtype=np.float64)
        # keep neighbouring quaternions in the same hemisphere for slerp
        quats = np.asarray(quats, dtype=np.float64).copy()
        for i in range(1, len(quats)):
            if np.dot(quats[i - 1], quats[i]) < 0.0:
                quats[i] = -quats[i]
        self.quats = quats

    @property
    def t_start(self) -> int:
        return int(self.stamps_ns[0])

    @property
    def t_end(self) -> int:
        return int(self.stamps_ns[-1])

    def covers(self, t_ns) -> bool:
        t_ns = np.asarray(t_ns)
        return bool(np.all(t_ns >= self.stamps_ns[0]) and np.all(t_ns <= self.stamps_ns[-1]))

    def query(self, t_ns):
        """Return (positions (...,3), quats (...,4)) at query stamps."""
        t_ns = np.atleast_1d(np.asarray(t_ns, dtype=np.int64))
        idx = np.clip(np.searchsorted(self.stamps_ns, t_ns, side="right") - 1, 0, len(self.stamps_ns) - 2)
        t0 = self.stamps_ns[idx]
        t1 = self.stamps_ns[idx + 1]
        alpha = (t_ns - t0).astype(np.float64) / (t1 - t0).astype(np.float64)
        p = self.positions[idx] + alpha[:, None] * (self.positions[idx + 1] - self.positions[idx])
        q = quat_slerp(self.quats[idx], self.quats[idx + 1], alpha)
        return p, q

    def pose_at(self, t_ns: int) -> RigidTransform:
        p, q = self.query(np.array([t_ns]))
        return RigidTransform(q[0], p[0])
