"""SE(3) pose arithmetic on unit quaternions.

Conventions, fixed repo-wide:
  * quaternions are stored (w, x, y, z) and hemisphere-normalized (w >= 0)
  * twist vectors are (wx, wy, wz, vx, vy, vz): rotation first, then translation
  * retract(T, d) == compose(exp(d), T), i.e. updates multiply on the left
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# log() flags results this close to the pi branch point of the rotation angle.
NEAR_PI_TOL = 1e-6

_UNIT_TOL = 1e-12


def _canonical_quat(q: np.ndarray) -> np.ndarray:
    """Renormalize and pick the w >= 0 hemisphere (deterministic for w == 0)."""
    q = np.asarray(q, dtype=float).reshape(4).copy()
    n = math.sqrt(float(q @ q))
    if n < 1e-9:
        raise ValueError("quaternion norm too small to normalize")
    if abs(n - 1.0) > _UNIT_TOL:
        q /= n
    if q[0] < 0.0:
        q = -q
    elif q[0] == 0.0:
        # w == 0 leaves a sign ambiguity; fix it by the first nonzero component.
        for c in q[1:]:
            if c != 0.0:
                if c < 0.0:
                    q = -q
                break
    return q


@dataclass
class Pose:
    """A rigid transform: unit quaternion (w,x,y,z) plus translation (m).

    Treated as an immutable value everywhere; operations return new poses.
    """

    quat: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        self.quat = _canonical_quat(self.quat)
        self.trans = np.asarray(self.trans, dtype=float).reshape(3).copy()

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def copy(self) -> "Pose":
        return Pose(self.quat, self.trans)


def identity() -> Pose:
    return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to quaternion via the max-trace branch (Shepperd)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return _canonical_quat(q)


def from_matrix(R: np.ndarray, t: np.ndarray) -> Pose:
    return Pose(matrix_to_quat(R), t)


def compose(a: Pose, b: Pose) -> Pose:
    """(a o b) transforms points as a(b(p))."""
    return Pose(quat_mul(a.quat, b.quat), a.rotation_matrix() @ b.trans + a.trans)


def inverse(p: Pose) -> Pose:
    w, x, y, z = p.quat
    q_inv = np.array([w, -x, -y, -z])
    return Pose(q_inv, -(quat_to_matrix(q_inv) @ p.trans))


def transform_point(T: Pose, p: np.ndarray) -> np.ndarray:
    return T.rotation_matrix() @ np.asarray(p, dtype=float) + T.trans


def transform_points(T: Pose, pts: np.ndarray) -> np.ndarray:
    """Apply T to an (n, 3) array of points."""
    return np.asarray(pts, dtype=float) @ T.rotation_matrix().T + T.trans


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _so3_coeffs(theta_sq: float) -> tuple[float, float]:
    """Coefficients c1, c2 of J_l = I + c1*S + c2*S^2 for rotation angle theta."""
    if theta_sq < 1e-8:
        c1 = 0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0
        c2 = 1.0 / 6.0 - theta_sq / 120.0 + theta_sq * theta_sq / 5040.0
        return c1, c2
    theta = math.sqrt(theta_sq)
    return (1.0 - math.cos(theta)) / theta_sq, (theta - math.sin(theta)) / (theta_sq * theta)


def exp(xi: np.ndarray) -> Pose:
    """Exponential map: twist (rotation-first 6-vector) to pose."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, v = xi[:3], xi[3:]
    theta_sq = float(omega @ omega)
    theta = math.sqrt(theta_sq)

    half = 0.5 * theta
    if theta_sq < 1e-8:
        # sin(theta/2)/theta to fourth order
        k = 0.5 - theta_sq / 48.0 + theta_sq * theta_sq / 3840.0
    else:
        k = math.sin(half) / theta
    quat = np.concatenate(([math.cos(half)], k * omega))

    c1, c2 = _so3_coeffs(theta_sq)
    S = skew(omega)
    J_l = np.eye(3) + c1 * S + c2 * (S @ S)
    return Pose(quat, J_l @ v)


def log_flagged(T: Pose) -> tuple[np.ndarray, bool]:
    """Inverse of exp; the flag marks rotation angles within NEAR_PI_TOL of pi."""
    w = T.quat[0]
    vec = T.quat[1:]
    n = math.sqrt(float(vec @ vec))
    theta = 2.0 * math.atan2(n, w)  # in [0, pi] thanks to w >= 0
    if n < 1e-9:
        omega = 2.0 * vec  # first order; exact at theta == 0
    else:
        omega = (theta / n) * vec

    theta_sq = theta * theta
    if theta_sq < 1e-8:
        c3 = 1.0 / 12.0 + theta_sq / 720.0 + theta_sq * theta_sq / 30240.0
    else:
        c3 = (1.0 - 0.5 * theta * math.cos(0.5 * theta) / math.sin(0.5 * theta)) / theta_sq
    S = skew(omega)
    J_l_inv = np.eye(3) - 0.5 * S + c3 * (S @ S)
    xi = np.concatenate([omega, J_l_inv @ T.trans])
    return xi, bool(abs(theta - math.pi) < NEAR_PI_TOL)


def log(T: Pose) -> np.ndarray:
    return log_flagged(T)[0]


def retract(T: Pose, delta: np.ndarray) -> Pose:
    """Left-multiplicative update: compose(exp(delta), T)."""
    return compose(exp(delta), T)


def rotation_angle(p: Pose) -> float:
    """Rotation angle in [0, pi]."""
    vec = p.quat[1:]
    return 2.0 * math.atan2(math.sqrt(float(vec @ vec)), p.quat[0])


def pose_difference(a: Pose, b: Pose) -> tuple[float, float]:
    """(rotation angle, translation norm) of a o b^-1."""
    d = compose(a, inverse(b))
    return rotation_angle(d), float(np.linalg.norm(d.trans))
