"""SE(3) / unit-quaternion arithmetic underpinning every other module.

Conventions, fixed once for the whole package:

* Quaternions are stored scalar-first ``(w, x, y, z)`` and kept on the
  ``w >= 0`` hemisphere; the two antipodal representatives of a rotation
  collapse to one canonical form (see :func:`quat_normalize_hemisphere`).
* Twists are plain 6-vectors ordered ``[rotation | translation]``
  (radians first, meters second).  All Jacobians and information
  matrices in the package use this ordering.
* Variables are updated by left perturbation ``exp(delta) * x``.

The low-level functions operate on raw arrays and broadcast over leading
batch dimensions; :class:`Pose3` is a thin immutable wrapper used by the
graph layer.  Everything here is pure and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROT = slice(0, 3)
TRANS = slice(3, 6)

# Below this rotation angle the closed forms degrade to 0/0 and Taylor
# expansions take over.
SMALL_ANGLE = 1e-6
# The Barfoot Q-matrix coefficients cancel catastrophically well before
# SMALL_ANGLE, so they switch earlier.
_Q_SMALL_ANGLE = 1e-3


def _canonical_zero(q):
    # -0.0 + 0.0 == +0.0, which makes hemisphere output bit-stable.
    return q + 0.0


def quat_normalize_hemisphere(q) -> np.ndarray:
    """Normalize to unit length and map onto the w >= 0 hemisphere.

    At the w == 0 boundary the first nonzero component among (x, y, z)
    is made positive, so ``q`` and ``-q`` always produce bit-identical
    output.  Raises ``ValueError`` on (near-)zero norm.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("cannot normalize zero-norm quaternion")
    q = q / norm
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    tie = np.where(x != 0.0, np.sign(x), np.where(y != 0.0, np.sign(y), np.sign(z)))
    sign = np.where(w > 0.0, 1.0, np.where(w < 0.0, -1.0, tie))
    # all-zero quaternion is excluded above; sign is never 0 here
    return _canonical_zero(q * sign[..., None])


def quat_mul(q1, q2) -> np.ndarray:
    """Hamilton product, scalar-first convention."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    w1, x1, y1, z1 = q1[..., 0], q1[..., 1], q1[..., 2], q1[..., 3]
    w2, x2, y2, z2 = q2[..., 0], q2[..., 1], q2[..., 2], q2[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q, v) -> np.ndarray:
    """Rotate vector(s) v by unit quaternion(s) q."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = q[..., :1]
    u = q[..., 1:]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_to_rotation_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    m[..., 0, 1] = 2.0 * (xy - wz)
    m[..., 0, 2] = 2.0 * (xz + wy)
    m[..., 1, 0] = 2.0 * (xy + wz)
    m[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    m[..., 1, 2] = 2.0 * (yz - wx)
    m[..., 2, 0] = 2.0 * (xz - wy)
    m[..., 2, 1] = 2.0 * (yz + wx)
    m[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return m


def rotation_matrix_to_quat(m) -> np.ndarray:
    """Shepperd's method; hemisphere-normalized output (single matrix)."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        if i == 0:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q = np.array(
                [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
            )
        elif i == 1:
            s = np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2]) * 2.0
            q = np.array(
                [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
            )
        else:
            s = np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2]) * 2.0
            q = np.array(
                [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
            )
    return quat_normalize_hemisphere(q)


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp_quat(omega) -> np.ndarray:
    """Rotation-vector exponential, returned as a hemisphere quaternion.

    Branch-free: sin(theta/2)/theta is evaluated through np.sinc, which
    is exact at zero.
    """
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1)
    half_sinc = 0.5 * np.sinc(theta / (2.0 * np.pi))
    q = np.concatenate(
        [np.cos(0.5 * theta)[..., None], half_sinc[..., None] * omega], axis=-1
    )
    return quat_normalize_hemisphere(q)


def so3_log_quat(q) -> np.ndarray:
    """Rotation vector of a unit quaternion; norm <= pi.

    For angles at exactly pi (w == 0) the axis sign follows the
    hemisphere tie rule already baked into canonical quaternions.
    """
    q = quat_normalize_hemisphere(q)
    w = q[..., 0]
    xyz = q[..., 1:]
    s = np.linalg.norm(xyz, axis=-1)
    small = s < SMALL_ANGLE
    s_safe = np.where(small, 1.0, s)
    w_safe = np.where(w == 0.0, 1.0, w)  # w==0 implies s==1, never small
    # angle = 2*atan2(s, w); factor = angle / s
    factor = np.where(
        small,
        (2.0 / w_safe) * (1.0 - s * s / (3.0 * w_safe * w_safe)),
        2.0 * np.arctan2(s, w) / s_safe,
    )
    return factor[..., None] * xyz


def _so3_jac_coeffs(theta):
    """Coefficients a2 = (1-cos)/t^2 and a3 = (t-sin)/t^3 of the left Jacobian."""
    half = 0.5 * theta
    a2 = 0.5 * np.sinc(half / np.pi) ** 2  # exact: (1-cos t)/t^2 = sin^2(t/2)/(t^2/2)
    small = theta < SMALL_ANGLE
    t_safe = np.where(small, 1.0, theta)
    a3 = np.where(
        small,
        1.0 / 6.0 - theta * theta / 120.0,
        (t_safe - np.sin(t_safe)) / t_safe**3,
    )
    return a2, a3


def so3_left_jacobian(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1)
    a2, a3 = _so3_jac_coeffs(theta)
    w = skew(omega)
    w2 = w @ w
    eye = np.broadcast_to(np.eye(3), w.shape).copy()
    return eye + a2[..., None, None] * w + a3[..., None, None] * w2


def so3_left_jacobian_inverse(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < SMALL_ANGLE
    t_safe = np.where(small, 1.0, theta)
    half = 0.5 * t_safe
    # c = (1 - (t/2) cot(t/2)) / t^2, stable on (0, pi]
    c = np.where(
        small,
        1.0 / 12.0 + theta * theta / 720.0,
        (1.0 - half * np.cos(half) / np.sin(half)) / t_safe**2,
    )
    w = skew(omega)
    w2 = w @ w
    eye = np.broadcast_to(np.eye(3), w.shape).copy()
    return eye - 0.5 * w + c[..., None, None] * w2


def se3_exp_qt(xi):
    """Closed-form SE(3) exponential of twists; returns (quat, trans)."""
    xi = np.asarray(xi, dtype=np.float64)
    omega = xi[..., ROT]
    v = xi[..., TRANS]
    q = so3_exp_quat(omega)
    t = np.einsum("...ij,...j->...i", so3_left_jacobian(omega), v)
    return q, t


def se3_log_qt(q, t) -> np.ndarray:
    """Inverse of :func:`se3_exp_qt`; rotational part has norm <= pi."""
    omega = so3_log_quat(q)
    t = np.asarray(t, dtype=np.float64)
    v = np.einsum("...ij,...j->...i", so3_left_jacobian_inverse(omega), t)
    return np.concatenate([omega, v], axis=-1)


def se3_adjoint(q, t) -> np.ndarray:
    """Adjoint of a pose in [rot|trans] twist ordering."""
    r = quat_to_rotation_matrix(q)
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros(r.shape[:-2] + (6, 6), dtype=np.float64)
    out[..., 0:3, 0:3] = r
    out[..., 3:6, 3:6] = r
    out[..., 3:6, 0:3] = skew(t) @ r
    return out


def _se3_q_matrix(omega, v) -> np.ndarray:
    """Barfoot Q block of the SE(3) left Jacobian (rot-first ordering)."""
    omega = np.asarray(omega, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < _Q_SMALL_ANGLE
    t_safe = np.where(small, 1.0, theta)
    t2 = t_safe * t_safe
    sin_t = np.sin(t_safe)
    cos_t = np.cos(t_safe)
    m2 = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (t_safe - sin_t) / (t2 * t_safe))
    m3 = np.where(
        small,
        -1.0 / 24.0 + theta**2 / 720.0,
        (1.0 - 0.5 * t2 - cos_t) / (t2 * t2),
    )
    m4 = np.where(
        small,
        -1.0 / 120.0 + theta**2 / 5040.0,
        (t_safe - sin_t - t_safe * t2 / 6.0) / (t2 * t2 * t_safe),
    )
    ph = skew(omega)
    rh = skew(v)
    ph_rh = ph @ rh
    rh_ph = rh @ ph
    ph_rh_ph = ph_rh @ ph
    m2 = m2[..., None, None]
    m3 = m3[..., None, None]
    m4 = m4[..., None, None]
    return (
        0.5 * rh
        + m2 * (ph_rh + rh_ph + ph_rh_ph)
        - m3 * (ph @ ph_rh + rh_ph @ ph - 3.0 * ph_rh_ph)
        - 0.5 * (m3 - 3.0 * m4) * (ph_rh_ph @ ph + ph @ ph_rh_ph)
    )


def se3_left_jacobian_inverse(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=np.float64)
    omega = xi[..., ROT]
    v = xi[..., TRANS]
    a_inv = so3_left_jacobian_inverse(omega)
    q_blk = _se3_q_matrix(omega, v)
    out = np.zeros(xi.shape[:-1] + (6, 6), dtype=np.float64)
    out[..., 0:3, 0:3] = a_inv
    out[..., 3:6, 3:6] = a_inv
    out[..., 3:6, 0:3] = -a_inv @ q_blk @ a_inv
    return out


def se3_right_jacobian_inverse(xi) -> np.ndarray:
    return se3_left_jacobian_inverse(-np.asarray(xi, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid transform: canonical unit quaternion + translation (meters).

    Immutable after construction; the constructor normalizes the
    quaternion onto the w >= 0 hemisphere.
    """

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize_hemisphere(np.asarray(self.quat, dtype=np.float64).reshape(4))
        t = np.array(self.trans, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError("non-finite translation")
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "trans", t)

    @staticmethod
    def identity() -> "Pose3":
        return Pose3()

    @staticmethod
    def from_matrix(m) -> "Pose3":
        m = np.asarray(m, dtype=np.float64)
        return Pose3(rotation_matrix_to_quat(m[:3, :3]), m[:3, 3])

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotation_matrix(self.quat)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.trans
        return m

    def transform_points(self, pts) -> np.ndarray:
        return quat_rotate(self.quat, np.asarray(pts, dtype=np.float64)) + self.trans

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self.quat)
        t = ", ".join(f"{v:.6g}" for v in self.trans)
        return f"Pose3(quat=[{q}], trans=[{t}])"


def compose(a: Pose3, b: Pose3) -> Pose3:
    """a * b: maps a point p to R_a (R_b p + t_b) + t_a."""
    return Pose3(quat_mul(a.quat, b.quat), quat_rotate(a.quat, b.trans) + a.trans)


def inverse(p: Pose3) -> Pose3:
    qc = quat_conjugate(p.quat)
    return Pose3(qc, -quat_rotate(qc, p.trans))


def exp(xi) -> Pose3:
    """SE(3) exponential of a [rot|trans] twist."""
    q, t = se3_exp_qt(np.asarray(xi, dtype=np.float64).reshape(6))
    return Pose3(q, t)


def log(p: Pose3) -> np.ndarray:
    """SE(3) logarithm; inverse of :func:`exp` for rotation angles < pi."""
    return se3_log_qt(p.quat, p.trans)


def relative_object_pose(camera_in_world: Pose3, object_in_world: Pose3) -> Pose3:
    """Pose of the object expressed in the camera frame."""
    return compose(inverse(camera_in_world), object_in_world)


def rotation_angular_distance(a: Pose3, b: Pose3) -> float:
    """Geodesic angle between the two rotations, in [0, pi]."""
    dot = np.abs(np.dot(a.quat, b.quat))
    return float(2.0 * np.arccos(np.clip(dot, -1.0, 1.0)))


def chordal_distance(a: Pose3, b: Pose3) -> float:
    """sqrt(||R_a - R_b||_F^2 + ||t_a - t_b||^2)."""
    dr = a.rotation_matrix() - b.rotation_matrix()
    dt = a.trans - b.trans
    return float(np.sqrt(np.sum(dr * dr) + np.dot(dt, dt)))


def pose_delta_norm(a: Pose3, b: Pose3) -> float:
    """Tangent-space distance ||log(a^-1 b)||; zero iff poses equal."""
    return float(np.linalg.norm(log(compose(inverse(a), b))))
